"""Single-factor and grouped factor-model laboratory.

Closed-form conditional-normal quantities for the one-factor model

    Y_it = lambda_i F_t + eps_it,   F_t ~ N(0, sigma_f^2),  eps_it ~ N(0, noise_sd^2)

and simulators for that model and for the grouped AR(1) loading model used in
the convergence experiments.  With ``noise_sd = 1`` the closed forms reduce to

    w_j = sigma^2 l_1 l_j / (1 + sigma^2 ||l||^2)
    var = 1 + l_1^2 sigma^2 - sigma^4 l_1^2 ||l||^2 / (1 + sigma^2 ||l||^2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels, rng
from .errors import ConfigError
from .panel import Panel


@dataclass(frozen=True)
class FactorSpec:
    lambda1: float
    lambdas: np.ndarray
    sigma_f: float = 1.0
    noise_sd: float = 1.0
    factor_law: str = "iid_gaussian"
    rho: float = 0.0
    group_map: Mapping[int, int] | None = None

    def __post_init__(self):
        lam = np.array(self.lambdas, dtype=float, copy=True).reshape(-1)
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "lambda1", float(self.lambda1))
        if lam.size < 1:
            raise ConfigError("lambdas: need at least one donor loading")
        if not self.sigma_f > 0:
            raise ConfigError("sigma_f must be positive")
        if not self.noise_sd > 0:
            raise ConfigError("noise_sd must be positive")
        if self.factor_law not in ("iid_gaussian", "ar1"):
            raise ConfigError(f"factor_law must be 'iid_gaussian' or 'ar1', got {self.factor_law!r}")
        if self.factor_law == "ar1" and not abs(self.rho) < 1:
            raise ConfigError("rho must satisfy |rho| < 1")

    @property
    def J(self) -> int:
        return self.lambdas.size


@dataclass(frozen=True)
class ConditionalGaussian:
    """Law of Y_1 given the donors: mean ``weights @ y_J``, variance ``variance``."""

    weights: np.ndarray
    variance: float

    @property
    def mean_coeffs(self) -> np.ndarray:
        return self.weights


@dataclass(frozen=True)
class CharacterizationReport:
    sign_ok: bool
    sphere_residual: float
    residual_tol: float
    in_simplex: bool
    weights: np.ndarray

    @property
    def conditions_hold(self) -> bool:
        return self.sign_ok and abs(self.sphere_residual) <= self.residual_tol


def _require_iid(spec: FactorSpec) -> None:
    if spec.factor_law != "iid_gaussian":
        raise ConfigError("closed forms are derived for an iid Gaussian factor")


def conditional_weights(spec: FactorSpec) -> np.ndarray:
    _require_iid(spec)
    s2, n2 = spec.sigma_f**2, spec.noise_sd**2
    lam = spec.lambdas
    return s2 * spec.lambda1 * lam / (n2 + s2 * float(lam @ lam))


def conditional_variance(spec: FactorSpec) -> float:
    _require_iid(spec)
    s2, n2 = spec.sigma_f**2, spec.noise_sd**2
    l1 = spec.lambda1
    ss = float(spec.lambdas @ spec.lambdas)
    return n2 + l1 * l1 * s2 - s2 * s2 * l1 * l1 * ss / (n2 + s2 * ss)


def conditional_gaussian(spec: FactorSpec) -> ConditionalGaussian:
    return ConditionalGaussian(conditional_weights(spec), conditional_variance(spec))


def recovered_loading(spec: FactorSpec) -> float:
    """sum_j w_j lambda_j, which tends to lambda_1 as ||lambda||^2 grows."""
    s2, n2 = spec.sigma_f**2, spec.noise_sd**2
    ss = float(spec.lambdas @ spec.lambdas)
    return s2 * spec.lambda1 * ss / (n2 + s2 * ss)


def check_characterization(spec: FactorSpec, tol: float = 1e-9) -> CharacterizationReport:
    """Check whether the risk-minimising weights lie in the simplex.

    The analytic conditions are that every donor loading has the sign of the
    treated loading and that ``sum l_j^2 - l_1 sum l_j + noise^2/sigma^2 = 0``.
    Since ``|sum w - 1| = sigma^2 |residual| / (noise^2 + sigma^2 ||l||^2)`` the
    residual tolerance is ``tol`` rescaled by that factor.
    """
    w = conditional_weights(spec)
    lam, l1 = spec.lambdas, spec.lambda1
    s2, n2 = spec.sigma_f**2, spec.noise_sd**2
    residual = float(lam @ lam - l1 * lam.sum() + n2 / s2)
    residual_tol = tol * (n2 + s2 * float(lam @ lam)) / s2
    sign_ok = bool(np.all(l1 * lam >= 0.0))
    in_simplex = bool(np.all(w >= -tol) and abs(w.sum() - 1.0) <= tol)
    return CharacterizationReport(sign_ok, residual, residual_tol, in_simplex, w)


def boundary_loading(lambda1: float, J: int, sigma: float, noise_sd: float = 1.0) -> np.ndarray:
    """Equal donor loadings solving l^2 - l_1 l + noise^2/(J sigma^2) = 0 (smaller root).

    A real root exists iff ``lambda1^2 >= 4 noise^2 / (J sigma^2)``.
    """
    c = noise_sd**2 / (J * sigma**2)
    disc = lambda1 * lambda1 - 4.0 * c
    if disc < -1e-14:
        raise ConfigError("no real equal-loading solution: lambda1^2 < 4/(J sigma^2)")
    root = 0.5 * (lambda1 - math.copysign(math.sqrt(max(disc, 0.0)), lambda1))
    return np.full(J, root)


# ---------------------------------------------------------------------------
# simulators


def _labels(n_donors: int) -> tuple:
    width = max(2, len(str(n_donors)))
    return ("treated",) + tuple(f"d{j:0{width}d}" for j in range(1, n_donors + 1))


def simulate_single_factor(spec: FactorSpec, t_total: int, t0: int, seed: int) -> Panel:
    """Zero-effect panel from the one-factor model (treated unit first)."""
    g = rng.stream(seed, rng.SIM)
    loadings = np.concatenate(([spec.lambda1], spec.lambdas))
    if spec.factor_law == "ar1":
        innov = g.standard_normal((t_total, 1)) * math.sqrt(1.0 - spec.rho**2)
        F = kernels.active().ar1_paths(innov, spec.rho)[:, 0] * spec.sigma_f
    else:
        F = g.standard_normal(t_total) * spec.sigma_f
    eps = g.standard_normal((t_total, loadings.size)) * spec.noise_sd
    Y = F[:, None] * loadings[None, :] + eps
    return Panel(_labels(spec.J), tuple(range(1, t_total + 1)), Y, t0)


def grouped_outcomes(groups: int, group_size: int, rho: float, noise_sd: float, t_total: int, g: np.random.Generator) -> np.ndarray:
    """Outcome matrix (t_total x (1 + groups*group_size)) of the grouped model.

    Donors are laid out group by group; the treated unit (column 0) belongs to
    group 0, so it shares its loading path with donors ``1..group_size``.
    """
    innov = g.standard_normal((t_total, groups))
    paths = kernels.active().ar1_paths(innov, rho)
    f = np.concatenate(([0], np.repeat(np.arange(groups), group_size)))
    eps = g.standard_normal((t_total, f.size))
    return paths[:, f] + noise_sd * eps


def _check_grouped(groups, group_size, rho, noise_sd, t_total, t0):
    if groups < 1 or group_size < 1:
        raise ConfigError("groups and group_size must be >= 1")
    if not abs(rho) < 1:
        raise ConfigError(f"rho must satisfy |rho| < 1 (got {rho})")
    if noise_sd < 0:
        raise ConfigError("noise_sd must be nonnegative")
    if not (2 <= t0 < t_total):
        raise ConfigError("need 2 <= t0 < t_total")


def simulate_grouped(groups: int, group_size: int, rho: float, noise_sd: float, t_total: int, t0: int, seed: int) -> Panel:
    """Zero-effect panel of the grouped AR(1) loading model.

    Each group's loading path is a stationary AR(1) with standard Gaussian
    innovations; unit outcomes add ``N(0, noise_sd^2)`` noise.
    """
    _check_grouped(groups, group_size, rho, noise_sd, t_total, t0)
    Y = grouped_outcomes(groups, group_size, rho, noise_sd, t_total, rng.stream(seed, rng.SIM))
    return Panel(_labels(groups * group_size), tuple(range(1, t_total + 1)), Y, t0)


SPARSE = {"groups": 20, "group_size": 1}
DENSE = {"groups": 4, "group_size": 5}


def true_representation(groups: int, group_size: int) -> np.ndarray:
    """Weights that reproduce the treated loading: uniform over its group's donors."""
    w = np.zeros(groups * group_size)
    w[:group_size] = 1.0 / group_size
    return w


# ---------------------------------------------------------------------------
# experiments


def predictor_error_sd(lambda1: float, lambdas: np.ndarray, sigma: float) -> float:
    """Exact sd of y'w - lambda1 F for a fresh period (unit noise)."""
    ss = float(np.asarray(lambdas) @ np.asarray(lambdas))
    return abs(lambda1) * sigma / math.sqrt(1.0 + sigma * sigma * ss)


def predictor_convergence_experiment(
    lambda_rule: Callable[[int], np.ndarray],
    j_grid: Sequence[int],
    sigma: float,
    reps: int,
    seed: int,
    lambda1: float = 1.0,
) -> list[dict]:
    """Monte-Carlo mean of |y_J' w - lambda1 F| on a fresh period, per J."""
    out = []
    for i, J in enumerate(j_grid):
        lam = np.asarray(lambda_rule(int(J)), dtype=float).reshape(-1)
        if lam.size != J:
            raise ConfigError(f"lambda_rule returned {lam.size} loadings for J={J}")
        g = rng.stream(seed, rng.MC, i)
        F = g.standard_normal(reps) * sigma
        if sigma > 0:
            w = conditional_weights(FactorSpec(lambda1, lam, sigma_f=sigma))
        else:
            w = np.zeros(J)
        err = np.empty(reps)
        block = max(1, 2_000_000 // J)
        for r0 in range(0, reps, block):
            r1 = min(reps, r0 + block)
            eps = g.standard_normal((r1 - r0, J))
            y = F[r0:r1, None] * lam[None, :] + eps
            err[r0:r1] = np.abs(y @ w - lambda1 * F[r0:r1])
        out.append(
            {
                "J": int(J),
                "mean_abs_error": float(err.mean()),
                "se": float(err.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan"),
                "ratio": float(np.abs(lam).sum() / (lam @ lam)) if np.any(lam) else float("inf"),
            }
        )
    return out


def empirical_risk(panel: Panel, w: np.ndarray, periods: slice | None = None) -> float:
    """Mean squared error of the treated outcome against donors @ w."""
    sl = panel.pre if periods is None else periods
    r = panel.treated[sl] - panel.donors[sl] @ np.asarray(w)
    return float(r @ r / r.size)
