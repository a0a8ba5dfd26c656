"""Frequentist synthetic control: simplex-constrained fit, pseudo-likelihood
MLE, treatment effects and Wald intervals."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import kernels
from .errors import ConfigError, InsufficientDataError, NumericalError, RankError, SolverError
from .panel import DesignPair, Panel


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 100_000
    tol: float = 1e-10
    polish: bool = True
    record_trace: bool = False


@dataclass(frozen=True)
class SimplexWeights:
    w: np.ndarray
    objective: float = float("nan")
    gap: float = float("nan")
    iterations: int = 0
    trace: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.array(self.w, dtype=float, copy=True).reshape(-1)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise NumericalError("weights are not on the simplex")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def to_dict(self) -> dict:
        return {"weights": self.w.tolist(), "objective": self.objective, "gap": self.gap, "iterations": self.iterations}


def _clamp(w: np.ndarray) -> np.ndarray:
    w = np.where((w < 0) & (w > -1e-12), 0.0, w)
    w = np.maximum(w, 0.0)
    return w / w.sum()


def _quadratic(design: DesignPair):
    X = design.x0 * np.sqrt(design.v)[:, None]
    y = design.x1 * np.sqrt(design.v)
    return X.T @ X, X.T @ y, float(y @ y)


def _loss(Q, p, c, w):
    return max(c - 2.0 * float(p @ w) + float(w @ Q @ w), 0.0)


def _fw_gap(Q, p, w):
    g = 2.0 * (Q @ w - p)
    return float(g @ w - g.min()), g


def _polish(Q, p, c, w, max_rounds=50):
    """Primal active-set refinement of a near-optimal simplex iterate.

    Solves the equality-constrained QP on the current support, steps back to
    feasibility when a coordinate would go negative, and adds the most
    violating coordinate while the KKT conditions fail.
    """
    J = w.size
    w = w.copy()
    active = w > 0
    for _ in range(max_rounds):
        for _ in range(J + 1):
            S = np.flatnonzero(active)
            n = S.size
            kkt = np.zeros((n + 1, n + 1))
            kkt[:n, :n] = 2.0 * Q[np.ix_(S, S)]
            kkt[:n, n] = 1.0
            kkt[n, :n] = 1.0
            rhs = np.concatenate((2.0 * p[S], [1.0]))
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            target = sol[:n]
            if np.all(target >= 0):
                w = np.zeros(J)
                w[S] = target
                break
            d = target - w[S]
            neg = d < 0
            steps = np.where(neg, -w[S] / np.where(neg, d, -1.0), np.inf)
            k = int(np.argmin(steps))
            t = float(np.clip(steps[k], 0.0, 1.0))
            w_new = np.zeros(J)
            w_new[S] = w[S] + t * d
            w_new[S[k]] = 0.0
            w = np.maximum(w_new, 0.0)
            active = w > 0
        g = 2.0 * (Q @ w - p)
        S = np.flatnonzero(active)
        mult = g[S].mean() if S.size else 0.0
        viol = np.where(active, np.inf, g - mult)
        j = int(np.argmin(viol))
        if viol[j] >= -1e-12 * (1.0 + abs(mult)):
            break
        active[j] = True
    return _clamp(w) if w.sum() > 0 else None


def solve_sc(design: DesignPair, opts: SolverOptions | None = None) -> SimplexWeights:
    """Minimise ``sum_h v_h (x1_h - x0_h w)^2`` over the simplex.

    Pairwise Frank-Wolfe with exact line search from the best vertex, stopped
    on a duality gap of ``tol * (1 + initial objective)``, then an active-set
    polish on the support.  ``objective`` is the V-weighted squared loss.
    """
    opts = opts or SolverOptions()
    Q, p, c = _quadratic(design)
    J = p.size
    vertex_loss = np.diag(Q) - 2.0 * p + c
    w0 = np.zeros(J)
    w0[int(np.argmin(vertex_loss))] = 1.0
    loss0 = float(vertex_loss.min())
    tol = opts.tol * (1.0 + max(loss0, 0.0))
    trace = np.empty(opts.max_iter + 1 if opts.record_trace else 0)
    w, it, gap = kernels.active().frank_wolfe(Q, p, c, w0, tol, opts.max_iter, trace)
    w = _clamp(np.asarray(w))
    best = _loss(Q, p, c, w)
    if opts.polish:
        wp = _polish(Q, p, c, w)
        if wp is not None:
            lp = _loss(Q, p, c, wp)
            if lp <= best:
                w, best = wp, lp
    gap, g = _fw_gap(Q, p, w)
    if gap > tol:
        raise SolverError(
            f"simplex solver stopped after {it} iterations with gap {gap:.3e} > {tol:.3e}",
            best_iterate=w,
            grad_norm=float(np.linalg.norm(g)),
        )
    r = design.x1 - design.x0 @ w
    objective = float(np.sum(design.v * r * r))
    return SimplexWeights(w, objective=objective, gap=gap, iterations=int(it), trace=trace[: it + 1] if opts.record_trace else None)


# ---------------------------------------------------------------------------
# pseudo-likelihood MLE


@dataclass(frozen=True)
class MleFit:
    """Unconstrained least-squares weights with their profile variance.

    ``vcov`` estimates the asymptotic covariance of ``sqrt(t0) (w_hat - w)``,
    i.e. ``sigma_sq_hat * D^-1`` with ``D = y_J'y_J / t0``.
    """

    w_hat: np.ndarray
    sigma_sq_hat: float
    loglik: float
    vcov: np.ndarray
    t0: int

    def to_dict(self) -> dict:
        return {
            "weights": self.w_hat.tolist(),
            "sigma_sq_hat": self.sigma_sq_hat,
            "loglik": self.loglik,
            "vcov": self.vcov.tolist(),
            "t0": self.t0,
        }


def pseudo_loglik(panel: Panel, w: np.ndarray, sigma_sq: float) -> float:
    r = panel.treated[panel.pre] - panel.donors[panel.pre] @ np.asarray(w)
    return -0.5 * math.log(2.0 * math.pi * sigma_sq) - float(r @ r) / (2.0 * sigma_sq * r.size)


def fit_mle(panel: Panel) -> MleFit:
    Y = panel.donors[panel.pre]
    y = panel.treated[panel.pre]
    t0, J = Y.shape
    if t0 <= J:
        raise InsufficientDataError(f"MLE needs more pre-periods than donors (t0={t0}, J={J})")
    Qm, R = np.linalg.qr(Y)
    diag = np.abs(np.diag(R))
    if diag.min() <= max(t0, J) * np.finfo(float).eps * diag.max():
        raise RankError("donor outcome matrix is rank deficient")
    w = np.linalg.solve(R, Qm.T @ y)
    r = y - Y @ w
    s2 = float(r @ r) / t0
    Rinv = np.linalg.solve(R, np.eye(J))
    D_inv = t0 * (Rinv @ Rinv.T)
    vcov = s2 * D_inv
    vcov = 0.5 * (vcov + vcov.T)
    ll = -0.5 * math.log(2.0 * math.pi * s2) - 0.5 if s2 > 0 else math.inf
    return MleFit(w, s2, ll, vcov, t0)


def wald_interval(fit: MleFit, contrast, level: float = 0.95) -> tuple[float, float]:
    """Normal interval for ``contrast @ w`` with scale ``sqrt(a' vcov a / t0)``."""
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    a = np.asarray(contrast, dtype=float).reshape(-1)
    if not np.all(np.isfinite(a)) or a.size != fit.w_hat.size:
        raise ConfigError("contrast must be a finite vector of length J")
    evals = np.linalg.eigvalsh(fit.vcov)
    if evals.min() < -1e-10 * max(abs(evals.max()), 1.0):
        raise NumericalError("vcov is not positive semi-definite")
    est = float(a @ fit.w_hat)
    se = math.sqrt(max(float(a @ fit.vcov @ a), 0.0) / fit.t0)
    z = float(norm.ppf(0.5 + level / 2.0))
    return est - z * se, est + z * se


# ---------------------------------------------------------------------------
# treatment effects


@dataclass(frozen=True)
class EffectSeries:
    times: tuple
    taus: np.ndarray
    counterfactual: np.ndarray
    observed: np.ndarray

    @property
    def mean_effect(self) -> float:
        return float(self.taus.mean())

    def to_dict(self) -> dict:
        return {
            "times": list(self.times),
            "taus": self.taus.tolist(),
            "counterfactual": self.counterfactual.tolist(),
            "mean_effect": self.mean_effect,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["time", "observed", "counterfactual", "tau"])
            for t, o, c, d in zip(self.times, self.observed, self.counterfactual, self.taus):
                wr.writerow([t, repr(float(o)), repr(float(c)), repr(float(d))])


def effects(panel: Panel, w) -> EffectSeries:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != panel.J:
        raise ConfigError(f"weights have length {w.size}, panel has J={panel.J}")
    obs = panel.treated[panel.post]
    cf = panel.donors[panel.post] @ w
    return EffectSeries(panel.times[panel.post], obs - cf, cf, obs.copy())


def results_json(weights: SimplexWeights, eff: EffectSeries, **extra) -> str:
    return json.dumps({**weights.to_dict(), "effects": eff.to_dict(), **extra}, indent=2)
