"""Frequentist-vs-Bayesian convergence experiments on the grouped factor model.

For each pre-period length ``t0`` the harness

1. simulates ``freq_reps`` independent zero-effect panels, fits the simplex
   synthetic control on the outcomes-only design and records the mean
   post-period effect of each;
2. simulates one further panel, samples the Bayesian model on it and keeps
   the posterior draws of the mean post-period effect;
3. compares the two with Gaussian kernel densities and their total-variation
   distance.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels, rng
from .bayes import BayesModelSpec, PosteriorDraws, SamplerConfig, sample
from .errors import ConfigError, DegenerateError, EstimationError, ExperimentError
from .factor_lab import DENSE, SPARSE, grouped_outcomes, true_representation
from .freq import solve_sc
from .panel import DesignPair, Panel

log = logging.getLogger(__name__)

DESIGNS = {"sparse": SPARSE, "dense": DENSE}


@dataclass(frozen=True)
class BvmConfig:
    design: str = "sparse"
    t0_grid: tuple = (30, 100, 500, 1000)
    post_periods: int = 10
    noise_sd: float = 0.25
    rho: float = 0.5
    freq_reps: int = 2000
    bayes_cfg: SamplerConfig = field(default_factory=SamplerConfig)
    # posterior-predictive effect draws; False gives the mean-counterfactual
    # mode whose spread vanishes as t0 grows
    predictive_noise: bool = True
    grid_points: int = 512
    seed: int = 0
    threads: int = 1
    max_failure_rate: float = 0.01
    # multiplies every simulated outcome; the sigma prior scale follows so the
    # Bayesian model is equivariant too
    outcome_scale: float = 1.0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {sorted(DESIGNS)}")
        grid = tuple(int(t) for t in self.t0_grid)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("t0_grid must be non-empty and strictly ascending")
        if grid[0] < 2:
            raise ConfigError("t0 values must be >= 2")
        object.__setattr__(self, "t0_grid", grid)
        if self.freq_reps < 100:
            raise ConfigError("freq_reps must be >= 100")
        if self.post_periods < 1:
            raise ConfigError("post_periods must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")
        if not abs(self.rho) < 1:
            raise ConfigError("rho must satisfy |rho| < 1")
        if not self.outcome_scale > 0:
            raise ConfigError("outcome_scale must be positive")

    @property
    def groups(self) -> int:
        return DESIGNS[self.design]["groups"]

    @property
    def group_size(self) -> int:
        return DESIGNS[self.design]["group_size"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t0_grid"] = list(self.t0_grid)
        return d


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float

    def at(self, x) -> np.ndarray:
        """Linear interpolation, zero outside the grid."""
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(x.std(ddof=1))
    q75, q25 = np.quantile(x, [0.75, 0.25])
    iqr = float(q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


MAX_GRID_POINTS = 1 << 14


def kde(samples, grid_points: int = 512) -> DensityEstimate:
    """Gaussian KDE with Silverman's bandwidth on ``[min - 3h, max + 3h]``.

    ``grid_points`` is a minimum: the grid is refined until its spacing is at
    most ``h/2`` (up to ``MAX_GRID_POINTS``) so the trapezoid integral stays
    close to one even for clustered samples with a small bandwidth.
    """
    x = np.ascontiguousarray(samples, dtype=float).reshape(-1)
    if x.size < 10:
        raise DegenerateError("kde needs at least 10 samples")
    if not np.all(np.isfinite(x)):
        raise DegenerateError("samples contain non-finite values")
    if not x.std() > 0:
        raise DegenerateError("samples have zero variance")
    h = silverman_bandwidth(x)
    lo, hi = x.min() - 3.0 * h, x.max() + 3.0 * h
    n = max(int(grid_points), min(MAX_GRID_POINTS, int(math.ceil(2.0 * (hi - lo) / h)) + 1))
    grid = np.linspace(lo, hi, n)
    return DensityEstimate(grid, np.asarray(kernels.active().kde_eval(x, grid, h)), h)


def common_grid(f: DensityEstimate, g: DensityEstimate) -> np.ndarray:
    u = np.union1d(f.grid, g.grid)
    return np.union1d(u, 0.5 * (u[1:] + u[:-1]))


def tv_distance(f: DensityEstimate, g: DensityEstimate) -> float:
    """Half the integrated absolute difference on the refined common grid."""
    x = common_grid(f, g)
    tv = 0.5 * float(np.trapezoid(np.abs(f.at(x) - g.at(x)), x))
    return min(max(tv, 0.0), 1.0)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class T0Report:
    t0: int
    freq_tau: np.ndarray
    bayes_tau: np.ndarray
    freq_density: DensityEstimate
    bayes_density: DensityEstimate
    tv: float
    failures: int
    posterior: PosteriorDraws
    true_w: np.ndarray

    @property
    def posterior_mean_w(self) -> np.ndarray:
        return self.posterior.w_draws.mean(axis=0)

    @property
    def recovery_distance(self) -> float:
        return float(np.linalg.norm(self.posterior_mean_w - self.true_w))


@dataclass
class BvmReport:
    config: BvmConfig
    per_t0: list

    @property
    def tv(self) -> list:
        return [r.tv for r in self.per_t0]

    @property
    def recovery(self) -> list:
        return [r.recovery_distance for r in self.per_t0]

    @property
    def failures(self) -> int:
        return sum(r.failures for r in self.per_t0)

    def metrics_rows(self) -> list:
        rows = []
        for r in self.per_t0:
            pm = r.posterior_mean_w
            rows.append({
                "t0": r.t0,
                "tv": r.tv,
                "recovery_distance": r.recovery_distance,
                "posterior_mean_w_lead": float(pm[0]),
                "freq_mean": float(r.freq_tau.mean()),
                "freq_sd": float(r.freq_tau.std(ddof=1)),
                "bayes_mean": float(r.bayes_tau.mean()),
                "bayes_sd": float(r.bayes_tau.std(ddof=1)),
                "failures": r.failures,
            })
        return rows

    def write(self, out_dir) -> list:
        """Write densities.csv, metrics.csv and weights.csv; return the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "densities.csv", out / "metrics.csv", out / "weights.csv"]
        with open(paths[0], "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t0", "x", "freq_value", "bayes_value"])
            for r in self.per_t0:
                x = common_grid(r.freq_density, r.bayes_density)
                for xi, fv, bv in zip(x, r.freq_density.at(x), r.bayes_density.at(x)):
                    wr.writerow([r.t0, repr(float(xi)), repr(float(fv)), repr(float(bv))])
        rows = self.metrics_rows()
        with open(paths[1], "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            wr.writeheader()
            for row in rows:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        with open(paths[2], "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            J = self.per_t0[0].true_w.size
            wr.writerow(["t0", "donor", "x", "density", "posterior_mean", "true_weight"])
            for r in self.per_t0:
                for j in range(J):
                    col = r.posterior.w_draws[:, j]
                    pm = repr(float(col.mean()))
                    try:
                        d = kde(col, 128)
                        pts = zip(d.grid, d.values)
                    except DegenerateError:
                        pts = [(col[0], float("inf"))]
                    for xi, yi in pts:
                        wr.writerow([r.t0, j + 1, repr(float(xi)), repr(float(yi)), pm, repr(float(r.true_w[j]))])
        return paths


def _freq_rep(cfg: BvmConfig, t_idx: int, t0: int, rep: int) -> float:
    g = rng.stream(cfg.seed, rng.FREQ, t_idx, rep)
    T = t0 + cfg.post_periods
    Y = cfg.outcome_scale * grouped_outcomes(cfg.groups, cfg.group_size, cfg.rho, cfg.noise_sd, T, g)
    X0, x1 = Y[:t0, 1:], Y[:t0, 0]
    design = DesignPair(x1, X0, tuple(range(t0)), np.full(t0, 1.0 / t0))
    w = solve_sc(design).w
    return float(np.mean(Y[t0:, 0] - Y[t0:, 1:] @ w))


def frequentist_effects(cfg: BvmConfig, t_idx: int, t0: int) -> tuple[np.ndarray, int]:
    """Mean post-period effect for each replication; failed reps are NaN."""

    def run(rep):
        try:
            return _freq_rep(cfg, t_idx, t0, rep)
        except EstimationError as exc:
            log.debug("rep %d at t0=%d failed: %s", rep, t0, exc)
            return float("nan")

    reps = range(cfg.freq_reps)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            taus = np.fromiter(ex.map(run, reps, chunksize=64), dtype=float, count=cfg.freq_reps)
    else:
        taus = np.fromiter(map(run, reps), dtype=float, count=cfg.freq_reps)
    return taus, int(np.isnan(taus).sum())


def bayes_panel(cfg: BvmConfig, t_idx: int, t0: int) -> Panel:
    g = rng.stream(cfg.seed, rng.BAYES, t_idx)
    T = t0 + cfg.post_periods
    Y = cfg.outcome_scale * grouped_outcomes(cfg.groups, cfg.group_size, cfg.rho, cfg.noise_sd, T, g)
    J = Y.shape[1] - 1
    return Panel(("treated",) + tuple(f"d{j:02d}" for j in range(1, J + 1)), tuple(range(1, T + 1)), Y, t0)


def bayes_posterior(cfg: BvmConfig, t_idx: int, t0: int) -> PosteriorDraws:
    spec = BayesModelSpec(include_predictive_noise=cfg.predictive_noise, sigma_prior_scale=cfg.outcome_scale)
    scfg = replace(cfg.bayes_cfg, threads=max(cfg.threads, cfg.bayes_cfg.threads))
    return sample(spec, bayes_panel(cfg, t_idx, t0), None, scfg, seed=rng_seed(cfg.seed, t_idx))


def rng_seed(seed: int, t_idx: int) -> int:
    """Sampler seed for the Bayesian fit at grid index ``t_idx``."""
    return int(rng.stream(seed, rng.BAYES, t_idx, 1).integers(0, 2**62))


def run_bvm(cfg: BvmConfig) -> BvmReport:
    reports = []
    truth = true_representation(cfg.groups, cfg.group_size)
    for i, t0 in enumerate(cfg.t0_grid):
        taus, failures = frequentist_effects(cfg, i, t0)
        if failures > cfg.max_failure_rate * cfg.freq_reps:
            raise ExperimentError(f"{failures} of {cfg.freq_reps} replications failed at t0={t0}")
        ok = taus[np.isfinite(taus)]
        post = bayes_posterior(cfg, i, t0)
        btau = post.mean_tau_draws
        fd, bd = kde(ok, cfg.grid_points), kde(btau, cfg.grid_points)
        tv = tv_distance(fd, bd)
        log.info("t0=%d tv=%.4f failures=%d", t0, tv, failures)
        reports.append(T0Report(t0, ok, btau, fd, bd, tv, failures, post, truth))
    return BvmReport(cfg, reports)


@dataclass
class WeightRecovery:
    t0_grid: tuple
    posterior_mean: list
    distance: list
    true_w: np.ndarray
    densities: list

    @property
    def monotone_decrease(self) -> bool:
        return all(b < a for a, b in zip(self.distance, self.distance[1:]))


def weight_recovery_from(report: BvmReport) -> WeightRecovery:
    dens = []
    for r in report.per_t0:
        per = []
        for j in range(r.true_w.size):
            try:
                per.append(kde(r.posterior.w_draws[:, j], 128))
            except DegenerateError:
                per.append(None)
        dens.append(per)
    return WeightRecovery(
        report.config.t0_grid,
        [r.posterior_mean_w for r in report.per_t0],
        [r.recovery_distance for r in report.per_t0],
        report.per_t0[0].true_w,
        dens,
    )


def weight_recovery_report(cfg: BvmConfig) -> WeightRecovery:
    """Posterior weight densities and distance of the posterior mean to the
    true representation, per ``t0`` (Bayesian fits only)."""
    truth = true_representation(cfg.groups, cfg.group_size)
    per = []
    for i, t0 in enumerate(cfg.t0_grid):
        post = bayes_posterior(cfg, i, t0)
        empty = DensityEstimate(np.zeros(2), np.zeros(2), 0.0)
        per.append(T0Report(t0, np.empty(0), post.mean_tau_draws, empty, empty, float("nan"), 0, post, truth))
    return weight_recovery_from(BvmReport(cfg, per))


def manifest_dict(report: BvmReport) -> dict:
    return {"config": report.config.to_dict(), "failures": [r.failures for r in report.per_t0], "tv": report.tv,
            "recovery_distance": report.recovery}


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))

