"""Bayesian synthetic control with simplex weights.

Model (per predictor row k, or per pre-period when no design is given)::

    x1_k | w, sigma, gamma ~ N(x0_k' w, sigma^2 / gamma_k^2)
    w ~ Dirichlet(1),  sigma ~ half-normal(sigma_prior_scale)
    gamma ~ Dirichlet(gamma_prior)          (only with predictor weights)

Without predictor weights every row has variance ``sigma^2``.  Sampling is
HMC in unconstrained coordinates (stick-breaking for simplex parameters, log
for sigma); see :mod:`synthbayes.kernels` for the chain itself.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels, rng
from .errors import ConfigError, ConvergenceWarning, NumericalError, SamplerWarning
from .panel import DesignPair, Panel


@dataclass(frozen=True)
class BayesModelSpec:
    use_predictor_weights: bool = False
    gamma_prior: tuple | None = None
    sigma_prior_scale: float = 1.0
    include_predictive_noise: bool = True
    # point-mass prior on sigma; a test hook for conjugate checks
    fixed_sigma: float | None = None

    def __post_init__(self):
        if not self.sigma_prior_scale > 0:
            raise ConfigError("sigma_prior_scale must be positive")
        if self.gamma_prior is not None and np.any(np.asarray(self.gamma_prior) <= 0):
            raise ConfigError("gamma_prior entries must be positive")
        if self.fixed_sigma is not None and not self.fixed_sigma > 0:
            raise ConfigError("fixed_sigma must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 16
    threads: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.draws < 1 or self.warmup < 0:
            raise ConfigError("chains and draws must be >= 1, warmup >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.max_leapfrog < 1:
            raise ConfigError("max_leapfrog must be >= 1")


@dataclass(frozen=True)
class ModelData:
    """Likelihood inputs packed for the kernels."""

    J: int
    K: int
    G: np.ndarray
    b: np.ndarray
    yy: float
    n_rows: float
    X: np.ndarray
    y: np.ndarray
    conc: np.ndarray

    @classmethod
    def empty(cls, J: int) -> "ModelData":
        return cls.from_rows(np.empty((0, J)), np.empty(0))

    @classmethod
    def from_rows(cls, X: np.ndarray, y: np.ndarray) -> "ModelData":
        X = np.ascontiguousarray(X, dtype=float)
        y = np.ascontiguousarray(y, dtype=float)
        return cls(X.shape[1], 0, np.ascontiguousarray(X.T @ X), X.T @ y, float(y @ y), float(X.shape[0]),
                   np.zeros((1, 1)), np.zeros(1), np.zeros(0))

    @classmethod
    def with_gamma(cls, X: np.ndarray, y: np.ndarray, conc: np.ndarray) -> "ModelData":
        X = np.ascontiguousarray(X, dtype=float)
        K, J = X.shape
        if K < 1:
            raise ConfigError("predictor weights need at least one predictor row")
        return cls(J, K, np.zeros((1, 1)), np.zeros(1), 0.0, 0.0, X, np.ascontiguousarray(y, dtype=float),
                   np.ascontiguousarray(conc, dtype=float))

    def dim(self, spec: BayesModelSpec) -> int:
        return (self.J - 1) + max(self.K - 1, 0) + (0 if spec.fixed_sigma else 1)

    def args(self, spec: BayesModelSpec) -> tuple:
        fs = float(spec.fixed_sigma) if spec.fixed_sigma else -1.0
        return (self.J, self.K, fs, float(spec.sigma_prior_scale), self.G, self.b, self.yy, self.n_rows, self.X, self.y, self.conc)


def model_data(spec: BayesModelSpec, panel: Panel | None = None, design: DesignPair | None = None) -> ModelData:
    if design is not None:
        if spec.use_predictor_weights:
            conc = np.ones(design.K) if spec.gamma_prior is None else np.asarray(spec.gamma_prior, dtype=float)
            if conc.size != design.K:
                raise ConfigError(f"gamma_prior has {conc.size} entries for {design.K} predictors")
            return ModelData.with_gamma(design.x0, design.x1, conc)
        return ModelData.from_rows(design.x0, design.x1)
    if panel is None:
        raise ConfigError("need a panel or a design")
    if spec.use_predictor_weights:
        raise ConfigError("predictor weights require a design")
    return ModelData.from_rows(panel.donors[panel.pre], panel.treated[panel.pre])


def log_posterior(spec: BayesModelSpec, data: ModelData, theta) -> tuple[float, np.ndarray]:
    """Log joint density (with transform Jacobians) and its gradient at ``theta``."""
    theta = np.ascontiguousarray(theta, dtype=float)
    if theta.shape != (data.dim(spec),):
        raise ConfigError(f"theta must have length {data.dim(spec)}")
    if not np.all(np.isfinite(theta)):
        raise NumericalError("theta contains non-finite values")
    lp, g = kernels.active().logp_grad(theta, *data.args(spec))
    return float(lp), np.asarray(g)


def stick_breaking(u) -> np.ndarray:
    """Map unconstrained ``u`` (n-1,) to the simplex (n,)."""
    u = np.asarray(u, dtype=float).reshape(-1)
    x, _, _, _ = kernels._stick_forward_vec(u, u.size + 1)
    return x


def constrain(spec: BayesModelSpec, data: ModelData, theta: np.ndarray):
    """Return ``(w, sigma, gamma)`` for one unconstrained vector."""
    w = stick_breaking(theta[: data.J - 1])
    off = data.J - 1
    gamma = None
    if data.K > 0:
        gamma = stick_breaking(theta[off : off + data.K - 1])
        off += data.K - 1
    sigma = float(spec.fixed_sigma) if spec.fixed_sigma else math.exp(theta[off])
    return w, sigma, gamma


# ---------------------------------------------------------------------------
# diagnostics


def split_rhat(x: np.ndarray) -> float:
    """Split potential scale reduction for draws shaped (chains, draws)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate((x[:, :n], x[:, -n:]), axis=0)
    var_w = halves.var(axis=1, ddof=1).mean()
    var_b = n * halves.mean(axis=1).var(ddof=1)
    if var_w <= 0:
        return 1.0 if var_b <= 0 else float("inf")
    return float(math.sqrt(((n - 1) / n * var_w + var_b / n) / var_w))


def effective_sample_size(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    if n < 4:
        return float("nan")
    xc = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    return float(m * n / max(tau, 1.0 / math.log10(m * n + 10)))


# ---------------------------------------------------------------------------
# sampling


def warmup_phases(n_warmup: int) -> np.ndarray:
    """Per-iteration warmup phase: 0 step size only, 1 accumulate metric
    statistics, 2 accumulate and update the metric (end of a slow window)."""
    phase = np.zeros(n_warmup, dtype=np.int8)
    if n_warmup < 20:
        return phase
    init, term, base = 75, 50, 25
    if init + term + base > n_warmup:
        init, term = int(0.15 * n_warmup), int(0.1 * n_warmup)
        base = n_warmup - init - term
    end_slow = n_warmup - term
    start, size = init, base
    while start < end_slow:
        stop = start + size
        if stop + 2 * size > end_slow:
            stop = end_slow
        phase[start:stop] = 1
        phase[stop - 1] = 2
        start, size = stop, 2 * size
    return phase


@dataclass
class ChainResult:
    theta: np.ndarray
    lp: np.ndarray
    accept: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray


def _run_one(spec, data, cfg, seed, chain, backend):
    D = data.dim(spec)
    g = rng.stream(seed, rng.CHAIN, chain)
    n_iter = cfg.warmup + cfg.draws
    theta0 = g.uniform(-2.0, 2.0, D)
    momenta = g.standard_normal((n_iter, D))
    uniforms = g.uniform(size=n_iter)
    steps = g.integers(1, cfg.max_leapfrog + 1, size=n_iter).astype(np.int64)
    phase = warmup_phases(cfg.warmup)
    out = backend.run_chain(theta0, cfg.warmup, cfg.draws, cfg.target_accept, momenta, uniforms, steps, phase, data.args(spec))
    draws, lp, accept, div, eps, inv_metric = out
    return ChainResult(np.asarray(draws), np.asarray(lp), np.asarray(accept), np.asarray(div), float(eps), np.asarray(inv_metric))


@dataclass
class RawPosterior:
    """Constrained draws of one sampling run, chain-major."""

    w: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray | None
    chain: np.ndarray
    accept_rate: float
    divergences: int
    n_post: int
    step_sizes: list
    diagnostics: dict
    warnings: list


def sample_parameters(spec: BayesModelSpec, data: ModelData, cfg: SamplerConfig, seed: int, backend=None) -> RawPosterior:
    """Run ``cfg.chains`` HMC chains and return constrained draws."""
    backend = backend or kernels.active()
    if data.dim(spec) == 0:
        raise ConfigError("model has no free parameters (J=1 with fixed sigma)")
    if cfg.threads > 1 and cfg.chains > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.threads, cfg.chains)) as ex:
            results = list(ex.map(lambda c: _run_one(spec, data, cfg, seed, c, backend), range(cfg.chains)))
    else:
        results = [_run_one(spec, data, cfg, seed, c, backend) for c in range(cfg.chains)]

    M = cfg.chains * cfg.draws
    w = np.empty((M, data.J))
    sigma = np.empty(M)
    gamma = np.empty((M, data.K)) if data.K > 0 else None
    for c, res in enumerate(results):
        for i, th in enumerate(res.theta):
            m = c * cfg.draws + i
            w[m], sigma[m], gm = constrain(spec, data, th)
            if gamma is not None:
                gamma[m] = gm
    chain = np.repeat(np.arange(cfg.chains), cfg.draws)

    post_acc = np.concatenate([r.accept[cfg.warmup :] for r in results])
    post_div = int(sum(r.divergent[cfg.warmup :].sum() for r in results))
    diagnostics = {}
    named = [(f"w[{j}]", w[:, j]) for j in range(data.J)]
    if not spec.fixed_sigma:
        named.append(("sigma", sigma))
    if gamma is not None:
        named += [(f"gamma[{k}]", gamma[:, k]) for k in range(data.K)]
    for name, col in named:
        by_chain = col.reshape(cfg.chains, cfg.draws)
        diagnostics[name] = {"rhat": split_rhat(by_chain), "ess": effective_sample_size(by_chain)}

    msgs = []
    if post_div > 0.1 * M:
        msg = f"{post_div} of {M} post-warmup transitions diverged"
        warnings.warn(msg, SamplerWarning, stacklevel=3)
        msgs.append({"type": "SamplerWarning", "message": msg})
    rhats = [d["rhat"] for d in diagnostics.values() if np.isfinite(d["rhat"])]
    if cfg.chains > 1 and rhats and max(rhats) > 1.05:
        msg = f"max R-hat {max(rhats):.3f} exceeds 1.05"
        warnings.warn(msg, ConvergenceWarning, stacklevel=3)
        msgs.append({"type": "ConvergenceWarning", "message": msg})
    return RawPosterior(w, sigma, gamma, chain, float(post_acc.mean()), post_div, M,
                        [r.step_size for r in results], diagnostics, msgs)


@dataclass(frozen=True)
class PosteriorDraws:
    w_draws: np.ndarray
    sigma_draws: np.ndarray
    gamma_draws: np.ndarray | None
    counterfactual_draws: np.ndarray
    tau_draws: np.ndarray
    times: tuple
    observed: np.ndarray
    chain: np.ndarray
    diagnostics: dict
    accept_rate: float
    divergences: int = 0
    step_sizes: tuple = ()
    warnings: tuple = field(default_factory=tuple)

    @property
    def mean_tau_draws(self) -> np.ndarray:
        return self.tau_draws.mean(axis=1)

    @property
    def n_draws(self) -> int:
        return self.w_draws.shape[0]

    def to_csv(self, path) -> None:
        J = self.w_draws.shape[1]
        K = 0 if self.gamma_draws is None else self.gamma_draws.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["chain"] + [f"w{j + 1}" for j in range(J)] + ["sigma"] + [f"gamma{k + 1}" for k in range(K)] + ["tau_mean"])
            tau = self.mean_tau_draws
            for m in range(self.n_draws):
                row = [int(self.chain[m])] + [repr(float(x)) for x in self.w_draws[m]] + [repr(float(self.sigma_draws[m]))]
                if K:
                    row += [repr(float(x)) for x in self.gamma_draws[m]]
                wr.writerow(row + [repr(float(tau[m]))])


def sample(spec: BayesModelSpec, panel: Panel, design: DesignPair | None = None, cfg: SamplerConfig | None = None,
           seed: int = 0, backend=None) -> PosteriorDraws:
    """Sample the posterior and the implied post-period treatment effects.

    The counterfactual for draw m is ``y_Jt' w^m``, plus ``sigma^m`` times a
    standard normal when ``spec.include_predictive_noise``.
    """
    cfg = cfg or SamplerConfig()
    if design is not None and design.J != panel.J:
        raise ConfigError("design and panel disagree on the number of donors")
    data = model_data(spec, panel, design)
    raw = sample_parameters(spec, data, cfg, seed, backend)
    Ypost = panel.donors[panel.post]
    obs = panel.treated[panel.post]
    cf = raw.w @ Ypost.T
    if spec.include_predictive_noise:
        noise = np.vstack([
            rng.stream(seed, rng.CHAIN, c, 1).standard_normal((cfg.draws, Ypost.shape[0])) for c in range(cfg.chains)
        ])
        cf = cf + raw.sigma[:, None] * noise
    tau = obs[None, :] - cf
    return PosteriorDraws(raw.w, raw.sigma, raw.gamma, cf, tau, panel.times[panel.post], obs.copy(), raw.chain,
                          raw.diagnostics, raw.accept_rate, raw.divergences, tuple(raw.step_sizes), tuple(raw.warnings))


# ---------------------------------------------------------------------------
# posterior summaries


def _interval(x, level, axis=0):
    a = (1.0 - level) / 2.0
    return np.quantile(x, a, axis=axis), np.quantile(x, 1.0 - a, axis=axis)


def summarize(draws: PosteriorDraws, levels=(0.75, 0.95)) -> dict:
    """Equal-tailed intervals for the mean post-period effect and each period."""
    levels = [float(lv) for lv in levels]
    if any(not 0.0 < lv < 1.0 for lv in levels):
        raise ConfigError("levels must lie in (0, 1)")
    tau_bar = draws.mean_tau_draws
    out = {
        "mean_effect": float(tau_bar.mean()),
        "intervals": {},
        "per_period": {"times": list(draws.times), "mean": draws.tau_draws.mean(axis=0).tolist(), "bands": {}},
    }
    for lv in levels:
        lo, hi = _interval(tau_bar, lv)
        out["intervals"][str(lv)] = [float(lo), float(hi)]
        plo, phi = _interval(draws.tau_draws, lv, axis=0)
        out["per_period"]["bands"][str(lv)] = {"lo": plo.tolist(), "hi": phi.tolist()}
    return out


def weight_marginals_and_correlations(draws: PosteriorDraws) -> dict:
    """Per-donor marginal summaries and the Pearson correlation of weight draws.

    Constant weight columns get correlation 0 off the diagonal and are listed
    under ``zero_variance``.
    """
    W = np.asarray(draws.w_draws, dtype=float)
    M, J = W.shape
    if M < 2:
        raise ConfigError("need at least two draws")
    sd = W.std(axis=0, ddof=1)
    flat = sd <= 0.0
    Wc = W - W.mean(axis=0)
    safe = np.where(flat, 1.0, sd)
    corr = (Wc.T @ Wc) / (M - 1) / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    q = np.quantile(W, [0.05, 0.5, 0.95], axis=0)
    marginals = [
        {"mean": float(W[:, j].mean()), "sd": float(sd[j]), "q05": float(q[0, j]), "median": float(q[1, j]), "q95": float(q[2, j])}
        for j in range(J)
    ]
    return {"marginals": marginals, "correlation": corr, "zero_variance": np.flatnonzero(flat).tolist()}


@dataclass(frozen=True)
class BiasBoundSummary:
    per_draw_bound: np.ndarray
    relative_bound: np.ndarray
    infinite_relative: np.ndarray

    def quantiles(self, qs=(0.05, 0.5, 0.95)) -> dict:
        rel = self.relative_bound[np.isfinite(self.relative_bound)]
        return {
            "bound": {str(q): float(np.quantile(self.per_draw_bound, q)) for q in qs},
            "relative": {str(q): (float(np.quantile(rel, q)) if rel.size else float("inf")) for q in qs},
            "n_infinite_relative": int(self.infinite_relative.sum()),
        }


def bias_bound(draws: PosteriorDraws, panel: Panel) -> BiasBoundSummary:
    """Pre-period mean absolute fit deviation per draw, absolute and relative to
    that draw's mean post-period effect."""
    if panel.t0 < 1:
        raise ConfigError("need at least one pre-period")
    resid = panel.treated[panel.pre][None, :] - draws.w_draws @ panel.donors[panel.pre].T
    bound = np.abs(resid).mean(axis=1)
    denom = np.abs(draws.mean_tau_draws)
    zero = denom == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(zero, np.inf, bound / np.where(zero, 1.0, denom))
    return BiasBoundSummary(bound, rel, zero)


def summary_json(draws: PosteriorDraws, panel: Panel, levels=(0.75, 0.95)) -> dict:
    s = summarize(draws, levels)
    wc = weight_marginals_and_correlations(draws)
    return {
        **s,
        "weights": {"posterior_mean": draws.w_draws.mean(axis=0).tolist(), "marginals": wc["marginals"],
                    "correlation": wc["correlation"].tolist()},
        "sigma_mean": float(draws.sigma_draws.mean()),
        "diagnostics": draws.diagnostics,
        "accept_rate": draws.accept_rate,
        "divergences": draws.divergences,
        "bias_bound": bias_bound(draws, panel).quantiles(),
        "warnings": list(draws.warnings),
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=float)
