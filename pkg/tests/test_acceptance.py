"""Acceptance gate: criteria 1-10, each at its stated tolerance.

Every criterion prints one ``PASS``/``FAIL`` line (visible under ``pytest -v``
and when run as a script) and then asserts.  Seeds are fixed here, before any
result is looked at, and are not tuned.

    python -m pytest tests/test_acceptance.py -v
    python tests/test_acceptance.py
"""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from synthbayes.bayes import (
    BayesModelSpec,
    ModelData,
    SamplerConfig,
    effective_sample_size,
    log_posterior,
    sample,
    sample_parameters,
    summarize,
)
from synthbayes.bvm import BvmConfig, run_bvm, weight_recovery_from
from synthbayes.factor_lab import (
    SPARSE,
    FactorSpec,
    check_characterization,
    conditional_variance,
    conditional_weights,
    predictor_convergence_experiment,
    simulate_grouped,
    simulate_single_factor,
)
from synthbayes.freq import fit_mle, solve_sc, wald_interval
from synthbayes.panel import DesignPair

SEED = 0


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float
    budget: float
    checks: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:2d} [{tag}] {self.title}: {self.detail} ({self.seconds:.1f}s, budget {self.budget:.0f}s)"


def _finish(number, title, checks: dict, detail: str, t_start: float, budget: float) -> Outcome:
    seconds = time.perf_counter() - t_start
    checks = dict(checks, runtime=seconds < budget)
    failed = [k for k, v in checks.items() if not v]
    if failed:
        detail += " | failed: " + ", ".join(failed)
    return Outcome(number, title, all(checks.values()), detail, seconds, budget, checks)


# ---------------------------------------------------------------------------
# criteria


def joint_cov_oracle(l1, lam, sigma):
    full = np.concatenate(([l1], lam))
    S = sigma**2 * np.outer(full, full) + np.eye(full.size)
    w = np.linalg.solve(S[1:, 1:], S[1:, 0])
    return w, S[0, 0] - S[0, 1:] @ w


def criterion_1() -> Outcome:
    t = time.perf_counter()
    g = np.random.default_rng(SEED)
    err_w = err_v = 0.0
    for _ in range(200):
        J = int(g.integers(1, 11))
        lam, l1, sigma = g.uniform(-5, 5, J), g.uniform(-5, 5), g.uniform(0.1, 3.0)
        spec = FactorSpec(l1, lam, sigma_f=sigma)
        w_o, v_o = joint_cov_oracle(l1, lam, sigma)
        err_w = max(err_w, float(np.max(np.abs(conditional_weights(spec) - w_o))))
        err_v = max(err_v, abs(conditional_variance(spec) - v_o))
    checks = {"weights": err_w <= 1e-10, "variance": err_v <= 1e-10}
    return _finish(1, "conditional-normal oracle", checks, f"max |dw|={err_w:.2e}, max |dvar|={err_v:.2e}", t, 5)


def criterion_2() -> Outcome:
    t = time.perf_counter()
    base = check_characterization(FactorSpec(1.5, [1.0, 1.0]))
    s = float(base.weights.sum())
    up = float(conditional_weights(FactorSpec(1.6, [1.0, 1.0])).sum())
    down = float(conditional_weights(FactorSpec(1.4, [1.0, 1.0])).sum())
    flipped = conditional_weights(FactorSpec(-1.5, [1.0, 1.0]))
    checks = {
        "sum_is_one": abs(s - 1.0) <= 1e-12,
        "positive": bool(np.all(base.weights > 0)),
        "plus_breaks": abs(up - 1.0) > 1e-6,
        "minus_breaks": abs(down - 1.0) > 1e-6,
        "flip_negative": bool(np.any(flipped < 0)),
    }
    detail = f"sum={s:.15f}, sum(+0.1)={up:.6f}, sum(-0.1)={down:.6f}, flipped={np.round(flipped, 4).tolist()}"
    return _finish(2, "simplex characterization", checks, detail, t, 1)


def criterion_3() -> Outcome:
    t = time.perf_counter()
    grid = (10, 100, 1000)
    growing = predictor_convergence_experiment(lambda J: np.sqrt(np.arange(1, J + 1)), grid, 1.0, 2000, SEED)
    flat = predictor_convergence_experiment(lambda J: np.ones(J), grid, 1.0, 2000, SEED + 1)
    e_g = [r["mean_abs_error"] for r in growing]
    e_f = {r["J"]: r["mean_abs_error"] for r in flat}
    drop = 1.0 - e_g[-1] / e_g[0]
    rel = abs(e_f[1000] - e_f[100]) / e_f[100]
    checks = {"growing_drops_50pct": drop >= 0.5, "flat_plateau_20pct": rel <= 0.2}
    detail = (f"sqrt-loadings error {np.round(e_g, 4).tolist()} (drop {drop:.1%}); "
              f"unit-loadings error J=100 {e_f[100]:.4f}, J=1000 {e_f[1000]:.4f} (change {rel:.1%})")
    return _finish(3, "predictor convergence dichotomy", checks, detail, t, 120)


def criterion_4() -> Outcome:
    t = time.perf_counter()
    g = np.random.default_rng(SEED)
    a = np.linspace(0.0, 1.0, 10_001)
    worst = 0.0
    for i in range(50):
        K = int(g.integers(2, 8))
        x0 = g.normal(size=(K, 2))
        x1 = g.normal(size=K) * 2 if i % 2 else x0 @ [0.3, 0.7]  # odd instances mostly outside the hull
        v = g.dirichlet(np.ones(K))
        res = solve_sc(DesignPair(x1, x0, tuple(range(K)), v))
        R = x1[None, :] - np.outer(a, x0[:, 0]) - np.outer(1 - a, x0[:, 1])
        worst = max(worst, abs(res.objective - float(((R * R) @ v).min())))
    exact = True
    for i in range(20):
        J = int(g.integers(2, 12))
        x0 = g.normal(size=(J + 5, J))
        j = int(g.integers(J))
        w = solve_sc(DesignPair(x0[:, j].copy(), x0, tuple(range(J + 5)), np.full(J + 5, 1 / (J + 5)))).w
        exact &= bool(np.array_equal(w, np.eye(J)[j]))
    checks = {"grid_oracle_1e-6": worst <= 1e-6, "embedded_columns_exact": exact}
    return _finish(4, "solver optimality", checks, f"max objective gap to grid oracle {worst:.2e}", t, 5)


def criterion_5() -> Outcome:
    t = time.perf_counter()
    spec = FactorSpec(1.0, [0.5, 1.0, 1.5])
    alpha = np.array([1.0, 0.5, -0.5])
    target = float(alpha @ conditional_weights(spec))
    hits = 0
    for r in range(1000):
        fit = fit_mle(simulate_single_factor(spec, 2001, 2000, 10_000 * SEED + r))
        lo, hi = wald_interval(fit, alpha, 0.95)
        hits += lo <= target <= hi
    cov = hits / 1000
    return _finish(5, "Wald coverage of the MLE contrast", {"coverage_in_band": 0.93 <= cov <= 0.97},
                   f"coverage {cov:.3f} over 1000 reps", t, 180)


def criterion_6() -> Outcome:
    t = time.perf_counter()
    J = 5
    raw = sample_parameters(BayesModelSpec(), ModelData.empty(J), SamplerConfig(chains=4, warmup=1000, draws=1000), SEED)
    mean_t, var_t = 1 / J, (J - 1) / (J * J * (J + 1))
    z_mean, z_var = [], []
    for j in range(J):
        col = raw.w[:, j]
        ess = effective_sample_size(col.reshape(4, -1))
        z_mean.append(abs(col.mean() - mean_t) / (col.std(ddof=1) / math.sqrt(ess)))
        sq = (col - col.mean()) ** 2
        ess_sq = effective_sample_size(sq.reshape(4, -1))
        z_var.append(abs(col.var(ddof=1) - var_t) / (sq.std(ddof=1) / math.sqrt(ess_sq)))
    g = np.random.default_rng(SEED)
    X, y = g.normal(size=(30, 6)), g.normal(size=30)
    spec, data = BayesModelSpec(), ModelData.from_rows(X, y)
    worst = 0.0
    for _ in range(50):
        th = g.normal(size=data.dim(spec))
        _, grad = log_posterior(spec, data, th)
        fd = np.array([(log_posterior(spec, data, th + h)[0] - log_posterior(spec, data, th - h)[0]) / 2e-5
                       for h in np.eye(th.size) * 1e-5])
        worst = max(worst, float(np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1.0))))
    checks = {"dir1_mean_4se": max(z_mean) < 4, "dir1_var_4se": max(z_var) < 4, "gradient_1e-6": worst < 1e-6}
    detail = f"max |z| mean {max(z_mean):.2f}, variance {max(z_var):.2f}; gradient rel err {worst:.1e}"
    return _finish(6, "sampler correctness", checks, detail, t, 120)


_sparse_cache: dict = {}


def sparse_report():
    if "r" not in _sparse_cache:
        t = time.perf_counter()
        _sparse_cache["r"] = run_bvm(BvmConfig(design="sparse", t0_grid=(30, 100, 500, 1000), freq_reps=2000, seed=SEED))
        _sparse_cache["t"] = time.perf_counter() - t
    return _sparse_cache["r"], _sparse_cache["t"]


def criterion_7() -> Outcome:
    t = time.perf_counter()
    rep, elapsed = sparse_report()
    tv = rep.tv
    checks = {
        "strictly_decreasing": all(b < a for a, b in zip(tv, tv[1:])),
        "halved_by_1000": tv[-1] < 0.5 * tv[0],
    }
    out = _finish(7, "sparse frequentist/Bayes convergence", checks,
                  "TV over T0 (30,100,500,1000) = " + str(np.round(tv, 4).tolist()), t - elapsed, 1800)
    return out


def criterion_8() -> Outcome:
    t = time.perf_counter()
    dense = run_bvm(BvmConfig(design="dense", t0_grid=(30, 50, 70), freq_reps=2000, seed=SEED))
    sparse = run_bvm(BvmConfig(design="sparse", t0_grid=(30, 50, 70), freq_reps=2000, seed=SEED))
    d, s = dense.tv, sparse.tv
    checks = {"dense_halved_by_70": d[-1] < 0.5 * d[0], "dense_below_sparse_at_70": d[-1] < s[-1]}
    detail = f"dense TV (30,50,70) = {np.round(d, 4).tolist()}; sparse TV at 70 = {s[-1]:.4f}"
    return _finish(8, "dense converges earlier", checks, detail, t, 900)


def criterion_9() -> Outcome:
    t = time.perf_counter()
    rep, elapsed = sparse_report()
    wr = weight_recovery_from(rep)
    lead = [float(m[0]) for m in wr.posterior_mean]
    checks = {
        "w2_above_0.8_at_1000": lead[-1] > 0.8,
        "w2_grows_from_30": lead[-1] > lead[0],
        "distance_strictly_decreasing": wr.monotone_decrease,
    }
    detail = f"E[w2|y] {np.round(lead, 3).tolist()}; ||E[w|y]-e2|| {np.round(wr.distance, 4).tolist()}"
    return _finish(9, "weight recovery", checks, detail, t - elapsed, 1800)


def criterion_10() -> Outcome:
    t = time.perf_counter()
    covered = 0
    for s in range(50):
        panel = simulate_grouped(**SPARSE, rho=0.5, noise_sd=0.25, t_total=510, t0=500, seed=1000 * SEED + s)
        lo, hi = summarize(sample(BayesModelSpec(), panel, seed=1000 * SEED + s), (0.95,))["intervals"]["0.95"]
        covered += lo <= 0.0 <= hi
    return _finish(10, "zero-effect calibration", {"covers_45_of_50": covered >= 45},
                   f"95% interval covers 0 in {covered}/50 runs", t, 1200)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


@pytest.mark.parametrize("crit", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 11)])
def test_criterion(crit, capsys):
    out = crit()
    with capsys.disabled():
        print("\n" + out.line())
    assert out.passed, out.line()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    for r in results:
        print(r.line(), flush=True)
    sys.exit(0 if all(r.passed for r in results) else 1)
