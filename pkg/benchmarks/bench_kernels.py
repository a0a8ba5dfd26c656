"""Time each hot kernel under the numba and pure-numpy backends.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Numba
compilation is triggered once before timing, so the figures are steady-state
per-call costs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from synthbayes import kernels
from synthbayes.bayes import BayesModelSpec, SamplerConfig, model_data, sample_parameters
from synthbayes.factor_lab import simulate_grouped
from synthbayes.freq import SolverOptions, solve_sc
from synthbayes.panel import outcomes_design


def _cases():
    g = np.random.default_rng(0)
    panel = simulate_grouped(20, 1, 0.5, 0.25, 510, 500, seed=0)
    design = outcomes_design(panel)
    spec = BayesModelSpec()
    data = model_data(spec, panel)
    theta = g.standard_normal(data.dim(spec)) * 0.1
    innov = g.standard_normal((2000, 20))
    samples = g.standard_normal(2000)
    grid = np.linspace(-4, 4, 512)
    cfg = SamplerConfig(chains=1, warmup=200, draws=200)

    def fw(backend):
        with _backend(backend):
            solve_sc(design, SolverOptions(polish=False))

    return {
        "ar1_paths (2000x20)": lambda b: b.ar1_paths(innov, 0.5),
        "frank_wolfe (T0=500, J=20)": fw,
        "logp_grad (T0=500, J=20)": lambda b: b.logp_grad(theta, *data.args(spec)),
        "run_chain (1x200/200)": lambda b: sample_parameters(spec, data, cfg, seed=0, backend=b),
        "kde_eval (2000 pts, 512 grid)": lambda b: b.kde_eval(samples, grid, 0.2),
    }


class _backend:
    """Temporarily route :func:`kernels.active` to ``backend``."""

    def __init__(self, backend):
        self.backend = backend

    def __enter__(self):
        self.saved = kernels.active
        kernels.active = lambda: self.backend

    def __exit__(self, *exc):
        kernels.active = self.saved


def _time(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = [kernels.NUMPY_KERNELS]
    if kernels.NUMBA_KERNELS is not None:
        backends.insert(0, kernels.NUMBA_KERNELS)
    cases = _cases()
    for fn in cases.values():
        for b in backends:
            fn(b)  # compile / warm caches
    header = f"{'kernel':<32}" + "".join(f"{b.name + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, fn in cases.items():
        times = [_time(lambda: fn(b), args.repeat) * 1e3 for b in backends]
        line = f"{name:<32}" + "".join(f"{t:>14.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[1] / times[0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
