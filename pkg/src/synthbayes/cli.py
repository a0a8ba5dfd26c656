"""Command-line front end: ``synthbayes {simulate,fit,bvm}``.

Configuration is resolved in layers: profile defaults, then the YAML file
given by ``--config``, then explicit flags (``--set a.b=value`` reaches any
key).  The resolved configuration is written into ``manifest.json`` together
with its SHA-256 digest so a run can be replayed from the manifest alone.

Exit codes: 0 success, 1 internal error, 2 configuration or ingestion error,
3 estimation error, 4 experiment failure threshold exceeded.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, bayes, bvm, factor_lab, freq, kernels
from .errors import ConfigError, DegenerateError, EstimationError, ExperimentError, IngestError
from .panel import DesignSpec, build_design, load_panel, outcomes_design, write_panel

log = logging.getLogger("synthbayes")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_EXPERIMENT = 0, 1, 2, 3, 4

PROFILES = {
    "smoke": {
        "sampler": {"chains": 2, "warmup": 200, "draws": 200},
        "bvm": {"t0_grid": [30], "freq_reps": 100},
    },
    "desk": {
        "sampler": {"chains": 4, "warmup": 1000, "draws": 1000},
        "bvm": {"t0_grid": [30, 100, 500, 1000], "freq_reps": 2000},
    },
    "full": {
        "sampler": {"chains": 4, "warmup": 2000, "draws": 2500},
        "bvm": {"t0_grid": [30, 100, 500, 1000], "freq_reps": 10000},
    },
}

SIMULATE_DEFAULTS = {
    "model": "grouped",
    "design": "sparse",
    "rho": 0.5,
    "noise_sd": 0.25,
    "t_total": 110,
    "t0": 100,
    "lambda1": 1.0,
    "lambdas": [1.0, 1.0],
    "sigma_f": 1.0,
    "factor_law": "iid_gaussian",
}

FIT_DEFAULTS = {
    "mode": "frequentist",
    "panel": None,
    "t0_marker": None,
    "treated": None,
    "schema": {},
    "covariates": [],
    "pre_mean": False,
    "levels": [0.75, 0.95],
    "contrast": None,
    "model": {},
    "standardize": False,
}

BVM_DEFAULTS = {"design": "sparse", "post_periods": 10, "noise_sd": 0.25, "rho": 0.5, "predictive_noise": True,
                "grid_points": 512}


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    tool_version: str = __version__
    backend: str = field(default_factory=kernels.backend_name)
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "backend": self.backend,
            "started": self.started,
            "finished": self.finished,
            "outputs": self.outputs,
            "warnings": self.warnings,
        }

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
    node[keys[-1]] = value


def _read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at top level")
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    """Profile defaults, then the config file, then command-line flags."""
    cfg = {
        "simulate": dict(SIMULATE_DEFAULTS),
        "fit": copy.deepcopy(FIT_DEFAULTS),
        "bvm": dict(BVM_DEFAULTS),
        "sampler": {"target_accept": 0.8, "max_leapfrog": 16},
        "seed": 0,
        "threads": os.cpu_count() or 1,
    }
    profile = args.profile or "desk"
    if args.config:
        file_cfg = _read_config(args.config)
        profile = args.profile or file_cfg.get("profile", profile)
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    cfg = _merge(cfg, PROFILES[profile])
    if args.config:
        cfg = _merge(cfg, file_cfg)
    cfg["profile"] = profile
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    for key, value in getattr(args, "flag_overrides", {}).items():
        if value is not None:
            _set_path(cfg, key, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(cfg, k.strip(), yaml.safe_load(v))
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    return cfg


def _build(cls, section: str, values: dict):
    """Instantiate a config dataclass, naming the offending field on failure."""
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _sampler(cfg: dict) -> bayes.SamplerConfig:
    vals = dict(cfg["sampler"])
    vals.setdefault("threads", cfg["threads"])
    return _build(bayes.SamplerConfig, "sampler", vals)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out_dir: Path) -> tuple[list, list]:
    s = cfg["simulate"]
    seed = cfg["seed"]
    t_total, t0 = int(s["t_total"]), int(s["t0"])
    if s["model"] == "grouped":
        if s["design"] not in bvm.DESIGNS:
            raise ConfigError(f"simulate.design must be one of {sorted(bvm.DESIGNS)}")
        if not abs(float(s["rho"])) < 1:
            raise ConfigError(f"simulate.rho must satisfy |rho| < 1 (got {s['rho']})")
        if float(s["noise_sd"]) < 0:
            raise ConfigError("simulate.noise_sd must be nonnegative")
        d = bvm.DESIGNS[s["design"]]
        try:
            panel = factor_lab.simulate_grouped(d["groups"], d["group_size"], float(s["rho"]), float(s["noise_sd"]),
                                                t_total, t0, seed)
        except ConfigError as exc:
            raise ConfigError(f"simulate: {exc}") from None
    elif s["model"] == "single_factor":
        spec = _build(factor_lab.FactorSpec, "simulate", {
            "lambda1": s["lambda1"], "lambdas": s["lambdas"], "sigma_f": s["sigma_f"],
            "noise_sd": s["noise_sd"], "factor_law": s["factor_law"], "rho": s["rho"],
        })
        panel = factor_lab.simulate_single_factor(spec, t_total, t0, seed)
    else:
        raise ConfigError(f"simulate.model must be 'grouped' or 'single_factor', got {s['model']!r}")
    path = out_dir / "panel.csv"
    write_panel(panel, path)
    meta = {"t0_marker": str(panel.times[panel.t0 - 1]), "treated": panel.units[0], "J": panel.J, "T": panel.T}
    (out_dir / "panel_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return [path, out_dir / "panel_meta.json"], []


def _load_fit_panel(f: dict):
    if not f.get("panel"):
        raise ConfigError("fit.panel is required (positional PANEL or config key)")
    t0_marker = f.get("t0_marker")
    if t0_marker is None:
        meta = Path(f["panel"]).with_name("panel_meta.json")
        if meta.exists():
            t0_marker = json.loads(meta.read_text(encoding="utf-8"))["t0_marker"]
    return load_panel(f["panel"], schema=f.get("schema") or None, t0_marker=t0_marker, treated=f.get("treated"))


def _design(panel, f: dict):
    covs = list(f.get("covariates") or [])
    if not covs and not f.get("pre_mean"):
        return outcomes_design(panel)
    spec = DesignSpec(
        combinations=DesignSpec.pre_mean(panel.t0).combinations if f.get("pre_mean") else None,
        covariates=covs,
    )
    return build_design(panel, spec)


def cmd_fit(cfg: dict, out_dir: Path) -> tuple[list, list]:
    f = cfg["fit"]
    panel = _load_fit_panel(f)
    mode = f["mode"]
    result: dict = {"mode": mode, "units": list(panel.units), "t0": panel.t0}
    if f.get("standardize"):
        # outcomes divided by the treated pre-period sd; effects are in those units
        result["scale"] = panel.standardization_scale()
        panel = panel.standardized()
    caught: list = []
    if mode == "frequentist":
        w = freq.solve_sc(_design(panel, f))
        eff = freq.effects(panel, w.w)
        result.update(w.to_dict())
    elif mode == "mle":
        fit = freq.fit_mle(panel)
        eff = freq.effects(panel, fit.w_hat)
        result.update(fit.to_dict())
        contrast = f.get("contrast")
        if contrast is not None:
            lo, hi = freq.wald_interval(fit, contrast, 0.95)
            result["wald_95"] = {"contrast": list(contrast), "interval": [lo, hi]}
    elif mode == "bayes":
        spec = _build(bayes.BayesModelSpec, "fit.model", dict(f.get("model") or {}))
        design = _design(panel, f) if (spec.use_predictor_weights or f.get("covariates") or f.get("pre_mean")) else None
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            draws = bayes.sample(spec, panel, design, _sampler(cfg), seed=cfg["seed"])
        caught = [f"{w.category.__name__}: {w.message}" for w in rec]
        result.update(bayes.summary_json(draws, panel, tuple(f["levels"])))
        draws.to_csv(out_dir / "draws.csv")
        eff = freq.EffectSeries(draws.times, draws.tau_draws.mean(axis=0), draws.counterfactual_draws.mean(axis=0),
                                draws.observed)
    else:
        raise ConfigError(f"fit.mode must be frequentist, mle or bayes, got {mode!r}")
    result["effects"] = eff.to_dict()
    result["warning"] = bool(caught)
    result["warnings"] = caught
    path = out_dir / "results.json"
    path.write_text(json.dumps(result, indent=2, default=_json_default) + "\n", encoding="utf-8")
    eff.to_csv(out_dir / "effects.csv")
    outputs = [path, out_dir / "effects.csv"]
    if mode == "bayes":
        outputs.append(out_dir / "draws.csv")
    return outputs, caught


def cmd_bvm(cfg: dict, out_dir: Path) -> tuple[list, list]:
    b = dict(cfg["bvm"])
    b["t0_grid"] = tuple(b["t0_grid"])
    b["bayes_cfg"] = _sampler(cfg)
    b["seed"] = cfg["seed"]
    b["threads"] = cfg["threads"]
    bc = _build(bvm.BvmConfig, "bvm", b)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        report = bvm.run_bvm(bc)
    caught = [f"{w.category.__name__}: {w.message}" for w in rec]
    outputs = report.write(out_dir)
    summary = out_dir / "bvm_summary.json"
    summary.write_text(bvm.dumps(bvm.manifest_dict(report)) + "\n", encoding="utf-8")
    return outputs + [summary], caught


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "bvm": cmd_bvm}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker cap (default: available cores)")
    common.add_argument("--config", default=None, help="YAML configuration file")
    common.add_argument("--out-dir", default="out", help="output directory (default ./out)")
    common.add_argument("--profile", choices=sorted(PROFILES), default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. sampler.draws=50")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="synthbayes", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a zero-effect panel")
    s.add_argument("--model", dest="simulate.model", choices=["grouped", "single_factor"])
    s.add_argument("--design", dest="simulate.design", choices=sorted(bvm.DESIGNS))
    s.add_argument("--rho", dest="simulate.rho", type=float)
    s.add_argument("--noise-sd", dest="simulate.noise_sd", type=float)
    s.add_argument("--t-total", dest="simulate.t_total", type=int)
    s.add_argument("--t0", dest="simulate.t0", type=int)

    f = sub.add_parser("fit", parents=[common], help="fit a synthetic control to a panel CSV")
    f.add_argument("panel", nargs="?", default=None)
    f.add_argument("--mode", dest="fit.mode", choices=["frequentist", "mle", "bayes"])
    f.add_argument("--t0-marker", dest="fit.t0_marker")
    f.add_argument("--treated", dest="fit.treated")
    f.add_argument("--standardize", dest="fit.standardize", action="store_const", const=True,
                   help="divide outcomes by the treated unit's pre-period sd")
    f.add_argument("--draws", dest="sampler.draws", type=int)
    f.add_argument("--warmup", dest="sampler.warmup", type=int)
    f.add_argument("--chains", dest="sampler.chains", type=int)

    b = sub.add_parser("bvm", parents=[common], help="frequentist-vs-Bayesian convergence experiment")
    b.add_argument("--design", dest="bvm.design", choices=sorted(bvm.DESIGNS))
    b.add_argument("--t0-grid", dest="bvm.t0_grid", type=lambda s: [int(x) for x in s.split(",")])
    b.add_argument("--freq-reps", dest="bvm.freq_reps", type=int)
    b.add_argument("--draws", dest="sampler.draws", type=int)
    b.add_argument("--warmup", dest="sampler.warmup", type=int)
    return p


def _split_args(ns: argparse.Namespace) -> argparse.Namespace:
    overrides = {k: v for k, v in vars(ns).items() if "." in k}
    if getattr(ns, "panel", None):
        overrides["fit.panel"] = ns.panel
    ns.flag_overrides = overrides
    return ns


def main(argv=None) -> int:
    parser = build_parser()
    args = _split_args(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, cfg, cfg["seed"], started=_now())
        outputs, caught = COMMANDS[args.command](cfg, out_dir)
        for msg in caught:
            print(f"warning: {msg}", file=sys.stderr)
        manifest.finished = _now()
        manifest.outputs = sorted(str(Path(p).name) for p in outputs)
        manifest.warnings = caught
        manifest.write(out_dir)
    except (ConfigError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, DegenerateError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
