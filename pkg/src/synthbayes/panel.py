"""Panel data model, long-format CSV ingestion and design-matrix construction."""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, IngestError

DEFAULT_SCHEMA = {"unit": "unit", "time": "time", "outcome": "outcome"}


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Panel:
    """Balanced panel for one treated unit (column 0) and ``J`` donors.

    ``outcomes`` is periods x units.  ``covariates`` maps a name to a
    periods x units array; :attr:`predictors` averages each over the
    pre-treatment periods.  ``t0`` is the number of pre-treatment periods.
    """

    units: tuple
    times: tuple
    outcomes: np.ndarray
    t0: int
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        y = _frozen(self.outcomes)
        if y.ndim != 2:
            raise ConfigError("outcomes must be a periods x units matrix")
        T, n = y.shape
        if len(self.units) != n or len(self.times) != T:
            raise ConfigError("units/times do not match the outcome matrix shape")
        if n < 2:
            raise ConfigError("a panel needs one treated unit and at least one donor")
        if not np.all(np.isfinite(y)):
            raise IngestError("outcomes contain missing or non-finite values")
        if not (2 <= self.t0 < T):
            raise ConfigError(f"t0 must satisfy 2 <= t0 < T (got t0={self.t0}, T={T})")
        covs = {}
        for name, arr in dict(self.covariates).items():
            a = _frozen(arr)
            if a.shape != y.shape:
                raise ConfigError(f"covariate {name!r} has shape {a.shape}, expected {y.shape}")
            covs[name] = a
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "units", tuple(str(u) for u in self.units))
        object.__setattr__(self, "times", tuple(str(t) for t in self.times))
        object.__setattr__(self, "covariates", covs)

    @property
    def J(self) -> int:
        return self.outcomes.shape[1] - 1

    @property
    def T(self) -> int:
        return self.outcomes.shape[0]

    @property
    def treated(self) -> np.ndarray:
        return self.outcomes[:, 0]

    @property
    def donors(self) -> np.ndarray:
        return self.outcomes[:, 1:]

    @property
    def pre(self) -> slice:
        return slice(0, self.t0)

    @property
    def post(self) -> slice:
        return slice(self.t0, self.T)

    @property
    def predictor_names(self) -> tuple:
        return tuple(self.covariates)

    @property
    def predictors(self) -> np.ndarray:
        """Covariates averaged over the pre-period, shape (K', J+1)."""
        if not self.covariates:
            return np.empty((0, self.J + 1))
        return np.vstack([c[: self.t0].mean(axis=0) for c in self.covariates.values()])

    def scaled(self, factor: float) -> "Panel":
        return Panel(self.units, self.times, self.outcomes * factor, self.t0, self.covariates)

    def standardization_scale(self) -> float:
        """Standard deviation of the treated unit's pre-period outcomes."""
        sd = float(self.treated[self.pre].std(ddof=1))
        if not sd > 0:
            raise ConfigError("treated pre-period outcomes are constant; cannot standardize")
        return sd

    def standardized(self) -> "Panel":
        return self.scaled(1.0 / self.standardization_scale())

    def permute_donors(self, order: Sequence[int]) -> "Panel":
        """Return the panel with donors reordered; ``order`` indexes donors (0-based)."""
        cols = [0] + [1 + int(i) for i in order]
        if sorted(cols[1:]) != list(range(1, self.J + 1)):
            raise ConfigError("order must be a permutation of donor indices")
        covs = {k: v[:, cols] for k, v in self.covariates.items()}
        return Panel(tuple(self.units[c] for c in cols), self.times, self.outcomes[:, cols], self.t0, covs)

    def to_dict(self) -> dict:
        return {
            "units": list(self.units),
            "times": list(self.times),
            "t0": self.t0,
            "outcomes": self.outcomes.tolist(),
            "covariates": {k: v.tolist() for k, v in self.covariates.items()},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Panel":
        return cls(
            tuple(d["units"]),
            tuple(d["times"]),
            np.asarray(d["outcomes"], dtype=float),
            int(d["t0"]),
            {k: np.asarray(v, dtype=float) for k, v in d.get("covariates", {}).items()},
        )


@dataclass(frozen=True)
class DesignPair:
    """Treated predictor vector ``x1`` (K,), donor matrix ``x0`` (K, J) and
    nonnegative predictor weights ``v`` summing to one."""

    x1: np.ndarray
    x0: np.ndarray
    labels: tuple
    v: np.ndarray

    def __post_init__(self):
        x1 = _frozen(self.x1).reshape(-1)
        x0 = _frozen(self.x0)
        if x0.ndim != 2 or x0.shape[0] != x1.shape[0]:
            raise ConfigError(f"x0 rows ({x0.shape}) must match length of x1 ({x1.shape[0]})")
        v = _frozen(self.v).reshape(-1)
        if v.shape[0] != x1.shape[0]:
            raise ConfigError("v must have one entry per predictor row")
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
            raise ConfigError("v must be nonnegative and sum to 1")
        if len(self.labels) != x1.shape[0]:
            raise ConfigError("one label per predictor row is required")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def K(self) -> int:
        return self.x1.shape[0]

    @property
    def J(self) -> int:
        return self.x0.shape[1]


@dataclass(frozen=True)
class DesignSpec:
    """Which predictor rows to build.

    ``combinations`` holds ``(label, coefficients)`` pairs, each coefficient
    vector of length ``t0`` applied to pre-period outcomes.  ``None`` means one
    row per pre-period outcome.  ``covariates`` names rows taken from
    :attr:`Panel.predictors`; they come first in the design.
    """

    combinations: Sequence | None = None
    covariates: Sequence[str] = ()
    v: Sequence[float] | None = None

    @classmethod
    def pre_mean(cls, t0: int) -> "DesignSpec":
        return cls(combinations=[("pre_mean", np.full(t0, 1.0 / t0))])


def _parse_float(raw: str, unit: str, time: str, col: str) -> float:
    raw = (raw or "").strip()
    if raw == "" or raw.lower() in ("na", "nan", "null", "none"):
        raise IngestError(f"missing {col} for unit={unit!r} time={time!r}", unit=unit, time=time)
    try:
        value = float(raw)
    except ValueError:
        raise IngestError(f"unparseable {col} {raw!r} for unit={unit!r} time={time!r}", unit=unit, time=time) from None
    if not np.isfinite(value):
        raise IngestError(f"non-finite {col} for unit={unit!r} time={time!r}", unit=unit, time=time)
    return value


def _time_sort_key(labels: Sequence[str]):
    try:
        keys = [int(t) for t in labels]
        return lambda t: keys[labels.index(t)]
    except ValueError:
        pass
    try:
        parsed = [_dt.date.fromisoformat(t) for t in labels]
        return lambda t: parsed[labels.index(t)]
    except ValueError:
        return None


def load_panel(path, schema: Mapping | None = None, t0_marker: str | None = None, treated: str | None = None) -> Panel:
    """Read a long-format CSV into a validated :class:`Panel`.

    ``schema`` maps the logical columns ``unit``, ``time``, ``outcome`` to
    header names and may list ``predictors``.  ``t0_marker`` is the last
    pre-treatment period.  The treated unit is ``treated`` if given (or
    ``schema["treated"]``), otherwise the first unit in the file; donors keep
    their first-appearance order.
    """
    sch = dict(DEFAULT_SCHEMA)
    sch.update(schema or {})
    treated = treated if treated is not None else sch.get("treated")
    if t0_marker is None:
        t0_marker = sch.get("t0_marker")
    if t0_marker is None:
        raise ConfigError("t0_marker is required")
    t0_marker = str(t0_marker)
    ucol, tcol, ycol = sch["unit"], sch["time"], sch["outcome"]

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (ucol, tcol, ycol):
            if col not in header:
                raise IngestError(f"column {col!r} not found in header {header}")
        preds = list(sch.get("predictors") or [c for c in header if c not in (ucol, tcol, ycol)])
        for c in preds:
            if c not in header:
                raise IngestError(f"predictor column {c!r} not found in header")
        cells: dict = {}
        units: list = []
        times: list = []
        seen_u, seen_t = set(), set()
        for row in reader:
            u, t = row[ucol].strip(), row[tcol].strip()
            if (u, t) in cells:
                raise IngestError(f"duplicate row for unit={u!r} time={t!r}", unit=u, time=t)
            vals = [_parse_float(row[ycol], u, t, ycol)] + [_parse_float(row[c], u, t, c) for c in preds]
            cells[(u, t)] = vals
            if u not in seen_u:
                seen_u.add(u)
                units.append(u)
            if t not in seen_t:
                seen_t.add(t)
                times.append(t)

    if not units:
        raise IngestError("panel file has no data rows")
    key = _time_sort_key(times)
    if key is not None:
        times = sorted(times, key=key)
    if treated is not None:
        treated = str(treated)
        if treated not in units:
            raise ConfigError(f"treated unit {treated!r} not present in file")
        units.remove(treated)
        units.insert(0, treated)
    for u in units:
        for t in times:
            if (u, t) not in cells:
                raise IngestError(f"unbalanced panel: no row for unit={u!r} time={t!r}", unit=u, time=t)
    if t0_marker not in times:
        raise ConfigError(f"t0_marker {t0_marker!r} is not a period in the file")
    t0 = times.index(t0_marker) + 1

    data = np.array([[cells[(u, t)] for u in units] for t in times])  # T x N x (1+K')
    covs = {c: data[:, :, 1 + i] for i, c in enumerate(preds)}
    return Panel(tuple(units), tuple(times), data[:, :, 0], t0, covs)


def write_panel(panel: Panel, path, schema: Mapping | None = None) -> None:
    """Write ``panel`` as long-format CSV; floats use ``repr`` so they round-trip exactly."""
    sch = dict(DEFAULT_SCHEMA)
    sch.update(schema or {})
    names = list(panel.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([sch["unit"], sch["time"], sch["outcome"], *names])
        for i, u in enumerate(panel.units):
            for t, label in enumerate(panel.times):
                row = [u, label, repr(float(panel.outcomes[t, i]))]
                row += [repr(float(panel.covariates[c][t, i])) for c in names]
                w.writerow(row)


def build_design(panel: Panel, spec: DesignSpec | None = None) -> DesignPair:
    """Stack covariate rows then outcome-combination rows for treated and donors."""
    spec = spec or DesignSpec()
    rows, labels = [], []
    if spec.covariates:
        pred = panel.predictors
        names = panel.predictor_names
        for c in spec.covariates:
            if c not in names:
                raise ConfigError(f"unknown covariate {c!r}")
            rows.append(pred[names.index(c)])
            labels.append(str(c))
    pre = panel.outcomes[: panel.t0]
    if spec.combinations is None:
        rows.extend(pre)
        labels.extend(f"y[{t}]" for t in panel.times[: panel.t0])
    else:
        for i, combo in enumerate(spec.combinations):
            if isinstance(combo, tuple) and len(combo) == 2 and isinstance(combo[0], str):
                label, coef = combo
            else:
                label, coef = f"combo{i}", combo
            coef = np.asarray(coef, dtype=float).reshape(-1)
            if coef.shape[0] != panel.t0:
                raise ConfigError(f"combination {label!r} has length {coef.shape[0]}, expected t0={panel.t0}")
            rows.append(coef @ pre)
            labels.append(label)
    if not rows:
        raise ConfigError("design has no predictor rows")
    X = np.vstack(rows)
    K = X.shape[0]
    v = np.full(K, 1.0 / K) if spec.v is None else np.asarray(spec.v, dtype=float)
    if spec.v is not None and v.shape[0] != K:
        raise ConfigError(f"v has {v.shape[0]} entries for {K} predictor rows")
    return DesignPair(X[:, 0], X[:, 1:], tuple(labels), v)


def outcomes_design(panel: Panel) -> DesignPair:
    """Pre-period outcomes as predictors with uniform weights."""
    return build_design(panel, DesignSpec())
