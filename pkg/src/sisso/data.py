"""Datasets, CSV ingestion, benchmark generation and train/holdout splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, SissoError, ValidationError
from .expr import UnitVector
from .parsing import evaluate_ast, parse, variables

MAX_RESAMPLE = 100


class EmptyDataError(ParseError):
    """Raised when a data file has a header but no rows."""


@dataclass(eq=False)
class Dataset:
    y: np.ndarray
    X: np.ndarray
    feature_names: list[str]
    units: list[UnitVector] | None = None
    seed: int | None = None
    y_true: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValidationError("X must be N x d and y must have N entries", "data")
        if self.X.shape[1] != len(self.feature_names):
            raise ValidationError("one feature name is needed per column of X", "data")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValidationError("feature names must be unique", "data")
        if self.X.shape[0] < 2:
            raise ValidationError("a dataset needs at least 2 rows", "data")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValidationError("dataset values must be finite", "data")
        if self.units is not None and len(self.units) != self.d:
            raise ValidationError(f"{len(self.units)} units given for {self.d} features", "data")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        y_true = None if self.y_true is None else self.y_true[rows]
        return replace(self, y=self.y[rows], X=self.X[rows], y_true=y_true)

    def to_csv(self, path: str | Path, target_name: str = "y") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([target_name, *self.feature_names])
            for yi, row in zip(self.y, self.X):
                w.writerow([repr(float(yi)), *(repr(float(v)) for v in row)])


def parse_units(labels: Sequence[str] | None) -> list[UnitVector] | None:
    if labels is None:
        return None
    return [UnitVector.from_label(lab) for lab in labels]


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a comma-separated numeric table with a mandatory header row."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"data file {str(path)!r} not found", "data")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise EmptyDataError(f"{path.name}: file is empty", "data")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise EmptyDataError(f"{path.name}: header present but no data rows", "data")
    values = np.empty((len(body), len(header)))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise ParseError(f"{path.name}: row {i + 2} has {len(r)} cells, expected {len(header)}", "data")
        for j, cell in enumerate(r):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"{path.name}: non-numeric cell {cell.strip()!r} at row {i + 2}, "
                                 f"column {j + 1} ({header[j]})", "data") from None
    return header, values


def load_csv(path: str | Path, units: Sequence[str] | None = None) -> Dataset:
    """First column is the target, the remaining columns are primary features."""
    header, values = read_table(path)
    if len(header) < 2:
        raise ParseError("data needs a target column and at least one feature column", "data")
    d = len(header) - 1
    if units is not None and len(units) != d:
        raise ValidationError(f"{len(units)} unit labels given for {d} features", "data")
    return Dataset(y=values[:, 0], X=values[:, 1:], feature_names=header[1:], units=parse_units(units))


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sampler:
    """Distribution of one sampled variable."""

    name: str
    low: float
    high: float
    dist: str = "uniform"

    def __post_init__(self):
        if self.dist not in ("uniform", "loguniform"):
            raise ValidationError(f"unknown sampler distribution {self.dist!r}", "data")
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or not self.low < self.high:
            raise ValidationError(f"sampler range for {self.name!r} is empty", "data")
        if self.dist == "loguniform" and self.low <= 0:
            raise ValidationError(f"log-uniform range for {self.name!r} must be positive", "data")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.dist == "uniform":
            return rng.uniform(self.low, self.high, n)
        return np.exp(rng.uniform(math.log(self.low), math.log(self.high), n))


@dataclass(frozen=True)
class BenchmarkSpec:
    """A reproducible benchmark problem.

    ``sampler`` lists the randomly drawn variables. By default they are the
    primary features; ``features`` can instead define each feature as an
    expression of the sampled variables (e.g. a constant or ``8.314*T``).
    ``reference_equation`` is the expected model form for structural
    matching, written over the feature names (defaults to ``ground_truth``).
    """

    id: str
    ground_truth: str
    d: int
    sampler: tuple[Sampler, ...]
    n_samples: int
    noise_sigma: float
    operator_set: tuple[str, ...]
    n_expansion: int
    units: tuple[str, ...] | None = None
    n_term: int = 1
    feature_names: tuple[str, ...] | None = None
    features: tuple[str, ...] | None = None
    reference_equation: str | None = None
    train_fraction: float | None = None
    k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "sampler", tuple(
            s if isinstance(s, Sampler) else Sampler(**s) for s in self.sampler))
        for name in ("operator_set", "units", "feature_names", "features"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))
        if self.d < 1 or self.n_samples < 2:
            raise ValidationError("a benchmark needs d >= 1 and n_samples >= 2", "data")
        if not self.noise_sigma >= 0:
            raise ValidationError("noise_sigma must be >= 0", "data")
        if self.features is None and len(self.sampler) != self.d:
            raise ValidationError("one sampler per feature is needed", "data")
        if self.features is not None and len(self.features) != self.d:
            raise ValidationError("one feature definition per feature is needed", "data")
        if self.units is not None and len(self.units) != self.d:
            raise ValidationError("one unit label per feature is needed", "data")
        if self.train_fraction is not None and not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)", "data")
        known = set(self.names) | {s.name for s in self.sampler}
        unknown = variables(parse(self.ground_truth)) - known
        if unknown:
            raise ValidationError(f"ground truth uses undefined variables {sorted(unknown)}", "data")

    @property
    def names(self) -> tuple[str, ...]:
        if self.feature_names is not None:
            return self.feature_names
        if self.features is None:
            return tuple(s.name for s in self.sampler)
        return tuple(f"x{i + 1}" for i in range(self.d))

    @property
    def reference(self) -> str:
        return self.reference_equation or self.ground_truth

    def to_json(self) -> dict:
        out = asdict(self)
        out["sampler"] = [asdict(s) for s in self.sampler]
        for key in ("operator_set", "units", "feature_names", "features"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out

    @classmethod
    def from_json(cls, obj: dict | str) -> "BenchmarkSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValidationError(f"bad benchmark spec: {exc}", "data") from None


def _draw(spec: BenchmarkSpec, rng: np.random.Generator, n: int):
    env = {s.name: s.draw(rng, n) for s in spec.sampler}
    if spec.features is None:
        cols = [env[s.name] for s in spec.sampler]
    else:
        cols = [np.broadcast_to(evaluate_ast(parse(f), env), (n,)).astype(float) for f in spec.features]
    env.update(zip(spec.names, cols))
    X = np.column_stack(cols)
    y = np.broadcast_to(evaluate_ast(parse(spec.ground_truth), env), (n,)).astype(float)
    return X, y


def generate(spec: BenchmarkSpec, seed: int) -> Dataset:
    """Sample inputs, evaluate the ground truth and add Gaussian noise.

    Rows whose features or ground truth are non-finite are redrawn, up to
    100 rounds. Deterministic per ``(spec, seed)``.
    """
    rng = np.random.default_rng(seed)
    X, y = _draw(spec, rng, spec.n_samples)
    for _ in range(MAX_RESAMPLE):
        bad = ~(np.isfinite(y) & np.all(np.isfinite(X), axis=1))
        if not bad.any():
            break
        X_new, y_new = _draw(spec, rng, int(bad.sum()))
        X[bad], y[bad] = X_new, y_new
    else:
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise SissoError(f"{spec.id}: ground truth stayed non-finite after {MAX_RESAMPLE} resamples", "data")
    y_obs = y + rng.normal(0.0, spec.noise_sigma, spec.n_samples) if spec.noise_sigma > 0 else y.copy()
    return Dataset(y=y_obs, X=X, feature_names=list(spec.names), units=parse_units(spec.units),
                   seed=seed, y_true=y)


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint train/holdout partition; row order is kept within each part."""
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)", "data")
    n_train = int(round(train_fraction * ds.n))
    if n_train < 1 or n_train > ds.n - 1:
        raise ValidationError(f"train_fraction {train_fraction} leaves an empty part of {ds.n} rows", "data")
    perm = np.random.default_rng(seed).permutation(ds.n)
    train, hold = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return _subset_keep_small(ds, train), _subset_keep_small(ds, hold)


def _subset_keep_small(ds: Dataset, rows: np.ndarray) -> Dataset:
    # a one-row part is legal for splits even though a fitted Dataset needs two
    if rows.size >= 2:
        return ds.subset(rows)
    obj = object.__new__(Dataset)
    obj.__dict__.update(ds.__dict__)
    obj.y, obj.X = ds.y[rows], ds.X[rows]
    obj.y_true = None if ds.y_true is None else ds.y_true[rows]
    return obj


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _u(*names, low=1.0, high=5.0):
    return tuple(Sampler(n, low, high) for n in names)


def _lu(name, low, high):
    return Sampler(name, low, high, "loguniform")


_ARITH = ("+", "-", "*", "/")

_SYNTHETIC = [
    # (ground truth, d, operators, level, n_term, noise); operators are those
    # needed to build the true terms and the level is the smallest containing them
    ("10*x1/(x2*(x3+x4))", 4, ("+", "*", "/"), 2, 1, 0.05),
    ("2*sin(x2) + 3*sqrt(x1)", 2, ("+", "-", "*", "/", "exp", "ln", "pow(2)", "sin", "sqrt"), 1, 2, 0.05),
    ("3*exp(x1)/(x2+exp(x3))", 3, ("+", "/", "exp"), 3, 1, 0.05),
    ("3*x3 + x2^2 + x1^3", 3, ("pow(2)", "pow(3)"), 1, 3, 0.05),
    ("(x2+exp(x2))/(x1^2-x2^2)", 2, ("+", "-", "/", "exp", "pow(2)"), 3, 1, 0.05),
    ("sqrt(x1^2+x2^2)", 2, ("+", "sqrt", "pow(2)"), 3, 1, 0.05),
    ("sin(x1*x3) + 1.5*exp(-x1*x2)", 3, ("*", "sin", "exp(-)"), 2, 2, 0.05),
    ("5*(x1*x3^2) + x1^3 + 3*(x1*x2^2)", 3, ("*", "pow(2)", "pow(3)"), 2, 3, 0.05),
    ("x1*x2*x3*(ln(x4)-ln(x5))", 5, ("*", "-", "ln"), 3, 1, 0.0),
    ("exp(-x1/(x3*x2))", 3, ("*", "/", "exp(-)"), 3, 1, 0.0),
]

R_GAS = 8.314
EA = 185.0
_KINETICS_TRUTH = "2.37*sqrt(T)*exp(-Ea/RT)"
_KINETICS_FORM = f"2.37*sqrt(RT/{R_GAS})*exp(-Ea/RT)"


def _build_registry() -> dict[str, BenchmarkSpec]:
    reg: dict[str, BenchmarkSpec] = {}
    for i, (truth, d, ops, level, t, sigma) in enumerate(_SYNTHETIC, start=1):
        sid = f"synthetic-{i:02d}"
        reg[sid] = BenchmarkSpec(id=sid, ground_truth=truth, d=d,
                                 sampler=_u(*(f"x{j + 1}" for j in range(d))),
                                 n_samples=10, noise_sigma=sigma, operator_set=ops, n_expansion=level,
                                 n_term=t)
    sci_ops = ("-", "*", "/", "pow(2)")
    reg["distance"] = BenchmarkSpec(
        id="distance", ground_truth="(x0-x1)^2+(x2-x3)^2", d=4,
        sampler=tuple(_lu(f"x{j}", 0.1, 10.0) for j in range(4)),
        n_samples=50, noise_sigma=0.0, operator_set=("-", "pow(2)"), n_expansion=2,
        units=("u1",) * 4, n_term=2)
    reg["particle-displacement"] = BenchmarkSpec(
        id="particle-displacement", ground_truth="q*(E + B*v*sin(theta))", d=5,
        sampler=(_lu("q", 1e-11, 1e-9), _lu("E", 1e1, 1e3), _lu("B", 1e1, 1e3), _lu("v", 1e5, 1e7),
                 Sampler("theta", 0.0, 2 * math.pi)),
        n_samples=50, noise_sigma=0.0, operator_set=("*", "sin"), n_expansion=3,
        units=("u1", "u2", "u3", "u4", ""), n_term=2)
    reg["relativistic-mass"] = BenchmarkSpec(
        id="relativistic-mass", ground_truth="m0^2/(1-v^2/c^2)", d=3,
        sampler=(_lu("m0", 0.1, 10.0), _lu("v", 1e7, 1e8), _lu("c", 1.5e8, 3e8)),
        n_samples=50, noise_sigma=0.0, operator_set=sci_ops, n_expansion=3,
        units=("u1", "u2", "u2"), n_term=1)
    reg["oscillation-amplitude"] = BenchmarkSpec(
        id="oscillation-amplitude", ground_truth="q*E/(m*(omega1^2-omega2^2))", d=5,
        sampler=(_lu("q", 0.1, 10.0), _lu("E", 1.0, 10.0), _lu("m", 0.1, 10.0),
                 _lu("omega1", 3.0, 10.0), _lu("omega2", 0.5, 2.5)),
        n_samples=50, noise_sigma=0.0, operator_set=sci_ops, n_expansion=3,
        units=("u1", "u2", "u3", "u4", "u4"), n_term=1)
    kin = dict(ground_truth=_KINETICS_TRUTH, d=2, n_samples=100, noise_sigma=0.1,
               operator_set=("sqrt", "+", "exp(-)", "/"), n_expansion=3, n_term=1,
               feature_names=("Ea", "RT"), features=(repr(EA), f"{R_GAS}*T"),
               reference_equation=_KINETICS_FORM)
    reg["kinetics-limited"] = BenchmarkSpec(id="kinetics-limited", sampler=(Sampler("T", 800.0, 900.0),), **kin)
    reg["kinetics-full"] = BenchmarkSpec(id="kinetics-full", sampler=(Sampler("T", 600.0, 900.0),),
                                         train_fraction=0.8, **kin)
    return reg


REGISTRY: dict[str, BenchmarkSpec] = _build_registry()


def get_benchmark(benchmark_id: str) -> BenchmarkSpec:
    try:
        return REGISTRY[benchmark_id]
    except KeyError:
        raise ValidationError(f"unknown benchmark id {benchmark_id!r}; known: {', '.join(REGISTRY)}",
                              "data") from None
