"""Command-line interface and the end-to-end fit pipeline.

Subcommands: ``fit``, ``benchmark``, ``expand`` and ``predict``. Errors are
printed with their module prefix and mapped to exit codes (parse 2,
validation 3, sizing 4, degeneracy 5).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, generate, get_benchmark, load_csv, parse_units, read_table, REGISTRY, split
from .errors import ParseError, SissoError, ValidationError
from .expand import DEFAULT_MEMORY_BUDGET, FeatureSpace, build_space
from .expr import get_operators, to_string
from .parsing import evaluate_ast, linear_terms, parse, to_expression, variables
from .screen import ScreenConfig, prescreen
from .solve import (DEFAULT_COMBINATION_BUDGET, NoiseSpec, SparseModel, so_search, whiten_space,
                    whitening_matrix)


@dataclass(frozen=True)
class FitConfig:
    operators: tuple[str, ...] = ("+", "-", "*", "/")
    n_expansion: int = 3
    n_term: int = 3
    k: int = 20
    initial_screening: ScreenConfig | None = None
    dimensionality: tuple[str, ...] | None = None
    stop_rmse: float | None = None
    noise: NoiseSpec | None = None
    seed: int = 0
    combination_budget: int = DEFAULT_COMBINATION_BUDGET
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        if not self.operators:
            raise ValidationError("the operator list is empty", "cli")
        get_operators(self.operators)
        for name in ("n_expansion", "n_term", "k", "combination_budget", "memory_budget"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValidationError(f"{name} must be an integer >= 1", "cli")
        if self.initial_screening is not None:
            sc = ScreenConfig.parse(self.initial_screening)
            if not (sc.mode.startswith("mi") or sc.mode.startswith("spearman")):
                raise ValidationError("initial_screening must use an mi-* or spearman-* mode", "cli")
            object.__setattr__(self, "initial_screening", sc)
        if self.dimensionality is not None:
            object.__setattr__(self, "dimensionality", tuple(self.dimensionality))
        if self.noise is not None:
            object.__setattr__(self, "noise", NoiseSpec.from_json(self.noise))
        if self.stop_rmse is not None and not self.stop_rmse >= 0:
            raise ValidationError("stop_rmse must be >= 0", "cli")

    @classmethod
    def from_json(cls, obj: dict) -> "FitConfig":
        if not isinstance(obj, dict):
            raise ValidationError("config must be a JSON object", "cli")
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config fields {sorted(unknown)}", "cli")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "FitConfig":
        obj: dict = {}
        if path is not None:
            try:
                obj = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ParseError(f"config file {str(path)!r} not found", "cli") from None
            except json.JSONDecodeError as exc:
                raise ParseError(f"config is not valid JSON: {exc}", "cli") from None
        if not isinstance(obj, dict):
            raise ValidationError("config must be a JSON object", "cli")
        obj.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_json(obj)

    def to_json(self) -> dict:
        return {
            "operators": list(self.operators),
            "n_expansion": self.n_expansion,
            "n_term": self.n_term,
            "k": self.k,
            "initial_screening": None if self.initial_screening is None else self.initial_screening.to_json(),
            "dimensionality": None if self.dimensionality is None else list(self.dimensionality),
            "stop_rmse": self.stop_rmse,
            "noise": None if self.noise is None else self.noise.to_json(),
            "seed": self.seed,
            "combination_budget": self.combination_budget,
            "memory_budget": self.memory_budget,
        }


@dataclass
class FitReport:
    equation: str
    rmse: float
    r2: float
    per_level: list[tuple[int, float, int]]
    timing_ms: int
    config_echo: dict
    parity: list[tuple[float, float]]
    terms: list[dict] = field(default_factory=list)
    intercept: float = 0.0
    feature_names: list[str] = field(default_factory=list)
    fits_performed: int = 0
    space: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_level"] = [{"t": t, "best_rmse": r, "fits_performed": f} for t, r, f in self.per_level]
        out["parity"] = [[a, b] for a, b in self.parity]
        extra = out.pop("extra")
        out.update(extra)
        return _json_safe(out)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, allow_nan=False)

    @property
    def coefficients(self) -> list[float]:
        return [t["coefficient"] for t in self.terms]


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _units_for(ds: Dataset, cfg: FitConfig):
    if cfg.dimensionality is not None:
        if len(cfg.dimensionality) != ds.d:
            raise ValidationError(f"{len(cfg.dimensionality)} unit labels given for {ds.d} features", "cli")
        return parse_units(cfg.dimensionality)
    return ds.units


def prepare_space(ds: Dataset, cfg: FitConfig) -> tuple[FeatureSpace, list[int]]:
    """Optional pre-screening followed by expansion; returns the space and kept primaries."""
    keep = list(range(ds.d))
    if cfg.initial_screening is not None:
        keep = prescreen(ds.X, ds.y, cfg.initial_screening).tolist()
    units = _units_for(ds, cfg)
    names = [ds.feature_names[i] for i in keep]
    space = build_space(ds.X[:, keep], cfg.operators, cfg.n_expansion, names,
                        None if units is None else [units[i] for i in keep], cfg.memory_budget)
    return space, keep


def fit_model(ds: Dataset, cfg: FitConfig) -> tuple[SparseModel, FeatureSpace]:
    space, _ = prepare_space(ds, cfg)
    if cfg.noise is None:
        model = so_search(ds.y, space, cfg.k, cfg.n_term, cfg.stop_rmse,
                          combination_budget=cfg.combination_budget)
        return model, space
    w = whitening_matrix(cfg.noise, ds.n)
    model = so_search(w.apply(ds.y), whiten_space(space, w), cfg.k, cfg.n_term, cfg.stop_rmse,
                      base=w.base(ds.n), combination_budget=cfg.combination_budget)
    cols = space.values[list(model.feature_indices)].T
    return model.rescored(ds.y, cols), space


def build_report(ds: Dataset, cfg: FitConfig, model: SparseModel, space: FeatureSpace, ms: int) -> FitReport:
    return FitReport(
        equation=model.equation,
        rmse=model.rmse,
        r2=model.r2,
        per_level=[(h.t, h.best_rmse, h.fits_performed) for h in model.history],
        timing_ms=ms,
        config_echo=cfg.to_json(),
        parity=[(float(a), float(b)) for a, b in zip(ds.y, model.fitted)],
        terms=[{"expression": to_string(e), "key": e.key, "coefficient": c} for e, c in model.terms],
        intercept=model.intercept,
        feature_names=list(ds.feature_names),
        fits_performed=model.fits_performed,
        space=space.summary(),
    )


def run_fit(ds: Dataset, cfg: FitConfig) -> tuple[FitReport, SparseModel]:
    t0 = time.perf_counter()
    model, space = fit_model(ds, cfg)
    ms = int(round((time.perf_counter() - t0) * 1000))
    return build_report(ds, cfg, model, space, ms), model


def _write(path: str | Path | None, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text + ("" if text.endswith("\n") else "\n"))
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text + ("" if text.endswith("\n") else "\n"), encoding="utf-8")


def cmd_fit(data_path, config_path=None, out_path=None, overrides: dict | None = None) -> FitReport:
    cfg = FitConfig.load(config_path, overrides)
    ds = load_csv(data_path, list(cfg.dimensionality) if cfg.dimensionality else None)
    report, _ = run_fit(ds, cfg)
    _write(out_path, report.dumps())
    return report


def cmd_expand(data_path, config_path=None, out_path=None, list_path=None,
               overrides: dict | None = None) -> dict:
    cfg = FitConfig.load(config_path, overrides)
    ds = load_csv(data_path, list(cfg.dimensionality) if cfg.dimensionality else None)
    space, _ = prepare_space(ds, cfg)
    s = space.summary()
    summary = {k: s[k] for k in ("level", "D", "bound", "dropped_nonfinite", "dropped_duplicates")}
    _write(out_path, json.dumps(summary, indent=2))
    if list_path is not None:
        lines = [to_string(space.expression(i)) for i in range(space.D)]
        _write(list_path, "\n".join(lines))
    return summary


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _report_terms(report: dict) -> tuple[list[tuple[float, object]], float]:
    try:
        terms = [(float(t["coefficient"]), parse(t["expression"])) for t in report["terms"]]
        intercept = float(report["intercept"])
    except (KeyError, TypeError, ValueError):
        # fall back to the equation text
        try:
            terms, intercept = linear_terms(report["equation"])
        except KeyError:
            raise ValidationError("report has neither terms nor an equation", "cli") from None
    return terms, intercept


def predict_report(report: dict, X: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """``(y_pred, out_of_domain)`` for a stored model on feature matrix ``X``."""
    terms, intercept = _report_terms(report)
    env = {n: X[:, i] for i, n in enumerate(names)}
    y = np.full(X.shape[0], intercept)
    for c, node in terms:
        missing = variables(node) - set(names)
        if missing:
            raise ValidationError(f"data lacks features {sorted(missing)} used by the model", "cli")
        y = y + c * np.broadcast_to(evaluate_ast(node, env), (X.shape[0],))
    return y, ~np.isfinite(y)


def cmd_predict(report_path, data_path, out_path=None) -> np.ndarray:
    try:
        report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"report {str(report_path)!r} not found", "cli") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"report is not valid JSON: {exc}", "cli") from None
    names = report.get("feature_names")
    if not names:
        raise ValidationError("report does not list feature names", "cli")
    header, values = read_table(data_path)
    if header[1:] == names:
        X = values[:, 1:]
    elif header == names:
        X = values
    else:
        raise ValidationError(f"data columns {header} do not match the model features {names}", "cli")
    y_pred, bad = predict_report(report, X, names)
    rows = ["y_pred,out_of_domain"]
    rows += [f"{repr(float(v)) if ok else 'nan'},{int(b)}" for v, ok, b in zip(y_pred, ~bad, bad)]
    _write(out_path, "\n".join(rows))
    return y_pred


# ---------------------------------------------------------------------------
# Structural comparison
# ---------------------------------------------------------------------------


def _term_key(node, names) -> str | None:
    try:
        return to_expression(node, names).key
    except SissoError:
        return None


def structural_match(found_equation: str, ground_truth: str, rtol: float = 0.1,
                     probe: np.ndarray | None = None, names: Sequence[str] | None = None,
                     seed: int = 0) -> bool:
    """Whether two equations have the same term structure and close coefficients.

    Terms are compared after stripping numeric factors, by canonical key or,
    failing that, by exact proportionality on probe inputs. Coefficients of
    ``found_equation`` must share sign with, and lie within ``rtol`` of, the
    least-squares coefficients of the noiseless ground truth on the found
    terms. Intercepts are not compared. Each side is tried as written and
    with products multiplied out over sums, so ``q*(E + B*v)`` matches a
    two-term model. ``probe`` (rows x len(names)) defaults to 200 points
    uniform on [1, 5].
    """
    found_node = parse(found_equation)
    truth_node = parse(ground_truth)
    if names is None:
        names = sorted(variables(truth_node) | variables(found_node))
    names = list(names)
    if probe is None:
        probe = np.random.default_rng(seed).uniform(1.0, 5.0, (200, len(names)))
    env = {n: probe[:, i] for i, n in enumerate(names)}
    n = probe.shape[0]

    def ev(node):
        return np.broadcast_to(evaluate_ast(node, env), (n,)).astype(float)

    truth = ev(truth_node)
    for f_dist in (False, True):
        f_terms, _ = linear_terms(found_node, distribute=f_dist)
        for g_dist in (False, True):
            g_terms, _ = linear_terms(truth_node, distribute=g_dist)
            if _terms_match(f_terms, g_terms, truth, ev, names, rtol):
                return True
    return False


def _terms_match(f_terms, g_terms, truth, ev, names, rtol) -> bool:
    if len(f_terms) != len(g_terms) or not f_terms:
        return False
    F = np.column_stack([ev(b) for _, b in f_terms])
    G = np.column_stack([ev(b) for _, b in g_terms])
    ok = np.all(np.isfinite(F), axis=1) & np.all(np.isfinite(G), axis=1) & np.isfinite(truth)
    if ok.sum() < len(f_terms) + 2:
        return False
    F, G, y = F[ok], G[ok], truth[ok]

    f_keys = [_term_key(b, names) for _, b in f_terms]
    g_keys = [_term_key(b, names) for _, b in g_terms]
    used: set[int] = set()
    for j in range(len(g_terms)):
        match = None
        for i in range(len(f_terms)):
            if i in used:
                continue
            if f_keys[i] is not None and f_keys[i] == g_keys[j]:
                match = i
                break
            a, b = F[:, i], G[:, j]
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            if denom > 0 and abs(float(a @ b)) / denom > 1.0 - 1e-9:
                match = i
                break
        if match is None:
            return False
        used.add(match)

    # scale columns so the least-squares problem is well conditioned
    scale = np.abs(F).max(axis=0)
    scale[scale == 0] = 1.0
    A = np.column_stack([F / scale, np.ones(F.shape[0])])
    ref, *_ = np.linalg.lstsq(A, y, rcond=None)
    ref = ref[:-1] / scale
    for (c, _), r in zip(f_terms, ref):
        if r == 0 or np.sign(c) != np.sign(r) or abs(c - r) > rtol * abs(r):
            return False
    return True


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def benchmark_config(spec, seed: int = 0, **overrides) -> FitConfig:
    base = dict(operators=spec.operator_set, n_expansion=spec.n_expansion, n_term=spec.n_term, k=spec.k,
                dimensionality=spec.units, seed=seed)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return FitConfig(**base)


def run_benchmark(benchmark_id: str, seed: int = 0, **overrides) -> tuple[FitReport, SparseModel, dict]:
    """Generate, fit and score one registered benchmark."""
    spec = get_benchmark(benchmark_id)
    cfg = benchmark_config(spec, seed, **overrides)
    ds = generate(spec, seed)
    train, hold = (ds, None) if spec.train_fraction is None else split(ds, spec.train_fraction, seed)
    report, model = run_fit(train, cfg)
    probe = generate(replace(spec, n_samples=200, noise_sigma=0.0), seed + 1)
    match = structural_match(report.equation, spec.reference, probe=probe.X, names=spec.names)
    extra = {"benchmark": benchmark_id, "structural_match": match, "reference_equation": spec.reference}
    if hold is not None:
        pred = model.predict(hold.X)
        r = hold.y - pred
        extra["holdout"] = {"rmse": float(np.sqrt(np.mean(r**2))),
                            "parity": [[float(a), float(b)] for a, b in zip(hold.y, pred)]}
    report.extra.update(extra)
    return report, model, extra


def cmd_benchmark(benchmark_id: str, seed: int = 0, out_dir=None, **overrides) -> list[dict]:
    ids = list(REGISTRY) if benchmark_id == "all" else [benchmark_id]
    for b in ids:
        get_benchmark(b)
    rows = []
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for b in ids:
        report, _, extra = run_benchmark(b, seed, **overrides)
        rows.append({"id": b, "rmse": report.rmse, "r2": report.r2,
                     "structural_match": extra["structural_match"], "time_ms": report.timing_ms})
        if out is not None:
            (out / f"{b}.json").write_text(report.dumps() + "\n", encoding="utf-8")
        print(f"{b}: rmse={report.rmse:.3g} match={extra['structural_match']} "
              f"{report.timing_ms} ms  {report.equation}", file=sys.stderr)
    lines = ["id,rmse,r2,structural_match,time_ms"]
    lines += [f"{r['id']},{repr(float(r['rmse']))},{repr(float(r['r2']))},"
              f"{str(r['structural_match']).lower()},{r['time_ms']}" for r in rows]
    text = "\n".join(lines) + "\n"
    if out is not None:
        (out / "summary.csv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return rows


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _comma_list(text: str | None):
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with FitConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="features kept per screening round")
    p.add_argument("--n-expansion", type=int, help="feature expansion levels")
    p.add_argument("--n-term", type=int, help="maximum number of model terms")
    p.add_argument("--operators", help="comma separated operator tokens, e.g. '+,-,*,/,exp'")
    p.add_argument("--screening", help="'mi-quantile:0.5', 'mi-top-m:3', 'spearman-quantile:q' or 'sis-top-k:K'")
    p.add_argument("--units", help="comma separated unit labels, one per feature")
    p.add_argument("--stop-rmse", type=float)
    p.add_argument("--budget-combinations", type=int)
    p.add_argument("--budget-memory", type=int)


def _overrides(args) -> dict:
    out = {
        "seed": args.seed,
        "k": args.k,
        "n_expansion": args.n_expansion,
        "n_term": args.n_term,
        "operators": _comma_list(args.operators),
        "dimensionality": _comma_list(args.units),
        "stop_rmse": args.stop_rmse,
        "combination_budget": args.budget_combinations,
        "memory_budget": args.budget_memory,
    }
    if args.screening is not None:
        sc = ScreenConfig.parse(args.screening)
        if sc.mode == "sis-top-k":
            out["k"] = sc.k if args.k is None else args.k
        else:
            out["initial_screening"] = sc.to_json()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sisso", description="Symbolic regression by feature expansion, "
                                     "screening and exhaustive sparse fitting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a CSV file (first column is the target)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report path (default: stdout)")
    _add_config_flags(p)

    p = sub.add_parser("benchmark", help="run a registered benchmark or 'all'")
    p.add_argument("id", nargs="?", default="all")
    p.add_argument("--out", help="output directory for reports and summary.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int)
    p.add_argument("--list", action="store_true", help="list registered benchmark ids")

    p = sub.add_parser("expand", help="expand the primary features and summarise the space")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="summary JSON path (default: stdout)")
    p.add_argument("--expressions", help="also write every expression, one per line")
    _add_config_flags(p)

    p = sub.add_parser("predict", help="evaluate a fitted report on new data")
    p.add_argument("--model", required=True, help="report JSON written by 'fit'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="predictions CSV path (default: stdout)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            cmd_fit(args.data, args.config, args.out, _overrides(args))
        elif args.command == "expand":
            cmd_expand(args.data, args.config, args.out, args.expressions, _overrides(args))
        elif args.command == "predict":
            cmd_predict(args.model, args.data, args.out)
        elif args.list:
            print("\n".join(REGISTRY))
        else:
            cmd_benchmark(args.id, args.seed, args.out, k=args.k)
    except SissoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
