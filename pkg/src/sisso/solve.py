"""Sparsifying operator: exhaustive small-subset least squares guided by SIS.

For ``t = 1..T`` every ``t``-subset of the current screened set ``S_t`` is
fitted; the best residual then seeds the next SIS round, which adds ``k``
new features to ``S_t``. Intercepts are handled by projecting the target and
columns orthogonal to a base vector (all ones normally, ``W @ 1`` after
whitening) instead of screening a constant column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations, islice
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import DegeneracyError, SizingError, ValidationError
from .expand import FeatureSpace
from .expr import Expression, evaluate, to_string
from .screen import ZERO_VAR_RTOL, top_k

DEGENERATE_TOL = 1e-10
DEFAULT_COMBINATION_BUDGET = 10**7
TIE_RTOL = 1e-12
_COMBO_CHUNK = 200_000


class SubsetFit(NamedTuple):
    coefficients: np.ndarray
    intercept: float
    residual: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class LevelResult:
    t: int
    best_rmse: float
    fits_performed: int
    selected: tuple[int, ...]


@dataclass(frozen=True)
class SparseModel:
    """A fitted linear model over expanded features.

    ``rmse`` and ``r2`` refer to ``fitted`` (training predictions); the
    residual norm squared equals ``rmse**2 * n_samples``.
    """

    terms: tuple[tuple[Expression, float], ...]
    intercept: float
    rmse: float
    r2: float
    fitted: np.ndarray = field(repr=False)
    feature_indices: tuple[int, ...] = ()
    selected_subspace: tuple[tuple[int, ...], ...] = ()
    history: tuple[LevelResult, ...] = ()
    fits_performed: int = 0

    @property
    def t(self) -> int:
        return len(self.terms)

    @property
    def n_samples(self) -> int:
        return self.fitted.shape[0]

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([c for _, c in self.terms])

    @property
    def expressions(self) -> list[Expression]:
        return [e for e, _ in self.terms]

    @property
    def equation(self) -> str:
        return to_string(self.expressions, list(self.coefficients), self.intercept)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.intercept, dtype=float)
        for e, c in self.terms:
            out = out + c * evaluate(e, X)
        return out

    def rescored(self, y: np.ndarray, columns: np.ndarray) -> "SparseModel":
        """Recompute fitted values and diagnostics on ``columns`` (N x t, model order)."""
        y = np.asarray(y, dtype=float)
        fitted = self.intercept + np.asarray(columns, dtype=float) @ self.coefficients if self.terms \
            else np.full(y.shape[0], self.intercept)
        model = replace(self, fitted=fitted)
        rmse, r2 = diagnostics(model, y)
        return replace(model, rmse=rmse, r2=r2)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "iid"
    sigma: float | None = None
    Sigma: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "iid":
            if self.sigma is None or not self.sigma > 0:
                raise ValidationError("iid noise needs sigma > 0", "solve")
        elif self.kind == "covariance":
            if self.Sigma is None:
                raise ValidationError("covariance noise needs a Sigma matrix", "solve")
            S = np.asarray(self.Sigma, dtype=float)
            if S.ndim != 2 or S.shape[0] != S.shape[1]:
                raise ValidationError("Sigma must be square", "solve")
            if not np.all(np.isfinite(S)):
                raise ValidationError("Sigma must be finite", "solve")
            if np.max(np.abs(S - S.T)) > 1e-10:
                raise ValidationError("Sigma must be symmetric", "solve")
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise ValidationError("Sigma must be positive definite", "solve") from None
            if not np.all(np.diag(L) > 0):
                raise ValidationError("Sigma must be positive definite", "solve")
            object.__setattr__(self, "Sigma", S)
        else:
            raise ValidationError(f"unknown noise kind {self.kind!r}", "solve")

    @classmethod
    def from_json(cls, obj) -> "NoiseSpec":
        if isinstance(obj, NoiseSpec):
            return obj
        kind = obj.get("kind", "iid")
        if kind == "iid":
            return cls(kind, sigma=float(obj["sigma"]))
        return cls(kind, Sigma=np.asarray(obj["Sigma"], dtype=float))

    def to_json(self) -> dict:
        if self.kind == "iid":
            return {"kind": "iid", "sigma": self.sigma}
        return {"kind": "covariance", "Sigma": self.Sigma.tolist()}


class Whitener:
    """``W = Sigma^(-1/2)`` with its inverse, for mapping vectors both ways."""

    def __init__(self, W: np.ndarray, W_inv: np.ndarray):
        self.W = W
        self.W_inv = W_inv

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.W @ v

    def unapply(self, v: np.ndarray) -> np.ndarray:
        return self.W_inv @ v

    def base(self, n: int) -> np.ndarray:
        return self.W @ np.ones(n)


def whitening_matrix(noise: NoiseSpec, n: int) -> Whitener:
    if noise.kind == "iid":
        return Whitener(np.eye(n) / noise.sigma, np.eye(n) * noise.sigma)
    S = noise.Sigma
    if S.shape[0] != n:
        raise ValidationError(f"Sigma is {S.shape[0]}x{S.shape[0]} but there are {n} samples", "solve")
    off = S - np.diag(np.diag(S))
    if not off.any():
        d = np.sqrt(np.diag(S))
        return Whitener(np.diag(1.0 / d), np.diag(d))
    lam, V = np.linalg.eigh(S)
    if not np.all(lam > 0):
        raise ValidationError("Sigma must be positive definite", "solve")
    W = (V / np.sqrt(lam)) @ V.T
    W_inv = (V * np.sqrt(lam)) @ V.T
    return Whitener(W, W_inv)


def whiten(y: np.ndarray, phi: np.ndarray, noise: NoiseSpec):
    """Return ``(W y, W phi, whitener)`` for the given noise model."""
    y = np.asarray(y, dtype=float)
    phi = np.asarray(phi, dtype=float)
    w = whitening_matrix(noise, y.shape[0])
    return w.apply(y), w.W @ phi, w


def whiten_space(space: FeatureSpace, whitener: Whitener) -> FeatureSpace:
    """Copy of ``space`` whose columns are ``W @ column``."""
    return replace(space, values=space.values @ whitener.W.T, _cache=space._cache)


# ---------------------------------------------------------------------------
# Least squares
# ---------------------------------------------------------------------------


def _unit_base(base: np.ndarray | None, n: int) -> np.ndarray | None:
    if base is None:
        return None
    base = np.asarray(base, dtype=float)
    if base.shape != (n,):
        raise ValidationError("base vector must have one entry per sample", "solve")
    nb = np.linalg.norm(base)
    if not nb > 0:
        raise ValidationError("base vector must be non-zero", "solve")
    if np.all(base == base[0]):
        return None  # a constant base is plain centering
    return base / nb


def _project(a: np.ndarray, ubase: np.ndarray | None) -> np.ndarray:
    """Remove the intercept direction from a vector (N,) or rows of (m, N)."""
    if ubase is None:
        return a - a.mean(axis=-1, keepdims=True)
    return a - (a @ ubase)[..., None] * ubase if a.ndim > 1 else a - (a @ ubase) * ubase


def fit_subset(y: np.ndarray, cols: np.ndarray, base: np.ndarray | None = None) -> SubsetFit:
    """Least squares of ``y`` on ``cols`` (N x t) plus an intercept.

    The intercept multiplies ``base`` (default all ones). Columns are
    projected orthogonal to the base and scaled to unit norm before an
    orthogonal (QR) factorisation; a diagonal entry of R below 1e-10 marks the
    subset degenerate, in which case coefficients are zero and the residual is
    the projected target.
    """
    y = np.asarray(y, dtype=float)
    cols = np.asarray(cols, dtype=float)
    if cols.ndim == 1:
        cols = cols[:, None]
    n, t = cols.shape
    if y.shape != (n,):
        raise ValidationError("y and cols disagree on the number of samples", "solve")
    if t > n - 1:
        raise ValidationError(f"{t} columns cannot be fitted with an intercept on {n} samples", "solve")
    ub = _unit_base(base, n)
    b = np.ones(n) if base is None else np.asarray(base, dtype=float)
    bb = float(b @ b)
    yp = _project(y, ub)

    def degenerate():
        c0 = float(b @ y) / bb
        return SubsetFit(np.zeros(t), c0, y - c0 * b, True)

    if t == 0:
        return degenerate()._replace(degenerate=False)
    if not np.all(np.isfinite(cols)):
        return degenerate()
    P = _project(cols.T, ub)  # (t, N)
    norms = _row_norms(P)
    if np.any(norms == 0):
        return degenerate()
    Q, R = np.linalg.qr((P / norms[:, None]).T)
    if np.any(np.abs(np.diag(R)) < DEGENERATE_TOL):
        return degenerate()
    scaled = np.linalg.solve(R, Q.T @ yp) if t > 1 else np.array([(Q[:, 0] @ yp) / R[0, 0]])
    coef = scaled / norms
    partial = y - cols @ coef
    c0 = float(b @ partial) / bb
    return SubsetFit(coef, c0, partial - c0 * b, False)


def _row_norms(P: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, scaled first so values near 1e154 do not overflow."""
    pmax = np.abs(P).max(axis=1)
    safe = np.where(pmax > 0, pmax, 1.0)
    return pmax * np.linalg.norm(P / safe[:, None], axis=1)


def _normalized_block(V: np.ndarray, idx: Sequence[int], ubase) -> np.ndarray:
    P = _project(np.asarray(V[list(idx)], dtype=float), ubase)
    nrm = _row_norms(P)
    out = np.zeros_like(P)
    ok = nrm > 0
    out[ok] = P[ok] / nrm[ok, None]
    return out


def _combo_chunks(K: int, t: int):
    it = combinations(range(K), t)
    while True:
        block = list(islice(it, _COMBO_CHUNK))
        if not block:
            return
        yield np.array(block, dtype=np.int64).reshape(len(block), t)


def batch_residuals(
    y: np.ndarray,
    phi_sub: np.ndarray,
    t: int,
    base: np.ndarray | None = None,
    budget: int = DEFAULT_COMBINATION_BUDGET,
    kernel=None,
):
    """Residual norms of all ``C(K, t)`` column subsets of ``phi_sub`` (N x K).

    Returns ``(combos, norms, degenerate)`` in lexicographic combination
    order. Degenerate subsets carry the intercept-only residual norm.
    """
    y = np.asarray(y, dtype=float)
    phi_sub = np.asarray(phi_sub, dtype=float)
    if phi_sub.ndim == 1:
        phi_sub = phi_sub[:, None]
    n, K = phi_sub.shape
    if t < 0 or t > K:
        raise ValidationError(f"cannot choose {t} of {K} columns", "solve")
    n_comb = math.comb(K, t)
    if n_comb > budget:
        raise SizingError(f"C({K}, {t}) = {n_comb:,} subset fits exceed the combination budget "
                          f"of {budget:,}; use a smaller k or fewer terms", "solve")
    ub = _unit_base(base, n)
    kernel = kernel or kernels.subset_residual_norms
    Z = _normalized_block(phi_sub.T, range(K), ub)
    yp = _project(y, ub)
    if t == 0:
        return np.zeros((1, 0), dtype=np.int64), np.array([np.linalg.norm(yp)]), np.zeros(1, dtype=bool)
    combos, norms, deg = [], [], []
    for block in _combo_chunks(K, t):
        nb, db = kernel(Z, yp, block)
        combos.append(block)
        norms.append(nb)
        deg.append(db)
    return np.concatenate(combos), np.concatenate(norms), np.concatenate(deg).astype(bool)


def _best_subset(V, S, y_p, t, ubase, kernel):
    """Arg-min over all t-subsets of rows ``S`` of ``V``; first minimum wins."""
    Z = _normalized_block(V, S, ubase)
    best_norm = math.inf
    best_combo = None
    count = 0
    for block in _combo_chunks(len(S), t):
        norms, deg = kernel(Z, y_p, block)
        count += block.shape[0]
        norms = np.where(deg, np.inf, norms)
        i = int(np.argmin(norms))
        if norms[i] < best_norm:
            best_norm = float(norms[i])
            best_combo = block[i]
    return best_combo, best_norm, count


def feature_scales(V: np.ndarray, ubase=None, chunk: int = 100_000) -> np.ndarray:
    """Norm of each feature row after removing the intercept direction; 0 for constant rows."""
    D, n = V.shape
    out = np.empty(D)
    for s in range(0, D, chunk):
        block = np.asarray(V[s:s + chunk], dtype=float)
        P = _project(block, ubase)
        nrm = _row_norms(P)
        scale = np.abs(block).max(axis=1)
        nrm[nrm <= ZERO_VAR_RTOL * math.sqrt(n) * scale] = 0.0
        out[s:s + chunk] = nrm
    return out


def sis_scores(V: np.ndarray, r: np.ndarray, scales: np.ndarray, ubase=None, chunk: int = 100_000) -> np.ndarray:
    """``|corr|``-proportional SIS weights of every feature row against residual ``r``."""
    D = V.shape[0]
    r = _project(np.asarray(r, dtype=float), ubase)
    out = np.empty(D)
    for s in range(0, D, chunk):
        block = _project(np.asarray(V[s:s + chunk], dtype=float), ubase)
        out[s:s + chunk] = np.abs(block @ r)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(scales > 0, out / np.where(scales > 0, scales, 1.0), -np.inf)
    return out


def max_fits(k: int, T: int) -> int:
    return sum(math.comb(t * k, t) for t in range(1, T + 1))


def so_search(
    y: np.ndarray,
    space: FeatureSpace | np.ndarray,
    k: int = 20,
    T: int = 3,
    stop_rmse: float | None = None,
    *,
    base: np.ndarray | None = None,
    combination_budget: int = DEFAULT_COMBINATION_BUDGET,
    kernel=None,
) -> SparseModel:
    """Residual-guided best-subset search over ``space``.

    ``space`` is a :class:`FeatureSpace` or a plain N x D matrix (its columns
    are then treated as primaries ``x1..xD``). Returns the lowest-RMSE model
    over all term counts examined; smaller models win ties, where gains below
    ``TIE_RTOL`` times the target spread count as ties.
    """
    if k < 1 or T < 1:
        raise ValidationError("k and T must be >= 1", "solve")
    kernel = kernel or kernels.subset_residual_norms
    y = np.asarray(y, dtype=float)
    if isinstance(space, FeatureSpace):
        V = space.values
        expr_of = space.expression
    else:
        M = np.asarray(space, dtype=float)
        if M.ndim != 2:
            raise ValidationError("feature matrix must be 2-D", "solve")
        V = np.ascontiguousarray(M.T)
        expr_of = Expression.primary
    D, n = V.shape
    if D == 0:
        raise DegeneracyError("feature space is empty", "solve")
    if y.shape != (n,):
        raise ValidationError("target length does not match the feature space", "solve")
    ub = _unit_base(base, n)
    y_p = _project(y, ub)
    scales = feature_scales(V, ub)
    if not np.any(scales > 0):
        raise DegeneracyError("every feature has zero variance", "solve")
    n_valid = int(np.sum(scales > 0))
    tie_tol = TIE_RTOL * float(np.linalg.norm(y_p)) / math.sqrt(n)

    S = sorted(top_k(sis_scores(V, y_p, scales, ub), k).tolist())
    subspaces = [tuple(S)]
    history: list[LevelResult] = []
    best: tuple[float, SubsetFit, tuple[int, ...]] | None = None
    fits = 0
    for t in range(1, T + 1):
        if len(S) < t or t > n - 1:
            break
        n_comb = math.comb(len(S), t)
        if n_comb > combination_budget:
            raise SizingError(f"t={t}: C({len(S)}, {t}) = {n_comb:,} subset fits exceed the combination "
                              f"budget of {combination_budget:,}; use a smaller k or n_term", "solve")
        combo, _, count = _best_subset(V, S, y_p, t, ub, kernel)
        fits += count
        if combo is None:
            history.append(LevelResult(t, math.nan, count, ()))
            break
        sel = tuple(S[i] for i in combo)
        fit = fit_subset(y, V[list(sel)].T, base)
        rmse = float(np.linalg.norm(fit.residual) / math.sqrt(n))
        history.append(LevelResult(t, rmse, count, sel))
        # a larger model must improve by more than round-off to replace a smaller one
        if best is None or rmse < best[0] - tie_tol:
            best = (rmse, fit, sel)
        if stop_rmse is not None and rmse <= stop_rmse:
            break
        if t == T or len(S) >= n_valid:
            continue
        new = top_k(sis_scores(V, fit.residual, scales, ub), k, exclude=S)
        S = sorted(set(S) | set(new.tolist()))
        subspaces.append(tuple(S))
    if fits > max_fits(k, T):
        raise AssertionError(f"performed {fits} fits, above the bound {max_fits(k, T)}")
    if best is None:
        raise DegeneracyError("no non-degenerate model found", "solve")
    rmse, fit, sel = best
    terms = tuple((expr_of(i), float(c)) for i, c in zip(sel, fit.coefficients))
    fitted = y - fit.residual
    model = SparseModel(terms=terms, intercept=float(fit.intercept), rmse=rmse, r2=math.nan,
                        fitted=fitted, feature_indices=sel, selected_subspace=tuple(subspaces),
                        history=tuple(history), fits_performed=fits)
    if ub is None:
        _, r2 = diagnostics(model, y)
        model = replace(model, r2=r2)
    return model


def diagnostics(model: SparseModel, y: np.ndarray) -> tuple[float, float]:
    """``(rmse, r2)`` of the model's training predictions; r2 is nan for constant ``y``."""
    y = np.asarray(y, dtype=float)
    r = y - model.fitted
    n = y.shape[0]
    rss = float(r @ r)
    rmse = math.sqrt(rss / n)
    yc = y - y.mean()
    tss = float(yc @ yc)
    if tss <= (ZERO_VAR_RTOL * max(1.0, float(np.abs(y).max()))) ** 2 * n:
        return rmse, math.nan
    return rmse, 1.0 - rss / tss
