"""Feature screening.

Sure independence screening ranks standardized columns by ``|phi_i . y|``.
Primary features can be pre-screened before expansion with a kernel-density
mutual-information estimate or with Spearman rank correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegeneracyError, ValidationError

MODES = ("sis-top-k", "sis-threshold", "mi-quantile", "mi-top-m", "spearman-quantile")
ZERO_VAR_RTOL = 1e-10
MI_GRID = 64
MI_MIN_SAMPLES = 20


@dataclass(frozen=True)
class ScreenConfig:
    mode: str = "sis-top-k"
    k: int = 20
    threshold: float | None = None
    quantile: float | None = None
    m: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown screening mode {self.mode!r}; expected one of {MODES}", "screen")
        if self.k < 1:
            raise ValidationError("k must be >= 1", "screen")
        if self.mode == "sis-threshold" and (self.threshold is None or not 0 <= self.threshold <= 1):
            raise ValidationError("sis-threshold needs a relative threshold in [0, 1]", "screen")
        if self.mode.endswith("quantile") and (self.quantile is None or not 0 < self.quantile < 1):
            raise ValidationError("quantile must lie in (0, 1)", "screen")
        if self.mode == "mi-top-m" and (self.m is None or self.m < 1):
            raise ValidationError("mi-top-m needs m >= 1", "screen")

    @classmethod
    def parse(cls, spec) -> "ScreenConfig":
        """Accept ``"mode:param"``, ``["mi", 0.01]`` / ``["spearman", q]``, or a dict."""
        if isinstance(spec, ScreenConfig):
            return spec
        if isinstance(spec, dict):
            return cls(**spec)
        if isinstance(spec, (list, tuple)) and len(spec) == 2:
            method, value = spec
            method = {"mi": "mi-quantile", "spearman": "spearman-quantile"}.get(method, method)
            return cls.parse(f"{method}:{value}")
        if isinstance(spec, str):
            mode, _, param = spec.partition(":")
            mode = mode.strip()
            try:
                if mode in ("mi-quantile", "spearman-quantile"):
                    return cls(mode=mode, quantile=float(param))
                if mode == "mi-top-m":
                    return cls(mode=mode, m=int(param))
                if mode == "sis-threshold":
                    return cls(mode=mode, threshold=float(param))
                if mode == "sis-top-k":
                    return cls(mode=mode, k=int(param) if param else 20)
            except ValueError:
                raise ValidationError(f"bad screening parameter in {spec!r}", "screen") from None
            raise ValidationError(f"unknown screening mode {mode!r}", "screen")
        raise ValidationError(f"cannot interpret screening spec {spec!r}", "screen")

    def to_json(self) -> dict:
        out = {"mode": self.mode}
        if self.mode == "sis-top-k":
            out["k"] = self.k
        if self.threshold is not None:
            out["threshold"] = self.threshold
        if self.quantile is not None:
            out["quantile"] = self.quantile
        if self.m is not None:
            out["m"] = self.m
        return out


# ---------------------------------------------------------------------------
# SIS
# ---------------------------------------------------------------------------


def zero_variance(columns: np.ndarray) -> np.ndarray:
    columns = np.asarray(columns, dtype=float)
    centered = columns - columns.mean(axis=0)
    spread = np.sqrt((centered**2).sum(axis=0))
    scale = np.abs(columns).max(axis=0)
    return spread <= ZERO_VAR_RTOL * math.sqrt(columns.shape[0]) * scale


def standardize(columns: np.ndarray):
    """Zero mean, unit sample standard deviation per column.

    Returns ``(Z, mean, scale, flagged)``; flagged (zero-variance) columns are
    left at zero in ``Z`` with scale 1 and must be excluded from screening.
    """
    columns = np.asarray(columns, dtype=float)
    if columns.ndim == 1:
        columns = columns[:, None]
    n = columns.shape[0]
    if n < 2:
        raise ValidationError("standardization needs at least 2 rows", "screen")
    flagged = zero_variance(columns)
    if flagged.all():
        raise DegeneracyError("every column has zero variance; nothing to screen", "screen")
    mean = columns.mean(axis=0)
    scale = columns.std(axis=0, ddof=1)
    scale = np.where(flagged, 1.0, scale)
    Z = (columns - mean) / scale
    Z[:, flagged] = 0.0
    return Z, mean, scale, flagged


def unstandardize(Z: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.asarray(Z) * scale + mean


def sis(y: np.ndarray, phi: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Indices of the ``min(k, D)`` columns with the largest ``|phi_i . y|``.

    ``phi`` must already be standardized. Ties go to the lower column index.
    ``exclude`` removes indices from consideration.
    """
    if k < 1:
        raise ValidationError("k must be >= 1", "screen")
    w = np.abs(np.asarray(phi, dtype=float).T @ np.asarray(y, dtype=float))
    return top_k(w, k, exclude)


def top_k(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    scores = np.asarray(scores, dtype=float).copy()
    valid = np.isfinite(scores)
    if exclude is not None:
        valid[np.asarray(list(exclude), dtype=np.int64)] = False
    idx = np.flatnonzero(valid)
    order = np.argsort(-scores[idx], kind="stable")
    return idx[order[:k]]


def sis_threshold(y: np.ndarray, phi: np.ndarray, threshold: float, exclude=None) -> np.ndarray:
    """Columns with ``|w_i| >= threshold * max_j |w_j|``, strongest first."""
    w = np.abs(np.asarray(phi, dtype=float).T @ np.asarray(y, dtype=float))
    valid = np.ones(w.size, dtype=bool)
    if exclude is not None:
        valid[np.asarray(list(exclude), dtype=np.int64)] = False
    if not valid.any():
        return np.empty(0, dtype=np.int64)
    cut = threshold * w[valid].max()
    idx = np.flatnonzero(valid & (w >= cut))
    return idx[np.argsort(-w[idx], kind="stable")]


# ---------------------------------------------------------------------------
# Mutual information
# ---------------------------------------------------------------------------


def mi_estimate(x: np.ndarray, y: np.ndarray, grid: int = MI_GRID) -> float:
    """Mutual information (nats) from a Gaussian KDE evaluated on a grid.

    The kernel covariance is the sample covariance scaled by Scott's factor
    ``n ** (-1/6)`` squared; the joint density is tabulated on a
    ``grid x grid`` lattice spanning each range padded by three kernel widths,
    normalised to a discrete distribution, and the MI is the KL divergence
    between it and the product of its marginals.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = x.size
    if y.size != n:
        raise ValidationError("x and y must have the same length", "screen")
    if n < MI_MIN_SAMPLES:
        raise ValidationError(f"mutual information needs at least {MI_MIN_SAMPLES} samples", "screen")
    if zero_variance(x[:, None])[0] or zero_variance(y[:, None])[0]:
        return 0.0
    data = np.vstack([x, y])
    cov = np.cov(data)
    factor = n ** (-1.0 / 6.0)
    kcov = cov * factor**2
    # keep the kernel invertible when x and y are (nearly) collinear
    kcov = kcov + np.diag(np.diag(kcov)) * 1e-10
    bw = np.sqrt(np.diag(kcov))
    gx = np.linspace(x.min() - 3 * bw[0], x.max() + 3 * bw[0], grid)
    gy = np.linspace(y.min() - 3 * bw[1], y.max() + 3 * bw[1], grid)
    inv = np.linalg.inv(kcov)
    dx = gx[:, None] - x[None, :]  # (grid, n)
    dy = gy[:, None] - y[None, :]
    a, b, c = inv[0, 0], inv[0, 1], inv[1, 1]
    cdy2 = c * dy**2  # (grid_y, n)
    joint = np.empty((grid, grid))
    for g in range(grid):
        q = a * dx[g] ** 2 + 2.0 * b * dx[g] * dy + cdy2
        joint[g] = np.exp(-0.5 * q).sum(axis=1)
    joint = np.maximum(joint, 0.0)
    total = joint.sum()
    if not total > 0:
        return 0.0
    p = joint / total
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    outer = px[:, None] * py[None, :]
    mask = p > 0
    mi = float(np.sum(p[mask] * np.log(p[mask] / outer[mask])))
    return max(mi, 0.0)


def spearman_abs(x: np.ndarray, y: np.ndarray) -> float:
    rx = rankdata(x)
    ry = rankdata(y)
    if zero_variance(rx[:, None])[0] or zero_variance(ry[:, None])[0]:
        return 0.0
    return float(abs(np.corrcoef(rx, ry)[0, 1]))


def _quantile_keep(scores: np.ndarray, quantile: float) -> np.ndarray:
    cut = np.quantile(scores, 1.0 - quantile)  # linear interpolation
    # ties at the cut are kept; tolerate round-off in the interpolation
    return np.flatnonzero(scores >= cut - 1e-12 * max(1.0, abs(cut)))


def prescreen(X: np.ndarray, y: np.ndarray, cfg: ScreenConfig) -> np.ndarray:
    """Indices of primary features surviving MI / Spearman pre-screening, ascending."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (cfg.mode.startswith("mi") or cfg.mode.startswith("spearman")):
        raise ValidationError(f"prescreen needs an mi-* or spearman-* mode, got {cfg.mode!r}", "screen")
    d = X.shape[1]
    if cfg.mode.startswith("mi"):
        scores = np.array([mi_estimate(X[:, j], y) for j in range(d)])
    else:
        scores = np.array([spearman_abs(X[:, j], y) for j in range(d)])
    if cfg.mode == "mi-top-m":
        keep = np.sort(top_k(scores, cfg.m))
    else:
        keep = _quantile_keep(scores, cfg.quantile)
    if keep.size == 0:
        raise ValidationError("initial screening kept no features; use a looser quantile", "screen")
    return keep


def prescreen_scores(X: np.ndarray, y: np.ndarray, method: str = "mi") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    f = mi_estimate if method == "mi" else spearman_abs
    return np.array([f(X[:, j], y) for j in range(X.shape[1])])
