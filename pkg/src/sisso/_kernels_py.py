"""Pure numpy implementation of the subset least-squares kernel.

Vectorised modified Gram-Schmidt over a batch of column subsets. Used when
the compiled extension is unavailable or ``SISSO_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np

DEGENERATE_TOL = 1e-10
_CHUNK_ELEMENTS = 4_000_000


def subset_residual_norms(Z: np.ndarray, y: np.ndarray, combos: np.ndarray):
    """Residual norm of the least-squares fit of ``y`` on each column subset.

    ``Z`` (K x N) holds unit-norm columns with the intercept direction already
    projected out, ``y`` likewise; ``combos`` is (B x t) of row indices into
    ``Z``. Returns ``(norms, degenerate)``; degenerate subsets report ``||y||``.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    combos = np.asarray(combos, dtype=np.int64)
    B, t = combos.shape
    N = y.shape[0]
    norms = np.empty(B)
    degenerate = np.zeros(B, dtype=bool)
    ynorm = float(np.sqrt(y @ y))
    if t == 0:
        norms[:] = ynorm
        return norms, degenerate
    step = max(1, _CHUNK_ELEMENTS // max(1, t * N))
    for s in range(0, B, step):
        idx = combos[s:s + step]
        Q = Z[idx]  # (b, t, N) copy
        deg = np.zeros(idx.shape[0], dtype=bool)
        r = np.broadcast_to(y, (idx.shape[0], N)).copy()
        for j in range(t):
            v = Q[:, j, :]
            for i in range(j):
                qi = Q[:, i, :]
                v -= np.einsum("bn,bn->b", qi, v)[:, None] * qi
            nv = np.sqrt(np.einsum("bn,bn->b", v, v))
            bad = nv < DEGENERATE_TOL
            deg |= bad
            v /= np.where(bad, 1.0, nv)[:, None]
            r -= np.einsum("bn,bn->b", v, r)[:, None] * v
        out = np.sqrt(np.einsum("bn,bn->b", r, r))
        out[deg] = ynorm
        norms[s:s + step] = out
        degenerate[s:s + step] = deg
    return norms, degenerate
