"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``SISSO_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
subset_residual_norms = _kernels_py.subset_residual_norms

if os.environ.get("SISSO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        subset_residual_norms = _compiled.subset_residual_norms
        BACKEND = "cython"

python_subset_residual_norms = _kernels_py.subset_residual_norms


def compiled_subset_residual_norms():
    """The compiled kernel, or None when the extension is not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels.subset_residual_norms
