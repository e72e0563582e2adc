"""Symbolic regression by recursive feature expansion, sure independence
screening and an exhaustive sparsifying-operator search."""

from __future__ import annotations

from .data import BenchmarkSpec, Dataset, REGISTRY, generate, load_csv, split
from .errors import DegeneracyError, ParseError, SissoError, SizingError, ValidationError
from .expand import FeatureSpace, build_space, count_bound, expand_level
from .expr import Expression, Operator, UnitVector, canonicalize, evaluate, register_operator, to_string
from .kernels import BACKEND
from .screen import ScreenConfig, mi_estimate, prescreen, sis, standardize
from .solve import NoiseSpec, SparseModel, batch_residuals, fit_subset, so_search, whiten

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BenchmarkSpec", "Dataset", "DegeneracyError", "Expression", "FeatureSpace", "NoiseSpec",
    "Operator", "ParseError", "REGISTRY", "ScreenConfig", "SissoError", "SizingError", "SparseModel",
    "UnitVector", "ValidationError", "batch_residuals", "build_space", "canonicalize", "count_bound",
    "evaluate", "expand_level", "fit_subset", "generate", "load_csv", "mi_estimate", "prescreen",
    "register_operator", "sis", "so_search", "split", "standardize", "to_string", "whiten",
]
