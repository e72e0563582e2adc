"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class SissoError(Exception):
    exit_code = 1
    module = "sisso"

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self) -> str:
        return f"[{self.module}] {super().__str__()}"


class ParseError(SissoError):
    """Malformed input: CSV cells, expression strings, JSON."""

    exit_code = 2


class ValidationError(SissoError):
    """Inputs parse but violate a contract (unknown operator, bad shapes, ...)."""

    exit_code = 3


class StructuralError(ValidationError):
    """Expression tree whose arities do not match its operators."""


class SizingError(SissoError):
    """A feature-space or combination budget would be exceeded."""

    exit_code = 4


class DegeneracyError(SissoError):
    """Numerically degenerate problem (no usable features, constant target, ...)."""

    exit_code = 5
