"""Expressions over primary features: operators, physical units, canonical keys.

Trees never hold numeric constants. Scaling of a feature lives in the
regression coefficient that multiplies it, so ``2*(x1+x2)`` and ``x1+x2``
are the same feature as far as the search is concerned.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import StructuralError, ValidationError

DOMAIN_EPS = 1e-12

UNIT_RULES = ("add", "subtract", "scale", "equal", "dimensionless")


# ---------------------------------------------------------------------------
# Units
# ---------------------------------------------------------------------------


class UnitVector:
    """Dimensional signature: base-unit label -> rational exponent.

    Zero exponents are never stored, so ``UnitVector()`` is dimensionless
    and equality is plain map equality.
    """

    __slots__ = ("_items", "_hash")

    def __init__(self, exponents: Mapping[str, Fraction | int] | None = None):
        items = {}
        for label, power in (exponents or {}).items():
            power = Fraction(power)
            if power != 0:
                items[str(label)] = power
        self._items = tuple(sorted(items.items()))
        self._hash = hash(self._items)

    @classmethod
    def from_label(cls, label: str | None) -> "UnitVector":
        """``"u1"`` -> {u1: 1}; empty, ``"1"`` or None -> dimensionless."""
        if label is None:
            return cls()
        label = str(label).strip()
        if label in ("", "1", "-", "dimensionless"):
            return cls()
        return cls({label: 1})

    @property
    def exponents(self) -> dict[str, Fraction]:
        return dict(self._items)

    @property
    def dimensionless(self) -> bool:
        return not self._items

    def __mul__(self, other: "UnitVector") -> "UnitVector":
        out = dict(self._items)
        for k, v in other._items:
            out[k] = out.get(k, 0) + v
        return UnitVector(out)

    def __truediv__(self, other: "UnitVector") -> "UnitVector":
        out = dict(self._items)
        for k, v in other._items:
            out[k] = out.get(k, 0) - v
        return UnitVector(out)

    def __pow__(self, p: Fraction | int) -> "UnitVector":
        p = Fraction(p)
        return UnitVector({k: v * p for k, v in self._items})

    def __eq__(self, other: object) -> bool:
        return isinstance(other, UnitVector) and self._items == other._items

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        if not self._items:
            return "UnitVector()"
        body = ", ".join(f"{k}: {v}" for k, v in self._items)
        return f"UnitVector({{{body}}})"

    def to_json(self) -> dict[str, str]:
        return {k: str(v) for k, v in self._items}


DIMENSIONLESS = UnitVector()


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Operator:
    token: str
    arity: int
    fn: Callable = field(compare=False, repr=False)
    symmetric: bool = False
    unit_rule: str = "dimensionless"
    unit_power: Fraction = Fraction(1)
    flatten: bool = False
    value_domain: str = "all reals"

    def __post_init__(self):
        if self.arity not in (1, 2):
            raise ValidationError(f"operator {self.token!r}: arity must be 1 or 2", "expr")
        if self.unit_rule not in UNIT_RULES:
            raise ValidationError(f"operator {self.token!r}: unknown unit rule {self.unit_rule!r}", "expr")
        if self.arity == 1 and self.symmetric:
            raise ValidationError(f"operator {self.token!r}: unary operators cannot be symmetric", "expr")


def _div(a, b):
    with np.errstate(all="ignore"):
        out = np.divide(a, b)
    return np.where(np.abs(b) < DOMAIN_EPS, np.nan, out)


def _inv(a):
    with np.errstate(all="ignore"):
        out = np.divide(1.0, a)
    return np.where(np.abs(a) < DOMAIN_EPS, np.nan, out)


def _ln(a):
    with np.errstate(all="ignore"):
        out = np.log(np.where(a > 0, a, np.nan))
    return out


def _sqrt(a):
    with np.errstate(all="ignore"):
        return np.sqrt(np.where(a >= 0, a, np.nan))


def _quiet(f):
    def g(*args):
        with np.errstate(all="ignore"):
            return f(*args)

    return g


def _pow_fn(p: int):
    return _quiet(lambda a: np.power(a, float(p)))


_BUILTINS: list[Operator] = [
    Operator("+", 2, _quiet(np.add), symmetric=True, unit_rule="equal", flatten=True),
    Operator("-", 2, _quiet(np.subtract), unit_rule="equal"),
    Operator("*", 2, _quiet(np.multiply), symmetric=True, unit_rule="add", flatten=True),
    Operator("/", 2, _div, unit_rule="subtract", value_domain="|denominator| >= 1e-12"),
    Operator("exp", 1, _quiet(np.exp)),
    Operator("exp(-)", 1, _quiet(lambda a: np.exp(-a))),
    Operator("ln", 1, _ln, value_domain="x > 0"),
    Operator("sqrt", 1, _sqrt, unit_rule="scale", unit_power=Fraction(1, 2), value_domain="x >= 0"),
    Operator("cbrt", 1, _quiet(np.cbrt), unit_rule="scale", unit_power=Fraction(1, 3)),
    Operator("sin", 1, _quiet(np.sin)),
    Operator("cos", 1, _quiet(np.cos)),
    Operator("abs", 1, np.abs, unit_rule="scale", unit_power=Fraction(1)),
    Operator("pow(2)", 1, _pow_fn(2), unit_rule="scale", unit_power=Fraction(2)),
    Operator("pow(3)", 1, _pow_fn(3), unit_rule="scale", unit_power=Fraction(3)),
    Operator("pow(-1)", 1, _inv, unit_rule="scale", unit_power=Fraction(-1), value_domain="|x| >= 1e-12"),
]

_REGISTRY: dict[str, Operator] = {op.token: op for op in _BUILTINS}
BUILTIN_TOKENS: tuple[str, ...] = tuple(op.token for op in _BUILTINS)

_POW_RE = re.compile(r"^pow\((-?\d+)\)$")


def register_operator(
    token: str,
    arity: int,
    fn: Callable,
    *,
    symmetric: bool = False,
    unit_rule: str = "dimensionless",
    unit_power: Fraction | int = 1,
    value_domain: str = "user defined",
) -> Operator:
    """Add a custom operator. ``fn`` must be vectorised over numpy arrays."""
    if token in _REGISTRY:
        raise ValidationError(f"operator token {token!r} already registered", "expr")
    if not token or any(c in token for c in ",") or token in ("(", ")"):
        raise ValidationError(f"invalid operator token {token!r}", "expr")
    op = Operator(token, arity, _quiet(fn), symmetric=symmetric, unit_rule=unit_rule,
                  unit_power=Fraction(unit_power), value_domain=value_domain)
    _REGISTRY[token] = op
    return op


def unregister_operator(token: str) -> None:
    if token in BUILTIN_TOKENS:
        raise ValidationError(f"cannot remove built-in operator {token!r}", "expr")
    _REGISTRY.pop(token, None)


def get_operator(token: str) -> Operator:
    try:
        return _REGISTRY[token]
    except KeyError:
        pass
    m = _POW_RE.match(token)
    if m and int(m.group(1)) not in (0, 1):
        p = int(m.group(1))
        fn = _inv if p == -1 else _pow_fn(p)
        op = Operator(token, 1, fn, unit_rule="scale", unit_power=Fraction(p))
        _REGISTRY[token] = op
        return op
    raise ValidationError(f"unknown operator token {token!r}", "expr")


def get_operators(tokens: Iterable[str]) -> list[Operator]:
    ops = []
    seen = set()
    for tok in tokens:
        if tok in seen:
            raise ValidationError(f"duplicate operator token {tok!r}", "expr")
        seen.add(tok)
        ops.append(get_operator(tok))
    return ops


def derive_unit(op: Operator, child_units: Sequence[UnitVector]) -> UnitVector | None:
    """Output unit of ``op`` applied to ``child_units``; None means rejected."""
    if len(child_units) != op.arity and not (op.flatten and len(child_units) >= 2):
        raise StructuralError(
            f"operator {op.token!r} expects {op.arity} argument(s), got {len(child_units)}", "expr")
    rule = op.unit_rule
    if rule == "equal":
        first = child_units[0]
        return first if all(u == first for u in child_units[1:]) else None
    if rule == "add":
        return reduce(lambda a, b: a * b, child_units)
    if rule == "subtract":
        return child_units[0] / child_units[1]
    if rule == "scale":
        return child_units[0] ** op.unit_power
    # dimensionless in, dimensionless out
    return DIMENSIONLESS if all(u.dimensionless for u in child_units) else None


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------


class Expression:
    """Immutable canonical operator tree.

    Build with :meth:`primary` and :meth:`apply` (or :func:`canonicalize`);
    both flatten ``+``/``*`` chains and sort the arguments of symmetric
    operators, so equal keys mean equal trees up to commutativity and
    associativity of those two operators.
    """

    __slots__ = ("op", "children", "index", "name", "unit", "key", "complexity")

    def __init__(self, op, children, index, name, unit, key, complexity):
        self.op: Operator | None = op
        self.children: tuple[Expression, ...] = children
        self.index: int | None = index
        self.name: str | None = name
        self.unit: UnitVector = unit
        self.key: str = key
        self.complexity: int = complexity

    @classmethod
    def primary(cls, index: int, name: str | None = None, unit: UnitVector | None = None) -> "Expression":
        name = name if name is not None else f"x{index + 1}"
        return cls(None, (), int(index), name, unit or DIMENSIONLESS, name, 1)

    @classmethod
    def apply(cls, op: Operator | str, *children: "Expression") -> "Expression":
        if isinstance(op, str):
            op = get_operator(op)
        n = len(children)
        if n != op.arity and not (op.flatten and n >= 2):
            raise StructuralError(f"operator {op.token!r} expects {op.arity} argument(s), got {n}", "expr")
        kids: list[Expression] = []
        for c in children:
            if not isinstance(c, Expression):
                raise StructuralError(f"child of {op.token!r} is not an Expression: {c!r}", "expr")
            if op.flatten and c.op is op:
                kids.extend(c.children)
            else:
                kids.append(c)
        if op.symmetric:
            kids.sort(key=lambda e: (e.complexity, e.key))
        unit = derive_unit(op, [c.unit for c in kids])
        if unit is None:
            raise ValidationError(f"operator {op.token!r} rejects argument units "
                                  f"{[c.unit for c in kids]}", "expr")
        key = f"{op.token}[{','.join(c.key for c in kids)}]"
        return cls(op, tuple(kids), None, None, unit, key, 1 + sum(c.complexity for c in kids))

    @property
    def is_primary(self) -> bool:
        return self.op is None

    def primaries(self) -> set[int]:
        if self.op is None:
            return {self.index}
        return set().union(*(c.primaries() for c in self.children))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Expression) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"Expression({to_string(self)!r})"

    def __str__(self) -> str:
        return to_string(self)


def canonicalize(tree, names: Sequence[str] | None = None,
                 units: Sequence[UnitVector] | None = None) -> Expression:
    """Turn a raw tree into a canonical :class:`Expression`.

    Raw trees are nested tuples ``(token, child, ...)`` whose leaves are
    primary indices (``int``) or already-built expressions. Canonicalizing an
    ``Expression`` rebuilds it, which is idempotent.
    """
    if isinstance(tree, Expression):
        if tree.op is None:
            return tree
        return Expression.apply(tree.op, *(canonicalize(c) for c in tree.children))
    if isinstance(tree, (int, np.integer)):
        i = int(tree)
        name = names[i] if names is not None else None
        unit = units[i] if units is not None else None
        return Expression.primary(i, name, unit)
    if isinstance(tree, tuple) and tree and isinstance(tree[0], str):
        op = get_operator(tree[0])
        kids = [canonicalize(c, names, units) for c in tree[1:]]
        return Expression.apply(op, *kids)
    raise StructuralError(f"malformed expression tree: {tree!r}", "expr")


def evaluate(expr: Expression, X: np.ndarray) -> np.ndarray:
    """Evaluate ``expr`` row-wise on ``X`` (N x d). Out-of-domain rows give nan/inf."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return _eval(expr, X)


def _eval(expr: Expression, X: np.ndarray) -> np.ndarray:
    if expr.op is None:
        if expr.index >= X.shape[1]:
            raise StructuralError(f"primary feature index {expr.index} out of range for {X.shape[1]} columns", "expr")
        return X[:, expr.index].copy()
    vals = [_eval(c, X) for c in expr.children]
    if expr.op.arity == 1:
        return np.asarray(expr.op.fn(vals[0]), dtype=float)
    return np.asarray(reduce(expr.op.fn, vals), dtype=float)


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(e: Expression) -> int:
    if e.op is None or e.op.arity == 1 or e.op.token not in _PREC:
        return 3
    return _PREC[e.op.token]


def _infix(e: Expression) -> str:
    if e.op is None:
        return e.name
    tok = e.op.token
    if e.op.arity == 1:
        inner = _infix(e.children[0])
        if tok == "exp(-)":
            child = e.children[0]
            if child.op is not None and child.op.arity == 2:
                inner = f"({inner})"
            return f"exp(-{inner})"
        m = _POW_RE.match(tok)
        if m:
            return f"pow({inner},{m.group(1)})"
        return f"{tok}({inner})"
    if tok in _PREC:
        p = _PREC[tok]
        parts = []
        for pos, c in enumerate(e.children):
            s = _infix(c)
            cp = _prec(c)
            right = pos > 0
            need = cp < p or (right and tok in ("-", "/") and cp == p)
            parts.append(f"({s})" if need else s)
        return tok.join(parts)
    return f"{tok}({','.join(_infix(c) for c in e.children)})"


def format_coef(c: float) -> str:
    return repr(float(c))


def to_string(expr: Expression | Sequence[Expression], coeffs: Sequence[float] | None = None,
              intercept: float | None = None) -> str:
    """Infix text of one expression, or of a linear model when ``coeffs`` is given.

    >>> to_string([x1], [2.0], 0.5)  # doctest: +SKIP
    '2.0*(x1) + 0.5'
    """
    if coeffs is None and isinstance(expr, Expression):
        return _infix(expr)
    terms = [expr] if isinstance(expr, Expression) else list(expr)
    if coeffs is None:
        raise ValidationError("coefficients required to print a term list", "expr")
    if len(coeffs) != len(terms):
        raise ValidationError("one coefficient per term required", "expr")
    parts = [f"{format_coef(c)}*({_infix(t)})" for t, c in zip(terms, coeffs)]
    if intercept is not None and (intercept != 0.0 or not parts):
        parts.append(format_coef(intercept))
    if not parts:
        return "0.0"
    return " + ".join(parts)
