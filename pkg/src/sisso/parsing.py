"""Parser for equation text.

Accepts the grammar that :func:`sisso.expr.to_string` prints, extended with
numeric literals, unary minus, ``^``/``**`` powers and ``log`` as an alias of
``ln`` so that ground-truth formulas can be written naturally, e.g.
``"3*exp(x1)/(x2+exp(x3))"`` or ``"x1*x2*x3*(ln(x4)-ln(x5))"``.

The parse result is a small AST of tuples:

* ``("num", value)``
* ``("var", name)``
* ``("neg", node)``
* ``("bin", op, left, right)`` with op in ``+ - * /``
* ``("pow", node, exponent)`` with a numeric exponent
* ``("call", token, node)`` for unary operators
"""

from __future__ import annotations

import math
import re
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .expr import Expression, UnitVector, get_operator

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)

_FUNCS = {"exp", "ln", "log", "sqrt", "cbrt", "sin", "cos", "abs"}


def _tokenize(text: str) -> list[tuple[str, str]]:
    out = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos:pos + 10]!r} at offset {pos}", "parse")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self, k: int = 0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else (None, None)

    def take(self, value: str | None = None):
        tok = self.peek()
        if tok[0] is None:
            raise ParseError(f"unexpected end of input in {self.text!r}", "parse")
        if value is not None and tok[1] != value:
            raise ParseError(f"expected {value!r} but found {tok[1]!r} in {self.text!r}", "parse")
        self.i += 1
        return tok

    def parse(self):
        node = self.sum()
        if self.peek()[0] is not None:
            raise ParseError(f"trailing input {self.peek()[1]!r} in {self.text!r}", "parse")
        return node

    def sum(self):
        node = self.product()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = ("bin", op, node, self.product())
        return node

    def product(self):
        # leading minus negates the whole product: -a*b/c == -(a*b/c)
        if self.peek()[1] == "-":
            self.take()
            return ("neg", self.product())
        if self.peek()[1] == "+":
            self.take()
            return self.product()
        node = self.power()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = ("bin", op, node, self.power())
        return node

    def power(self):
        node = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            sign = 1.0
            if self.peek()[1] == "-":
                self.take()
                sign = -1.0
            if self.peek()[1] == "(":
                self.take("(")
                expo = self.sum()
                self.take(")")
                value = _const_value(expo)
            else:
                kind, val = self.take()
                if kind != "num":
                    raise ParseError(f"power exponent must be numeric in {self.text!r}", "parse")
                value = float(val)
            node = ("pow", node, sign * value)
        return node

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return ("num", float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                return self.call(val)
            return ("var", val)
        if val == "(":
            node = self.sum()
            self.take(")")
            return node
        raise ParseError(f"unexpected token {val!r} in {self.text!r}", "parse")

    def call(self, name: str):
        self.take("(")
        if name == "pow":
            base = self.sum()
            self.take(",")
            expo = _const_value(self.sum())
            self.take(")")
            return ("pow", base, expo)
        arg = self.sum()
        self.take(")")
        if name == "log":
            name = "ln"
        if name not in _FUNCS:
            try:
                op = get_operator(name)
            except ValidationError:
                raise ParseError(f"unknown function {name!r} in {self.text!r}", "parse") from None
            if op.arity != 1:
                raise ParseError(f"function {name!r} is not unary", "parse")
        return ("call", name, arg)


def _const_value(node) -> float:
    if node[0] == "num":
        return node[1]
    if node[0] == "neg":
        return -_const_value(node[1])
    raise ParseError("exponent must be a numeric constant", "parse")


def parse(text: str):
    """Parse equation text into the tuple AST described in the module docstring."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty equation text", "parse")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# AST utilities
# ---------------------------------------------------------------------------


def variables(node) -> set[str]:
    tag = node[0]
    if tag == "var":
        return {node[1]}
    if tag == "num":
        return set()
    if tag in ("neg", "call"):
        return variables(node[-1])
    if tag == "pow":
        return variables(node[1])
    return variables(node[2]) | variables(node[3])


def evaluate_ast(node, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate with numpy; ``env`` maps variable names to columns."""
    with np.errstate(all="ignore"):
        return np.asarray(_ev(node, env), dtype=float)


def _ev(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        try:
            return np.asarray(env[node[1]], dtype=float)
        except KeyError:
            raise ValidationError(f"unknown variable {node[1]!r}", "parse") from None
    if tag == "neg":
        return -_ev(node[1], env)
    if tag == "pow":
        base = np.asarray(_ev(node[1], env), dtype=float)
        p = node[2]
        if float(p).is_integer():
            if p == -1:
                return get_operator("pow(-1)").fn(base)
            return np.power(base, p)
        if p == 0.5:
            return get_operator("sqrt").fn(base)
        return np.where(base >= 0, np.power(np.abs(base), p), np.nan)
    if tag == "call":
        return get_operator(node[1]).fn(np.asarray(_ev(node[2], env), dtype=float))
    op, a, b = node[1], _ev(node[2], env), _ev(node[3], env)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    return get_operator("/").fn(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def _is_const(node) -> bool:
    return not variables(node)


def to_expression(node, names: Sequence[str], units: Sequence[UnitVector] | None = None) -> Expression:
    """Convert a literal-free AST to a canonical Expression over ``names``.

    ``exp(-a)`` becomes the ``exp(-)`` operator and integer powers become
    ``pow(n)``; any other numeric literal is rejected.
    """
    index = {n: i for i, n in enumerate(names)}

    def conv(nd) -> Expression:
        tag = nd[0]
        if tag == "var":
            if nd[1] not in index:
                raise ValidationError(f"unknown feature name {nd[1]!r}", "parse")
            i = index[nd[1]]
            return Expression.primary(i, nd[1], units[i] if units is not None else None)
        if tag == "num":
            raise ValidationError("numeric literal inside a feature expression", "parse")
        if tag == "neg":
            raise ValidationError("negation inside a feature expression (only exp(-x) is allowed)", "parse")
        if tag == "pow":
            p = nd[2]
            if float(p).is_integer():
                return Expression.apply(f"pow({int(p)})", conv(nd[1]))
            if p == 0.5:
                return Expression.apply("sqrt", conv(nd[1]))
            if abs(p - 1.0 / 3.0) < 1e-15:
                return Expression.apply("cbrt", conv(nd[1]))
            raise ValidationError(f"unsupported power {p!r} in a feature expression", "parse")
        if tag == "call":
            if nd[1] == "exp" and nd[2][0] == "neg":
                return Expression.apply("exp(-)", conv(nd[2][1]))
            return Expression.apply(nd[1], conv(nd[2]))
        return Expression.apply(nd[1], conv(nd[2]), conv(nd[3]))

    return conv(node)


def split_terms(node) -> list[tuple[float, object]]:
    """Split a sum into ``(sign, term)`` pairs; constant terms keep their value as sign*1."""
    out: list[tuple[float, object]] = []

    def walk(nd, sign):
        if nd[0] == "bin" and nd[1] in ("+", "-"):
            walk(nd[2], sign)
            walk(nd[3], sign if nd[1] == "+" else -sign)
        elif nd[0] == "neg":
            walk(nd[1], -sign)
        else:
            out.append((sign, nd))

    walk(node, 1.0)
    return out


def _factors(nd, num: list, den: list, coef: list[float]):
    tag = nd[0]
    if tag == "bin" and nd[1] == "*":
        _factors(nd[2], num, den, coef)
        _factors(nd[3], num, den, coef)
    elif tag == "bin" and nd[1] == "/":
        _factors(nd[2], num, den, coef)
        sub_num: list = []
        sub_den: list = []
        sub_coef = [1.0]
        _factors(nd[3], sub_num, sub_den, sub_coef)
        den.extend(sub_num)
        num.extend(sub_den)
        coef[0] /= sub_coef[0]
    elif tag == "neg":
        coef[0] = -coef[0]
        _factors(nd[1], num, den, coef)
    elif _is_const(nd):
        coef[0] *= float(evaluate_ast(nd, {}))
    else:
        num.append(nd)


def strip_coefficient(term) -> tuple[float, object | None]:
    """Pull numeric factors out of a product: ``3*a/(2*b)`` -> (1.5, a/b).

    Returns ``(coef, None)`` for a pure constant.
    """
    num: list = []
    den: list = []
    coef = [1.0]
    _factors(term, num, den, coef)
    if not num and not den:
        return coef[0], None

    def prod(nodes):
        node = nodes[0]
        for n in nodes[1:]:
            node = ("bin", "*", node, n)
        return node

    if not num:
        body = ("pow", prod(den), -1.0)
    elif not den:
        body = prod(num)
    else:
        body = ("bin", "/", prod(num), prod(den))
    return coef[0], body


def distribute_terms(node) -> list[tuple[float, object]]:
    """Like :func:`split_terms` but multiplies products out over sums.

    ``q*(E + B*v)`` gives ``[(1, q*E), (1, q*(B*v))]``. Sums inside function
    calls or denominators are left alone.
    """
    tag = node[0]
    if tag == "bin" and node[1] in ("+", "-"):
        right = distribute_terms(node[3])
        if node[1] == "-":
            right = [(-s, t) for s, t in right]
        return distribute_terms(node[2]) + right
    if tag == "neg":
        return [(-s, t) for s, t in distribute_terms(node[1])]
    if tag == "bin" and node[1] == "*":
        return [(s1 * s2, ("bin", "*", a, b))
                for s1, a in distribute_terms(node[2]) for s2, b in distribute_terms(node[3])]
    if tag == "bin" and node[1] == "/":
        return [(s, ("bin", "/", a, node[3])) for s, a in distribute_terms(node[2])]
    return [(1.0, node)]


def linear_terms(text_or_node, distribute: bool = False) -> tuple[list[tuple[float, object]], float]:
    """Decompose an equation into ``[(coef, feature_ast), ...]`` and a constant.

    With ``distribute`` products are first multiplied out over sums.
    """
    node = parse(text_or_node) if isinstance(text_or_node, str) else text_or_node
    terms: list[tuple[float, object]] = []
    const = 0.0
    for sign, t in (distribute_terms(node) if distribute else split_terms(node)):
        c, body = strip_coefficient(t)
        if body is None:
            const += sign * c
        else:
            terms.append((sign * c, body))
    if not math.isfinite(const):
        raise ParseError("non-finite constant term", "parse")
    return terms, const
