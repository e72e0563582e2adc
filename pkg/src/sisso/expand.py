"""Recursive feature-space expansion with unit pruning and de-duplication.

A :class:`FeatureSpace` stores every feature as a node of a flat table
(operator index plus parent indices) next to its evaluated column, so that
spaces with millions of features never materialize millions of Python
objects. :class:`~sisso.expr.Expression` objects are built on demand.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import SizingError, ValidationError
from .expr import DIMENSIONLESS, Expression, Operator, UnitVector, derive_unit, get_operators

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET = 10**7
DUPLICATE_TOL = 1e-12  # |corr| > 1 - tol marks a value duplicate
CONSTANT_RTOL = 1e-10  # std <= rtol * max|value| marks a constant column
SATURATED = 2**63 - 1

_PROJ_EPS = 1.5e-6  # > sqrt(2 * DUPLICATE_TOL); projections of duplicates differ by less
_CHUNK_ELEMENTS = 2_000_000


def count_bound(d_prev: int, m_u: int, m_bs: int, m_bns: int) -> int:
    """Upper bound on the size of the next level.

    ``m_u`` counts unary operators *including* the identity (the implicit
    carry-forward of the previous level), ``m_bs``/``m_bns`` the symmetric and
    non-symmetric binary operators. The previous level is always carried, so
    the result is never below ``d_prev``.
    """
    if min(d_prev, m_u, m_bs, m_bns) < 0:
        raise ValidationError("count_bound arguments must be non-negative", "expand")
    pairs = d_prev * (d_prev - 1)
    return max(m_u, 1) * d_prev + m_bs * pairs // 2 + m_bns * pairs


def scaling_estimate(d: int, m_b_prime, l: int) -> int:
    """Rough size of level ``l``: ``m_b' ** (2**l - 1) * d ** (2**l)``, saturating."""
    if l < 0:
        raise ValidationError("expansion level must be >= 0", "expand")
    if l == 0:
        return int(d)
    m = Fraction(m_b_prime)
    if d == 0 or m == 0:
        return 0
    e = 2**l
    log10 = (e - 1) * math.log10(m) + e * math.log10(d) if d > 0 else -math.inf
    if log10 > 18.9:
        return SATURATED
    val = m ** (e - 1) * Fraction(d) ** e
    out = int(val + Fraction(1, 2))
    return min(out, SATURATED)


def operator_counts(ops: Sequence[Operator]) -> tuple[int, int, int]:
    """(unary incl. identity, symmetric binary, non-symmetric binary)."""
    m_u = 1 + sum(op.arity == 1 for op in ops)
    m_bs = sum(op.arity == 2 and op.symmetric for op in ops)
    m_bns = sum(op.arity == 2 and not op.symmetric for op in ops)
    return m_u, m_bs, m_bns


class _LazyExpressions(Sequence):
    def __init__(self, space: "FeatureSpace"):
        self._space = space

    def __len__(self):
        return len(self._space)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._space.expression(j) for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self._space.expression(i)


@dataclass(eq=False)
class FeatureSpace:
    """Expanded features and their training columns.

    ``values`` is stored feature-major (D x N); :attr:`columns` is the N x D
    view. Primary features are always kept, even when constant (a constant
    such as an activation energy still combines into useful features); the
    screening step ignores zero-variance columns.
    """

    names: tuple[str, ...]
    units: tuple[UnitVector, ...]
    units_enabled: bool
    operators: tuple[Operator, ...]
    values: np.ndarray
    node_op: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    unit_id: np.ndarray
    unit_table: list[UnitVector]
    complexity: np.ndarray
    level: int = 0
    n_older: int = 0
    expanded_with: frozenset = frozenset()
    dropped_nonfinite: int = 0
    dropped_duplicates: int = 0
    dropped_constant: int = 0
    bound: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def columns(self) -> np.ndarray:
        return self.values.T

    @property
    def expressions(self) -> Sequence[Expression]:
        return _LazyExpressions(self)

    def expression(self, i: int) -> Expression:
        i = int(i)
        cache = self._cache
        if i in cache:
            return cache[i]
        stack = [i]
        while stack:
            j = stack[-1]
            if j in cache:
                stack.pop()
                continue
            o = self.node_op[j]
            if o < 0:
                unit = self.units[j] if self.units_enabled else DIMENSIONLESS
                cache[j] = Expression.primary(j, self.names[j], unit)
                stack.pop()
                continue
            kids = [self.node_left[j]] if self.node_right[j] < 0 else [self.node_left[j], self.node_right[j]]
            missing = [k for k in kids if k not in cache]
            if missing:
                stack.extend(int(k) for k in missing)
                continue
            cache[j] = Expression.apply(self.operators[o], *(cache[k] for k in kids))
            stack.pop()
        return cache[i]

    def key(self, i: int) -> str:
        return self.expression(i).key

    def index_of(self, expr: Expression | str) -> int | None:
        key = expr.key if isinstance(expr, Expression) else expr
        for i in range(len(self)):
            if self.key(i) == key:
                return i
        return None

    def summary(self) -> dict:
        return {
            "level": self.level,
            "D": self.D,
            "bound": self.bound,
            "dropped_nonfinite": self.dropped_nonfinite,
            "dropped_duplicates": self.dropped_duplicates,
            "dropped_constant": self.dropped_constant,
        }


def initial_space(
    X: np.ndarray,
    names: Sequence[str] | None = None,
    units: Sequence[UnitVector | str | None] | None = None,
    units_enabled: bool | None = None,
) -> FeatureSpace:
    """Level-0 space holding the primary features."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValidationError("X must be a 2-D array", "expand")
    n, d = X.shape
    if not np.all(np.isfinite(X)):
        raise ValidationError("primary features must be finite", "expand")
    names = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(d))
    if len(names) != d or len(set(names)) != d:
        raise ValidationError("feature names must be unique, one per column", "expand")
    if units is None:
        uv = tuple(DIMENSIONLESS for _ in range(d))
        enabled = False if units_enabled is None else units_enabled
    else:
        if len(units) != d:
            raise ValidationError(f"{len(units)} units given for {d} features", "expand")
        uv = tuple(u if isinstance(u, UnitVector) else UnitVector.from_label(u) for u in units)
        enabled = True if units_enabled is None else units_enabled
    table: list[UnitVector] = []
    ids = []
    for u in uv if enabled else (DIMENSIONLESS,) * d:
        if u not in table:
            table.append(u)
        ids.append(table.index(u))
    minus = -np.ones(d, dtype=np.int64)
    return FeatureSpace(
        names=names, units=uv, units_enabled=enabled, operators=(),
        values=np.ascontiguousarray(X.T), node_op=minus.copy(), node_left=minus.copy(),
        node_right=minus.copy(), unit_id=np.array(ids, dtype=np.int64), unit_table=table,
        complexity=np.ones(d, dtype=np.int64), level=0, n_older=0, bound=d,
    )


def _projection_matrix(n: int) -> np.ndarray:
    g = np.random.default_rng(20240601).standard_normal((n, 3))
    g -= g.mean(axis=0)
    g /= np.linalg.norm(g, axis=0)
    return g


def _stats(vals: np.ndarray, G: np.ndarray):
    """Per-row: finite flag, constant flag, 3 projections of the standardized row."""
    finite = np.isfinite(vals).all(axis=1)
    safe = np.where(finite[:, None], vals, 0.0)
    maxabs = np.abs(safe).max(axis=1)
    # scale rows to max |value| 1 so squared norms cannot overflow
    safe = safe / np.where(maxabs > 0, maxabs, 1.0)[:, None]
    centered = safe - safe.mean(axis=1, keepdims=True)
    nrm = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    const = nrm <= CONSTANT_RTOL * math.sqrt(vals.shape[1])
    const |= nrm == 0
    with np.errstate(all="ignore"):
        proj = (centered @ G) / np.where(nrm > 0, nrm, 1.0)[:, None]
    return finite, const, proj


def _standardized(vals: np.ndarray) -> np.ndarray:
    m = np.abs(vals).max(axis=-1, keepdims=True)
    vals = vals / np.where(m > 0, m, 1.0)
    c = vals - vals.mean(axis=-1, keepdims=True)
    return c / np.linalg.norm(c, axis=-1, keepdims=True)


_PAIR_CHUNK = 50_000


def _duplicate_pairs(proj: np.ndarray, fetch) -> list[tuple[int, int]]:
    """Pairs linking every group of columns with |corr| > 1 - tol.

    Duplicates (up to sign) have |projection| values within ``_PROJ_EPS`` on
    every random direction, so sorting by the first projection and scanning
    a sliding window finds all of them; the exact correlation test then
    removes chance coincidences. Pairs already connected through earlier
    matches are skipped, so the result is a spanning set of the duplicate
    groups rather than every pair.
    """
    m = proj.shape[0]
    if m < 2:
        return []
    a = np.abs(proj)
    order = np.argsort(a[:, 0], kind="stable")
    s0 = a[order, 0]
    labels = np.arange(m)
    found: list[tuple[int, int]] = []
    active = np.arange(m - 1)
    shift = 1
    while active.size:
        active = active[active + shift < m]
        active = active[(s0[active + shift] - s0[active]) <= _PROJ_EPS]
        if not active.size:
            break
        lo = order[active]
        hi = order[active + shift]
        ok = ((np.abs(a[lo, 1] - a[hi, 1]) <= _PROJ_EPS) & (np.abs(a[lo, 2] - a[hi, 2]) <= _PROJ_EPS)
              & (labels[lo] != labels[hi]))
        lo, hi = lo[ok], hi[ok]
        new_lo, new_hi = [], []
        for s in range(0, lo.size, _PAIR_CHUNK):
            li, hj = lo[s:s + _PAIR_CHUNK], hi[s:s + _PAIR_CHUNK]
            corr = np.abs(np.einsum("ij,ij->i", _standardized(fetch(li)), _standardized(fetch(hj))))
            hit = corr > 1.0 - DUPLICATE_TOL
            new_lo.append(li[hit])
            new_hi.append(hj[hit])
        if new_lo:
            li, hj = np.concatenate(new_lo), np.concatenate(new_hi)
            if li.size:
                found.extend(zip(np.minimum(li, hj).tolist(), np.maximum(li, hj).tolist()))
                g = coo_matrix((np.ones(li.size), (labels[li], labels[hj])), shape=(m, m))
                _, comp = connected_components(g, directed=False)
                labels = comp[labels]
        shift += 1
    return found


def _candidate_pairs(op: Operator, space: FeatureSpace, start: int, unit_for) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Index pairs (or singles) for ``op`` grouped by output unit id."""
    D = len(space)
    groups: dict[int, np.ndarray] = {}
    for uid in np.unique(space.unit_id):
        groups[int(uid)] = np.flatnonzero(space.unit_id == uid)
    out = []
    if op.arity == 1:
        for ua, idx in groups.items():
            uo = unit_for(op, (ua,))
            if uo is None:
                continue
            idx = idx[idx >= start]
            if idx.size:
                out.append((idx, None, uo))
        return out
    for ua, ub in product(sorted(groups), repeat=2):
        if op.symmetric and ua > ub:
            continue
        uo = unit_for(op, (ua, ub))
        if uo is None:
            continue
        if op.symmetric and ua == ub:
            idx = groups[ua]
            iu, ju = np.triu_indices(idx.size, 1)
            I, J = idx[iu], idx[ju]
        elif op.symmetric:
            I, J = np.meshgrid(groups[ua], groups[ub], indexing="ij")
            I, J = np.minimum(I, J).ravel(), np.maximum(I, J).ravel()
        else:
            I, J = np.meshgrid(groups[ua], groups[ub], indexing="ij")
            I, J = I.ravel(), J.ravel()
            keep = I != J
            I, J = I[keep], J[keep]
        keep = np.maximum(I, J) >= start
        I, J = I[keep], J[keep]
        if I.size:
            out.append((I, J, uo))
    return out


def expand_level(
    prev: FeatureSpace,
    ops: Sequence[Operator | str],
    units_enabled: bool | None = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> FeatureSpace:
    """One application of every operator to every feature (unary) or pair of
    distinct features (binary), keeping prior features.

    New features are dropped when any training value is non-finite, when the
    column is constant, or when it duplicates (|corr| > 1 - 1e-12) a kept
    feature. Among mutually duplicate new features the lower complexity wins,
    ties broken by canonical key; existing features always win.
    """
    ops = [op if isinstance(op, Operator) else get_operators([op])[0] for op in ops]
    if units_enabled is not None and units_enabled != prev.units_enabled:
        prev = _with_units(prev, units_enabled)

    operators = list(prev.operators)
    for op in ops:
        if op not in operators:
            operators.append(op)
    op_index = {op.token: i for i, op in enumerate(operators)}

    D, N = prev.values.shape
    m_u, m_bs, m_bns = operator_counts(ops)
    bound = count_bound(D, m_u, m_bs, m_bns)

    unit_table = list(prev.unit_table)
    unit_lookup = {u: i for i, u in enumerate(unit_table)}
    derived: dict = {}

    def unit_for(op, uids):
        k = (op.token, uids)
        if k not in derived:
            if prev.units_enabled:
                u = derive_unit(op, [unit_table[i] for i in uids])
            else:
                u = DIMENSIONLESS
            if u is None:
                derived[k] = None
            else:
                if u not in unit_lookup:
                    unit_lookup[u] = len(unit_table)
                    unit_table.append(u)
                derived[k] = unit_lookup[u]
        return derived[k]

    # enumerate candidates
    plan = []  # (op, I, J or None, unit id)
    total = 0
    for op in ops:
        start = prev.n_older if op.token in prev.expanded_with else 0
        for I, J, uo in _candidate_pairs(op, prev, start, unit_for):
            plan.append((op, I, J, uo))
            total += I.size
    if D + total > memory_budget:
        raise SizingError(
            f"level {prev.level + 1} would hold up to {D + total:,} features "
            f"(count bound {bound:,}) which exceeds the memory budget of {memory_budget:,}; "
            "use initial screening, fewer operators or a lower expansion level", "expand")

    G = _projection_matrix(N)
    old_finite, old_const, old_proj = _stats(prev.values, G)
    new_vals: list[np.ndarray] = []
    new_meta: list[np.ndarray] = []  # columns: op, left, right, unit, complexity
    new_proj: list[np.ndarray] = []
    n_nonfinite = 0
    n_const = 0
    chunk = max(1, _CHUNK_ELEMENTS // max(N, 1))
    flat_ops = {op_index[op.token] for op in ops if op.flatten}
    for op, I, J, uo in plan:
        oi = op_index[op.token]
        for s in range(0, I.size, chunk):
            ii = I[s:s + chunk]
            if J is None:
                jj = np.full(ii.size, -1, dtype=np.int64)
                vals = np.asarray(op.fn(prev.values[ii]), dtype=float)
                comp = prev.complexity[ii] + 1
            else:
                jj = J[s:s + chunk]
                vals = np.asarray(op.fn(prev.values[ii], prev.values[jj]), dtype=float)
                comp = prev.complexity[ii] + prev.complexity[jj] + 1
                if oi in flat_ops:
                    comp = comp - (prev.node_op[ii] == oi) - (prev.node_op[jj] == oi)
            finite, const, proj = _stats(vals, G)
            n_nonfinite += int((~finite).sum())
            keep = finite & ~const
            n_const += int((finite & const).sum())
            if not keep.any():
                continue
            new_vals.append(vals[keep])
            meta = np.empty((int(keep.sum()), 5), dtype=np.int64)
            meta[:, 0] = oi
            meta[:, 1] = ii[keep]
            meta[:, 2] = jj[keep]
            meta[:, 3] = uo
            meta[:, 4] = comp[keep]
            new_meta.append(meta)
            new_proj.append(proj[keep])

    if new_vals:
        vals_new = np.concatenate(new_vals)
        meta_new = np.concatenate(new_meta)
        proj_new = np.concatenate(new_proj)
    else:
        vals_new = np.empty((0, N))
        meta_new = np.empty((0, 5), dtype=np.int64)
        proj_new = np.empty((0, 3))
    del new_vals, new_meta, new_proj

    # de-duplicate: pool = non-constant old features followed by new candidates
    old_ids = np.flatnonzero(old_finite & ~old_const)
    n_old = old_ids.size
    pool_proj = np.concatenate([old_proj[old_ids], proj_new])

    def fetch(p):
        p = np.asarray(p)
        out = np.empty((p.size, N))
        old = p < n_old
        out[old] = prev.values[old_ids[p[old]]]
        out[~old] = vals_new[p[~old] - n_old]
        return out

    pairs = _duplicate_pairs(pool_proj, fetch)
    drop = np.zeros(vals_new.shape[0], dtype=bool)
    if pairs:
        parent = {}

        def find(x):
            while parent.get(x, x) != x:
                parent[x] = parent.get(parent[x], parent[x])
                x = parent[x]
            return x

        for i, j in pairs:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        members: dict[int, list[int]] = {}
        for x in {p for pr in pairs for p in pr}:
            members.setdefault(find(x), []).append(x)
        cand_cache: dict[int, Expression] = {}

        def cand_key(p):
            c = p - n_old
            if c not in cand_cache:
                oi, l, r = meta_new[c, 0], meta_new[c, 1], meta_new[c, 2]
                kids = [prev.expression(l)] if r < 0 else [prev.expression(l), prev.expression(r)]
                cand_cache[c] = Expression.apply(operators[oi], *kids)
            return cand_cache[c].key

        for group in members.values():
            new = [p for p in group if p >= n_old]
            if not new:
                continue
            if len(new) < len(group):
                for p in new:
                    drop[p - n_old] = True
                continue
            best_c = min(meta_new[p - n_old, 4] for p in new)
            tied = [p for p in new if meta_new[p - n_old, 4] == best_c]
            winner = min(tied, key=cand_key) if len(tied) > 1 else tied[0]
            for p in new:
                if p != winner:
                    drop[p - n_old] = True
    keep = ~drop
    n_dup = int(drop.sum())
    vals_new = vals_new[keep]
    meta_new = meta_new[keep]

    values = np.empty((D + vals_new.shape[0], N))
    values[:D] = prev.values
    values[D:] = vals_new
    del vals_new
    space = FeatureSpace(
        names=prev.names, units=prev.units, units_enabled=prev.units_enabled,
        operators=tuple(operators), values=values,
        node_op=np.concatenate([prev.node_op, meta_new[:, 0]]),
        node_left=np.concatenate([prev.node_left, meta_new[:, 1]]),
        node_right=np.concatenate([prev.node_right, meta_new[:, 2]]),
        unit_id=np.concatenate([prev.unit_id, meta_new[:, 3]]),
        unit_table=unit_table,
        complexity=np.concatenate([prev.complexity, meta_new[:, 4]]),
        level=prev.level + 1, n_older=D, expanded_with=frozenset(op.token for op in ops),
        dropped_nonfinite=n_nonfinite, dropped_duplicates=n_dup, dropped_constant=n_const,
        bound=bound,
    )
    space._cache.update(prev._cache)
    log.debug("level %d: %d features (%d candidates, %d non-finite, %d constant, %d duplicates)",
              space.level, space.D, total, n_nonfinite, n_const, n_dup)
    return space


def _with_units(space: FeatureSpace, enabled: bool) -> FeatureSpace:
    if space.level != 0:
        raise ValidationError("units can only be toggled on a level-0 space", "expand")
    return initial_space(space.columns, space.names, space.units, units_enabled=enabled)


def build_space(
    X: np.ndarray,
    operators: Sequence[str | Operator],
    n_expansion: int,
    names: Sequence[str] | None = None,
    units: Sequence[UnitVector | str | None] | None = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> FeatureSpace:
    """Expand the primaries ``n_expansion`` times with the same operator set."""
    if n_expansion < 0:
        raise ValidationError("n_expansion must be >= 0", "expand")
    ops = [op if isinstance(op, Operator) else get_operators([op])[0] for op in operators]
    space = initial_space(X, names, units)
    for _ in range(n_expansion):
        space = expand_level(space, ops, memory_budget=memory_budget)
    return space
