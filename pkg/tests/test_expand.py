from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisso.errors import SizingError
from sisso.expand import (
    SATURATED,
    build_space,
    count_bound,
    expand_level,
    initial_space,
    operator_counts,
    scaling_estimate,
)
from sisso.expr import Expression, UnitVector, get_operators


def _keys(space):
    return [space.key(i) for i in range(space.D)]


def _X(n=12, d=2, seed=0, low=1.0, high=5.0):
    return np.random.default_rng(seed).uniform(low, high, size=(n, d))


# --- worked example -----------------------------------------------------------


def test_worked_example_levels():
    s0 = initial_space(_X())
    s1 = expand_level(s0, ["+", "*"])
    assert sorted(_keys(s1)) == sorted(["x1", "x2", "+[x1,x2]", "*[x1,x2]"])
    s2 = expand_level(s1, ["+", "*"])
    assert s2.D == 14
    assert len(set(_keys(s2))) == 14


def test_empty_operator_set_carries_forward():
    s0 = initial_space(_X())
    s1 = expand_level(s0, [])
    assert _keys(s1) == _keys(s0)
    np.testing.assert_array_equal(s1.columns, s0.columns)


# --- bounds -------------------------------------------------------------------


def test_count_bound_examples():
    assert count_bound(2, 1, 2, 0) == 4
    assert count_bound(4, 1, 2, 0) == 16
    assert count_bound(7, 0, 0, 0) == 7


def test_count_bound_formula():
    # d + m_u' d + (m_bs/2 + m_bns) d (d - 1) with identity counted in m_u
    assert count_bound(5, 3, 2, 2) == 3 * 5 + 1 * 20 + 2 * 20


def test_scaling_estimate_examples():
    assert scaling_estimate(7, 3, 0) == 7
    assert scaling_estimate(2, 1, 2) == 16
    assert scaling_estimate(10, 2, 3) == 2**7 * 10**8
    assert scaling_estimate(1000, 10, 6) == SATURATED


_TOKENS = ["+", "-", "*", "/", "exp", "ln", "sqrt", "sin", "pow(2)", "pow(-1)", "abs"]


@settings(max_examples=120, deadline=None)
@given(
    ops=st.lists(st.sampled_from(_TOKENS), min_size=1, max_size=3, unique=True),
    d=st.integers(1, 5),
    levels=st.integers(1, 2),
    seed=st.integers(0, 10_000),
)
def test_bound_and_monotonicity(ops, d, levels, seed):
    operators = get_operators(ops)
    if levels == 2 and d * (1 + len(ops)) ** 2 > 60:
        levels = 1  # keep level 2 runs small
    space = initial_space(_X(n=8, d=d, seed=seed, low=-2.0, high=3.0))
    for _ in range(levels):
        m_u, m_bs, m_bns = operator_counts(operators)
        nxt = expand_level(space, operators)
        assert nxt.D <= count_bound(space.D, m_u, m_bs, m_bns)
        before = set(_keys(space))
        after = _keys(nxt)
        assert before <= set(after)
        assert len(set(after)) == len(after)
        assert np.all(np.isfinite(nxt.columns))
        space = nxt


# --- filters ------------------------------------------------------------------


def test_nonfinite_features_dropped():
    X = np.array([[-1.0], [2.0], [3.0]])
    s = expand_level(initial_space(X), ["ln", "sqrt"])
    assert _keys(s) == ["x1"]
    assert s.dropped_nonfinite == 2


def test_self_subtraction_never_appears():
    s = build_space(_X(d=2), ["-"], 2)
    cols = s.columns
    assert np.all(cols.std(axis=0) > 0)


def test_value_duplicates_keep_simplest():
    s = build_space(_X(d=1), ["sqrt", "pow(2)"], 2)
    keys = _keys(s)
    assert "pow(2)[sqrt[x1]]" not in keys and "sqrt[pow(2)[x1]]" not in keys
    assert "x1" in keys
    assert s.dropped_duplicates >= 2


def test_no_value_duplicate_columns():
    s = build_space(_X(n=15, d=3), ["+", "-", "*", "/", "pow(2)"], 2)
    Z = s.columns - s.columns.mean(axis=0)
    Z /= np.linalg.norm(Z, axis=0)
    C = np.abs(Z.T @ Z)
    np.fill_diagonal(C, 0)
    assert C.max() <= 1 - 1e-12


def test_scale_duplicate_removed():
    # x1/x2 and x2/x1 are not duplicates, but (x1/x2) is a scaled copy of x1 when x2 is constant
    X = np.column_stack([_X(d=1)[:, 0], np.full(12, 2.0)])
    s = expand_level(initial_space(X), ["/"])
    assert "/[x1,x2]" not in _keys(s)


# --- determinism --------------------------------------------------------------


def test_expansion_is_deterministic():
    X = _X(n=10, d=3)
    a = build_space(X, ["+", "*", "exp", "/"], 2)
    b = build_space(X.copy(), ["+", "*", "exp", "/"], 2)
    assert _keys(a) == _keys(b)
    assert a.columns.tobytes() == b.columns.tobytes()


def test_columns_match_direct_evaluation():
    from sisso.expr import evaluate

    X = _X(n=10, d=3)
    s = build_space(X, ["+", "/", "sqrt"], 2)
    for i in range(0, s.D, max(1, s.D // 40)):
        np.testing.assert_allclose(s.columns[:, i], evaluate(s.expression(i), X), rtol=1e-12)


# --- units --------------------------------------------------------------------


def test_units_prune_incompatible_sums():
    s = build_space(_X(d=2), ["+", "*"], 1, units=["u1", "u2"])
    assert sorted(_keys(s)) == ["*[x1,x2]", "x1", "x2"]


def test_unit_soundness_every_node():
    s = build_space(_X(n=10, d=3), ["+", "-", "*", "/", "sqrt", "exp"], 2, units=["u1", "u1", "u2"])
    assert s.units_enabled
    for i in range(s.D):
        e = s.expression(i)  # rebuilt through Expression.apply, which validates units at each node
        assert isinstance(e.unit, UnitVector)
        for sub in _subtrees(e):
            if sub.op is not None and sub.op.token == "exp":
                assert sub.children[0].unit.dimensionless


def _subtrees(e: Expression):
    yield e
    for c in e.children:
        yield from _subtrees(c)


def test_dimensionless_group_feeds_transcendentals():
    s = build_space(_X(d=2), ["/", "exp"], 2, units=["u1", "u1"])
    assert "exp[/[x1,x2]]" in _keys(s)
    assert "exp[x1]" not in _keys(s)


# --- budgets ------------------------------------------------------------------


def test_memory_budget_is_sizing_error():
    with pytest.raises(SizingError) as info:
        build_space(_X(d=5), ["+", "-", "*", "/"], 2, memory_budget=100)
    assert "bound" in str(info.value)


def test_summary_fields():
    s = build_space(_X(d=2), ["+", "*"], 2)
    summary = s.summary()
    assert {"level", "D", "bound", "dropped_nonfinite", "dropped_duplicates"} <= set(summary)
    assert summary["level"] == 2 and summary["D"] == 14 and summary["bound"] == 16
