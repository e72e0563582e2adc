from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisso import kernels
from sisso.errors import SizingError, ValidationError
from sisso.expand import build_space
from sisso.solve import (
    NoiseSpec,
    SparseModel,
    batch_residuals,
    diagnostics,
    fit_subset,
    max_fits,
    so_search,
    whiten,
    whiten_space,
    whitening_matrix,
)


def lstsq_with_intercept(y, cols, weights=None):
    """Oracle: ordinary (or weighted) least squares with an explicit ones column."""
    A = np.column_stack([np.ones(len(y)), cols])
    if weights is not None:
        s = np.sqrt(weights)
        A, y = A * s[:, None], y * s
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    return beta[1:], beta[0]


def brute_force_l0(y, X, T):
    """Oracle: best subset over all subsets of size 1..T; larger models must be strictly better."""
    n = len(y)
    best = None
    for t in range(1, T + 1):
        level = None
        for sub in itertools.combinations(range(X.shape[1]), t):
            coef, c0 = lstsq_with_intercept(y, X[:, sub])
            rss = float(np.sum((y - c0 - X[:, sub] @ coef) ** 2))
            if level is None or rss < level[0]:
                level = (rss, sub, coef, c0)
        if best is None or level[0] < best[0]:
            best = level
    rss, sub, coef, c0 = best
    return sub, coef, c0, math.sqrt(rss / n)


# --- fit_subset -----------------------------------------------------------------


def test_fit_exact_line():
    x = np.linspace(0, 1, 12)
    fit = fit_subset(3 * x + 1, x[:, None])
    assert fit.coefficients[0] == pytest.approx(3, abs=1e-12)
    assert fit.intercept == pytest.approx(1, abs=1e-12)
    assert np.linalg.norm(fit.residual) < 1e-10
    assert not fit.degenerate


def test_fit_orthogonal_target():
    col = np.array([1.0, -1.0, 1.0, -1.0])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    assert abs(fit_subset(y, col[:, None]).coefficients[0]) < 1e-10


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.integers(1, 4))
def test_fit_matches_normal_equations(seed, t):
    rng = np.random.default_rng(seed)
    n = 20
    cols = rng.normal(size=(n, t)) * rng.uniform(0.1, 10, size=t)
    y = rng.normal(size=n)
    Ct = cols - cols.mean(axis=0)
    want = np.linalg.solve(Ct.T @ Ct, Ct.T @ (y - y.mean()))
    fit = fit_subset(y, cols)
    np.testing.assert_allclose(fit.coefficients, want, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(fit.intercept, y.mean() - cols.mean(axis=0) @ want, rtol=1e-8, atol=1e-10)
    # residual orthogonality for every centred selected column
    r = fit.residual
    for j in range(t):
        assert abs(Ct[:, j] @ r) <= 1e-8 * np.linalg.norm(Ct[:, j]) * np.linalg.norm(y)
    assert abs(r.sum()) <= 1e-8 * np.linalg.norm(y)


def test_fit_collinear_is_degenerate():
    x = np.arange(6.0)
    y = x**2
    fit = fit_subset(y, np.column_stack([x, 2 * x + 1]))
    assert fit.degenerate
    np.testing.assert_allclose(fit.residual, y - y.mean())


def test_fit_too_many_columns():
    with pytest.raises(ValidationError):
        fit_subset(np.arange(3.0), np.ones((3, 3)))


# --- batch_residuals ------------------------------------------------------------


def _sequential(y, phi, t):
    return [np.linalg.norm(fit_subset(y, phi[:, list(c)]).residual)
            for c in itertools.combinations(range(phi.shape[1]), t)]


def test_batch_single_feature():
    rng = np.random.default_rng(0)
    phi, y = rng.normal(size=(10, 3)), rng.normal(size=10)
    combos, norms, _ = batch_residuals(y, phi, 1)
    assert combos.tolist() == [[0], [1], [2]]
    np.testing.assert_allclose(norms, _sequential(y, phi, 1), atol=1e-10)


def test_batch_pairs_lexicographic():
    rng = np.random.default_rng(1)
    phi, y = rng.normal(size=(12, 6)), rng.normal(size=12)
    combos, norms, _ = batch_residuals(y, phi, 2)
    assert [tuple(c) for c in combos] == list(itertools.combinations(range(6), 2))
    np.testing.assert_allclose(norms, _sequential(y, phi, 2), atol=1e-10)


def test_batch_intercept_only():
    y = np.array([1.0, 4.0, 2.0, 7.0])
    _, norms, _ = batch_residuals(y, np.ones((4, 2)), 0)
    assert norms[0] == pytest.approx(np.linalg.norm(y - y.mean()), abs=1e-14)


def test_batch_budget():
    with pytest.raises(SizingError):
        batch_residuals(np.zeros(10), np.zeros((10, 8)), 3, budget=10)


def _kernel_list():
    out = [("python", kernels.python_subset_residual_norms)]
    compiled = kernels.compiled_subset_residual_norms()
    if compiled is not None:
        out.append(("cython", compiled))
    return out


@pytest.mark.parametrize("name,kernel", _kernel_list())
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), K=st.integers(1, 12), t=st.integers(1, 3), n=st.integers(5, 50))
def test_batch_equals_sequential(name, kernel, seed, K, t, n):
    t = min(t, K, n - 1)
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n, K)) * rng.uniform(0.1, 10, size=K)
    y = rng.normal(size=n) * 3
    _, norms, deg = batch_residuals(y, phi, t, kernel=kernel)
    seq = []
    for c in itertools.combinations(range(K), t):
        fit = fit_subset(y, phi[:, list(c)])
        seq.append(np.linalg.norm(fit.residual))
    np.testing.assert_allclose(norms, seq, rtol=0, atol=1e-10)


def test_compiled_kernel_agrees_with_python():
    compiled = kernels.compiled_subset_residual_norms()
    if compiled is None:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(9)
    phi, y = rng.normal(size=(30, 10)), rng.normal(size=30)
    for t in (1, 2, 3):
        _, a, da = batch_residuals(y, phi, t, kernel=compiled)
        _, b, db = batch_residuals(y, phi, t, kernel=kernels.python_subset_residual_norms)
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert (da == db).all()


# --- so_search ------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(8, 40), D=st.integers(2, 30), T=st.integers(1, 2))
def test_so_search_equals_brute_force(seed, n, D, T):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, D))
    true = rng.choice(D, size=min(T, D), replace=False)
    y = X[:, true] @ rng.uniform(1, 3, size=len(true)) + 0.5 * rng.normal(size=n)
    model = so_search(y, X, k=D, T=T)
    sub, coef, c0, rmse = brute_force_l0(y, X, T)
    assert tuple(model.feature_indices) == tuple(sub)
    np.testing.assert_allclose(model.coefficients, coef, rtol=0, atol=1e-8)
    assert model.intercept == pytest.approx(c0, abs=1e-8)
    assert model.rmse == pytest.approx(rmse, rel=1e-10)


def test_so_search_recovers_exponential_noiselessly():
    rng = np.random.default_rng(0)
    X = rng.uniform(1, 5, size=(10, 3))
    y = np.exp(-X[:, 0] / (X[:, 2] * X[:, 1]))
    space = build_space(X, ["*", "/", "exp(-)"], 3)
    model = so_search(y, space, k=20, T=1)
    # value dedup may keep either of the algebraically equal forms x1/(x2*x3), (x1/x2)/x3
    assert model.expressions[0].key in ("exp(-)[/[x1,*[x2,x3]]]", "exp(-)[/[/[x1,x2],x3]]")
    assert model.coefficients[0] == pytest.approx(1, abs=1e-10)
    assert model.rmse < 1e-12


def test_so_search_three_term_polynomial():
    rng = np.random.default_rng(3)
    X = rng.uniform(1, 5, size=(10, 3))
    y = 3 * X[:, 2] + X[:, 1] ** 2 + X[:, 0] ** 3 + rng.normal(0, 0.05, size=10)
    space = build_space(X, ["pow(2)", "pow(3)"], 1)
    model = so_search(y, space, k=20, T=3)
    keys = sorted(e.key for e in model.expressions)
    assert keys == sorted(["x3", "pow(2)[x2]", "pow(3)[x1]"])
    by_key = {e.key: c for e, c in model.terms}
    assert by_key["x3"] == pytest.approx(3, rel=0.1)
    assert by_key["pow(2)[x2]"] == pytest.approx(1, rel=0.1)
    assert by_key["pow(3)[x1]"] == pytest.approx(1, rel=0.1)


def test_so_search_single_feature_target():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(15, 6))
    model = so_search(2 * X[:, 4] - 1, X, k=3, T=3)
    assert model.t == 1 and model.feature_indices == (4,)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 6), T=st.integers(1, 3))
def test_fit_count_bound_and_monotone_history(seed, k, T):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 20))
    y = rng.normal(size=25)
    model = so_search(y, X, k=k, T=T)
    assert model.fits_performed <= max_fits(k, T)
    assert model.fits_performed == sum(h.fits_performed for h in model.history)
    assert model.rmse == min(h.best_rmse for h in model.history)
    assert model.rmse**2 * 25 == pytest.approx(float(np.sum((y - model.fitted) ** 2)), rel=1e-10)


def test_subspace_grows_by_k():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(30, 40))
    y = rng.normal(size=30)
    model = so_search(y, X, k=5, T=3)
    sizes = [len(s) for s in model.selected_subspace]
    assert sizes == [5, 10, 15]
    assert all(set(a) <= set(b) for a, b in zip(model.selected_subspace, model.selected_subspace[1:]))


def test_stop_rmse_halts_early():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 8))
    y = X[:, 1] + 0.01 * rng.normal(size=20)
    model = so_search(y, X, k=4, T=3, stop_rmse=0.1)
    assert len(model.history) == 1


def test_so_search_combination_budget():
    X = np.random.default_rng(7).normal(size=(30, 40))
    with pytest.raises(SizingError):
        so_search(X[:, 0], X, k=20, T=3, combination_budget=100)


def test_predict_matches_fitted():
    rng = np.random.default_rng(8)
    X = rng.uniform(1, 2, size=(12, 2))
    y = X[:, 0] / X[:, 1] + 0.3
    space = build_space(X, ["/"], 1)
    model = so_search(y, space, k=5, T=2)
    np.testing.assert_allclose(model.predict(X), model.fitted, atol=1e-12)


# --- whitening --------------------------------------------------------------------


def test_whitening_identity_is_no_op():
    rng = np.random.default_rng(10)
    X = rng.uniform(1, 5, size=(10, 3))
    y = X[:, 0] * X[:, 1] + 2 * X[:, 2] + rng.normal(0, 0.05, 10)
    space = build_space(X, ["+", "*", "/"], 2)
    plain = so_search(y, space, k=10, T=2)
    w = whitening_matrix(NoiseSpec("covariance", Sigma=np.eye(10)), 10)
    white = so_search(w.apply(y), whiten_space(space, w), k=10, T=2, base=w.base(10))
    assert [e.key for e in white.expressions] == [e.key for e in plain.expressions]
    assert white.coefficients.tolist() == plain.coefficients.tolist()
    assert white.intercept == plain.intercept


def test_whitening_isotropic_scaling():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(15, 6))
    y = X[:, 2] - X[:, 5] + 0.1 * rng.normal(size=15)
    sigma = 0.3
    wy, wphi, w = whiten(y, X, NoiseSpec("covariance", Sigma=sigma**2 * np.eye(15)))
    np.testing.assert_allclose(wy, y / sigma, rtol=1e-15)
    a = so_search(y, X, k=6, T=2)
    b = so_search(wy, wphi, k=6, T=2, base=w.base(15))
    assert a.feature_indices == b.feature_indices
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.integers(1, 3))
def test_diagonal_whitening_equals_weighted_least_squares(seed, t):
    rng = np.random.default_rng(seed)
    n = 20
    cols = rng.normal(size=(n, t))
    y = cols @ rng.normal(size=t) + rng.normal(size=n)
    var = rng.uniform(0.1, 4, size=n)
    wy, wphi, w = whiten(y, cols, NoiseSpec("covariance", Sigma=np.diag(var)))
    fit = fit_subset(wy, wphi, base=w.base(n))
    coef, c0 = lstsq_with_intercept(y, cols, weights=1 / var)
    np.testing.assert_allclose(fit.coefficients, coef, rtol=0, atol=1e-8)
    assert fit.intercept == pytest.approx(c0, abs=1e-8)


def test_whitened_noise_has_identity_covariance():
    rng = np.random.default_rng(12)
    n = 8
    A = rng.normal(size=(n, n))
    Sigma = A @ A.T + n * np.eye(n)
    eps = rng.multivariate_normal(np.zeros(n), Sigma, size=5000)
    w = whitening_matrix(NoiseSpec("covariance", Sigma=Sigma), n)
    C = np.cov((eps @ w.W.T).T)
    off = C - np.diag(np.diag(C))
    assert np.abs(off).max() < 0.1
    np.testing.assert_allclose(np.diag(C), 1, atol=0.1)
    np.testing.assert_allclose(w.W @ w.W_inv, np.eye(n), atol=1e-10)


@pytest.mark.parametrize("Sigma", [np.array([[1.0, 0.5], [0.4, 1.0]]), np.array([[1.0, 2.0], [2.0, 1.0]])])
def test_invalid_covariance_rejected(Sigma):
    with pytest.raises(ValidationError):
        NoiseSpec("covariance", Sigma=Sigma)


def test_noise_spec_json_round_trip():
    spec = NoiseSpec("covariance", Sigma=np.diag([1.0, 2.0]))
    again = NoiseSpec.from_json(spec.to_json())
    np.testing.assert_array_equal(again.Sigma, spec.Sigma)
    assert NoiseSpec.from_json({"kind": "iid", "sigma": 0.5}).sigma == 0.5


# --- diagnostics ------------------------------------------------------------------


def _model(fitted):
    return SparseModel(terms=(), intercept=0.0, rmse=0.0, r2=0.0, fitted=np.asarray(fitted, dtype=float))


def test_diagnostics_perfect_fit():
    y = np.array([1.0, 2.0, 5.0])
    assert diagnostics(_model(y), y) == (0.0, 1.0)


def test_diagnostics_intercept_only():
    y = np.array([1.0, 2.0, 5.0, 8.0])
    rmse, r2 = diagnostics(_model(np.full(4, y.mean())), y)
    assert abs(r2) < 1e-12
    assert rmse == pytest.approx(np.std(y))


def test_diagnostics_constant_target_flags_r2():
    rmse, r2 = diagnostics(_model([1.0, 1.0]), np.array([2.0, 2.0]))
    assert rmse == 1.0 and math.isnan(r2)
