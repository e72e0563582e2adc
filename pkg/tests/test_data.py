from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisso.data import (
    REGISTRY,
    BenchmarkSpec,
    Dataset,
    EmptyDataError,
    generate,
    get_benchmark,
    load_csv,
    split,
)
from sisso.errors import ParseError, ValidationError
from sisso.expr import UnitVector
from sisso.parsing import evaluate_ast, parse


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# --- CSV ----------------------------------------------------------------------------


def test_load_three_columns(tmp_path):
    rows = "\n".join(f"{i * 0.5},{i},{i * i}" for i in range(10))
    ds = load_csv(write(tmp_path, "y,a,b\n" + rows + "\n"))
    assert (ds.n, ds.d) == (10, 2)
    assert ds.feature_names == ["a", "b"]
    np.testing.assert_array_equal(ds.y, np.arange(10) * 0.5)


def test_units_shared_between_features(tmp_path):
    header = "y," + ",".join(f"f{i}" for i in range(5))
    body = "\n".join(",".join(str(float(i + j + 1)) for j in range(6)) for i in range(4))
    ds = load_csv(write(tmp_path, header + "\n" + body + "\n"), units=["u1", "u2", "u3", "u4", "u3"])
    assert ds.units[2] == ds.units[4] == UnitVector({"u3": 1})
    assert len(set(ds.units)) == 4


def test_units_length_mismatch(tmp_path):
    with pytest.raises(ValidationError):
        load_csv(write(tmp_path, "y,a,b\n1,2,3\n4,5,6\n"), units=["u1"])


def test_header_only_is_empty_data(tmp_path):
    with pytest.raises(EmptyDataError):
        load_csv(write(tmp_path, "y,a,b\n"))


def test_non_numeric_cell_reports_location(tmp_path):
    with pytest.raises(ParseError) as info:
        load_csv(write(tmp_path, "y,a\n1,2\n3,oops\n"))
    msg = str(info.value)
    assert "row 3" in msg and "column 2" in msg


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_csv(tmp_path / "absent.csv")


def test_csv_round_trip_is_bit_exact(tmp_path):
    ds = generate(get_benchmark("synthetic-01"), 3)
    p = tmp_path / "rt.csv"
    ds.to_csv(p)
    again = load_csv(p)
    assert again.y.tobytes() == ds.y.tobytes()
    assert again.X.tobytes() == ds.X.tobytes()


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        Dataset(y=[1.0], X=[[1.0]], feature_names=["a"])
    with pytest.raises(ValidationError):
        Dataset(y=[1.0, np.nan], X=[[1.0], [2.0]], feature_names=["a"])
    with pytest.raises(ValidationError):
        Dataset(y=[1.0, 2.0], X=[[1.0, 1.0], [2.0, 2.0]], feature_names=["a", "a"])


# --- generation ---------------------------------------------------------------------


def test_synthetic_case_one_shape():
    ds = generate(get_benchmark("synthetic-01"), 0)
    assert ds.X.shape == (10, 4)
    assert np.all((ds.X >= 1) & (ds.X <= 5))
    assert np.all(np.isfinite(ds.y))


@pytest.mark.parametrize("bid", list(REGISTRY))
def test_generation_is_deterministic(bid):
    spec = get_benchmark(bid)
    a, b = generate(spec, 7), generate(spec, 7)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert generate(spec, 8).X.tobytes() != a.X.tobytes()


def test_noiseless_target_equals_ground_truth():
    spec = get_benchmark("synthetic-10")
    ds = generate(spec, 0)
    x1, x2, x3 = ds.X.T
    np.testing.assert_array_equal(ds.y, ds.y_true)
    np.testing.assert_allclose(ds.y, np.exp(-x1 / (x3 * x2)), rtol=1e-15)


def test_noise_standard_deviation():
    spec = replace(get_benchmark("synthetic-04"), n_samples=100_000)
    ds = generate(spec, 0)
    assert abs(np.std(ds.y - ds.y_true, ddof=1) / 0.05 - 1) < 0.02


def test_kinetics_generation():
    spec = get_benchmark("kinetics-limited")
    ds = generate(spec, 0)
    assert ds.n == 100 and ds.feature_names == ["Ea", "RT"]
    assert np.all(ds.X[:, 0] == 185.0)
    T = ds.X[:, 1] / 8.314
    assert np.all((T >= 800) & (T <= 900))
    np.testing.assert_allclose(ds.y_true, 2.37 * np.sqrt(T) * np.exp(-185.0 / (8.314 * T)), rtol=1e-12)
    assert 0.07 < np.std(ds.y - ds.y_true) < 0.13


def test_resampling_avoids_poles():
    spec = BenchmarkSpec.from_json({**get_benchmark("synthetic-01").to_json(),
                                    "id": "pole", "ground_truth": "1/(x1-3)"})
    ds = generate(spec, 0)
    assert np.all(np.isfinite(ds.y))


# --- split -------------------------------------------------------------------------


def test_split_eighty_twenty():
    ds = generate(get_benchmark("kinetics-full"), 0)
    train, hold = split(ds, 0.8, 1)
    assert (train.n, hold.n) == (80, 20)


def test_split_two_rows():
    ds = Dataset(y=[1.0, 2.0], X=[[1.0], [2.0]], feature_names=["a"])
    train, hold = split(ds, 0.5, 0)
    assert (train.n, hold.n) == (1, 1)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 60), frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_is_a_partition(n, frac, seed):
    ds = Dataset(y=np.arange(n, dtype=float), X=np.arange(n, dtype=float)[:, None] * 2, feature_names=["a"])
    n_train = round(frac * n)
    if n_train < 1 or n_train > n - 1:
        with pytest.raises(ValidationError):
            split(ds, frac, seed)
        return
    a, b = split(ds, frac, seed)
    assert sorted(np.concatenate([a.y, b.y]).tolist()) == list(range(n))
    assert not set(a.y.tolist()) & set(b.y.tolist())
    a2, _ = split(ds, frac, seed)
    assert a2.y.tolist() == a.y.tolist()


@pytest.mark.parametrize("frac", [0.0, 1.0, 0.1])
def test_split_rejects_empty_part(frac):
    ds = Dataset(y=[1.0, 2.0, 3.0], X=[[1.0], [2.0], [3.0]], feature_names=["a"])
    with pytest.raises(ValidationError):
        split(ds, frac, 0)


# --- registry ---------------------------------------------------------------------------

SYNTHETIC_TRUTHS = [
    "10*x1/(x2*(x3+x4))",
    "2*sin(x2) + 3*sqrt(x1)",
    "3*exp(x1)/(x2+exp(x3))",
    "3*x3 + x2^2 + x1^3",
    "(x2+exp(x2))/(x1^2-x2^2)",
    "sqrt(x1^2+x2^2)",
    "sin(x1*x3) + 1.5*exp(-x1*x2)",
    "5*(x1*x3^2) + x1^3 + 3*(x1*x2^2)",
    "x1*x2*x3*(ln(x4)-ln(x5))",
    "exp(-x1/(x3*x2))",
]


def test_registry_ids():
    want = [f"synthetic-{i:02d}" for i in range(1, 11)] + [
        "distance", "particle-displacement", "relativistic-mass", "oscillation-amplitude",
        "kinetics-limited", "kinetics-full"]
    assert list(REGISTRY) == want


def test_registry_synthetic_truths():
    assert [REGISTRY[f"synthetic-{i:02d}"].ground_truth for i in range(1, 11)] == SYNTHETIC_TRUTHS


def test_registry_scientific_truths():
    assert REGISTRY["distance"].ground_truth == "(x0-x1)^2+(x2-x3)^2"
    assert REGISTRY["particle-displacement"].ground_truth == "q*(E + B*v*sin(theta))"
    assert REGISTRY["relativistic-mass"].ground_truth == "m0^2/(1-v^2/c^2)"
    assert REGISTRY["oscillation-amplitude"].ground_truth == "q*E/(m*(omega1^2-omega2^2))"


@pytest.mark.parametrize("bid", list(REGISTRY))
def test_ground_truth_parses_and_evaluates(bid):
    spec = REGISTRY[bid]
    ds = generate(spec, 0)
    env = dict(zip(ds.feature_names, ds.X.T))
    if spec.features is None:
        np.testing.assert_allclose(evaluate_ast(parse(spec.ground_truth), env), ds.y_true, rtol=1e-12)
    np.testing.assert_allclose(evaluate_ast(parse(spec.reference), env), ds.y_true, rtol=1e-12)


@pytest.mark.parametrize("bid", list(REGISTRY))
def test_spec_json_round_trip(bid):
    spec = REGISTRY[bid]
    assert BenchmarkSpec.from_json(spec.to_json()) == spec


def test_unknown_benchmark():
    with pytest.raises(ValidationError):
        get_benchmark("synthetic-11")
