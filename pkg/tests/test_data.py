import math

import numpy as np
import pytest

from oracles import MNLL_UNIT, TOY_VALUES
from stride_dgp.data import (DataError, Dataset, kfold_split, load_csv, load_features, mnll,
                             smse, toy_dataset, toy_ground_truth, toy_truth_vector)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_csv_basic(tmp_path):
    ds = load_csv(write(tmp_path, "0,1\n1,2\n2,3\n"))
    assert (ds.n, ds.d) == (3, 1)
    np.testing.assert_array_equal(ds.y, [1, 2, 3])
    assert not ds.standardized


def test_load_csv_header_and_scientific(tmp_path):
    ds = load_csv(write(tmp_path, "a,b,target\n1e-3,2.5,-4E2\n"), has_header=True)
    np.testing.assert_array_equal(ds.X, [[1e-3, 2.5]])
    assert ds.y[0] == -400.0


@pytest.mark.parametrize("text, line", [("0,1\n1,NaN\n", 2), ("0,1\n1,2,3\n", 2), ("x,1\n", 1)])
def test_load_csv_rejects_bad_rows_with_line_number(tmp_path, text, line):
    with pytest.raises(DataError, match=f":{line}:"):
        load_csv(write(tmp_path, text))


def test_load_csv_empty_and_missing(tmp_path):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, ""))
    with pytest.raises(DataError):
        load_csv(write(tmp_path, "1\n2\n"))
    with pytest.raises(OSError):
        load_csv(tmp_path / "absent.csv")


def test_load_features_dimension(tmp_path):
    assert load_features(write(tmp_path, ""), 3).shape == (0, 3)
    with pytest.raises(DataError, match="expected 2 feature columns, got 3"):
        load_features(write(tmp_path, "1,2,3\n"), 2)


def test_kfold_singletons(rng):
    folds = kfold_split(10, 10, rng)
    assert sorted(int(te[0]) for _, te in folds) == list(range(10))
    assert all(len(te) == 1 and len(tr) == 9 for tr, te in folds)


def test_kfold_partition_and_balance(rng):
    folds = kfold_split(7, 3, rng)
    assert sorted(len(te) for _, te in folds) == [2, 2, 3]
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(7))
    for tr, te in folds:
        assert not set(tr) & set(te) and len(tr) + len(te) == 7


def test_kfold_deterministic_and_validated():
    a = kfold_split(23, 4, np.random.default_rng(3))
    b = kfold_split(23, 4, np.random.default_rng(3))
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        kfold_split(3, 4, np.random.default_rng(0))


def test_smse_examples(rng):
    y = rng.normal(size=9)
    assert smse(y, y) == 0.0
    assert smse(y, np.full(9, y.mean())) == pytest.approx(1.0)
    assert smse([0.0, 2.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ValueError):
        smse([1.0, 1.0], [0.0, 2.0])


def test_smse_affine_invariance(rng):
    y, p = rng.normal(size=20), rng.normal(size=20)
    assert smse(3.5 * y - 2.0, 3.5 * p - 2.0) == pytest.approx(smse(y, p), rel=1e-12)


def test_mnll_examples():
    assert mnll([0.0], [1.0], 1.0) == pytest.approx(MNLL_UNIT, rel=1e-14)
    y = np.array([0.3, -1.2])
    assert mnll(y, y, 0.04) == pytest.approx(0.5 * math.log(2 * math.pi * 0.04))
    assert mnll(y, y, 0.08) - mnll(y, y, 0.04) == pytest.approx(0.5 * math.log(2), rel=1e-12)
    with pytest.raises(ValueError):
        mnll(y, y, 0.0)


def test_toy_piecewise_branches():
    assert toy_ground_truth(0.7) == -1.0
    assert toy_ground_truth(0.8) == 1.0
    assert toy_ground_truth(0.95) == 0.0
    assert abs(toy_ground_truth(0.25)) < 1e-3
    with pytest.raises(ValueError):
        toy_ground_truth(1.01)


@pytest.mark.parametrize("x", sorted(TOY_VALUES))
def test_toy_matches_quadrature_oracle(x):
    assert toy_ground_truth(x) == pytest.approx(TOY_VALUES[x], abs=1e-6)


def test_toy_continuity_and_jumps():
    x = np.arange(0.0, 0.6 + 1e-12, 1e-4)
    v = toy_truth_vector(x)
    assert np.max(np.abs(np.diff(v))) < 1e-2
    assert toy_ground_truth(0.7501) - toy_ground_truth(0.75) == pytest.approx(2.0)
    assert toy_ground_truth(0.9) - toy_ground_truth(0.9001) == pytest.approx(1.0)


def test_toy_dataset_grid():
    ds = toy_dataset(0)
    assert ds.n == 200 and ds.X[0, 0] == 0.0 and ds.X[-1, 0] == 1.0
    resid = ds.y - toy_truth_vector(ds.X[:, 0])
    assert 0.015 < resid.std() < 0.025
    assert np.array_equal(toy_dataset(0).y, ds.y)


def test_standardize_round_trip(rng):
    ds = Dataset(rng.normal(3.0, 5.0, size=(40, 3)), rng.normal(-2.0, 7.0, size=40))
    st = ds.standardize()
    np.testing.assert_allclose(st.X.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(st.X.std(axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(st.destandardize_target(st.y), ds.y, rtol=1e-12)
    np.testing.assert_allclose(st.apply_features(ds.X), st.X, atol=1e-14)
    with pytest.raises(DataError):
        st.standardize()


def test_constant_column_warns(rng):
    X = np.column_stack([rng.normal(size=10), np.full(10, 4.0)])
    with pytest.warns(RuntimeWarning):
        st = Dataset(X, rng.normal(size=10)).standardize()
    assert st.feature_stds[1] == 1.0 and np.all(st.X[:, 1] == 0.0)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.ones((3, 1)), np.ones(2))
    with pytest.raises(DataError):
        Dataset(np.array([[np.inf]]), np.ones(1))
