import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slcf.learners import Linear, Mean, NeuralNet, RandomForest, default_library, fit, predict
from slcf.superlearner import cv_folds, fit_super_learner, simplex_nnls, sl_predict


def _objective(Z, y, W):
    # mean squared error of every weight row in W
    return np.mean((y[:, None] - Z @ W.T) ** 2, axis=0)


def _simplex_grid(m, step=1e-3):
    n = int(round(1 / step))
    if m == 1:
        return np.ones((1, 1))
    if m == 2:
        a = np.arange(n + 1) / n
        return np.column_stack([a, 1 - a])
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    a, b = i[keep] / n, j[keep] / n
    return np.column_stack([a, b, 1 - a - b])


def _assert_feasible(w):
    assert np.all(w >= -1e-12)
    assert abs(w.sum() - 1) <= 1e-10


def test_cv_folds_examples():
    assert sorted(cv_folds(10, 5, 0).sizes) == [2] * 5
    assert sorted(cv_folds(11, 5, 0).sizes) == [2, 2, 2, 2, 3]
    assert np.array_equal(cv_folds(37, 4, 9).fold, cv_folds(37, 4, 9).fold)
    with pytest.raises(ValueError):
        cv_folds(3, 5, 0)
    with pytest.raises(ValueError):
        cv_folds(10, 1, 0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 200), K=st.integers(2, 10), seed=st.integers(0, 2**32 - 1))
def test_cv_folds_balanced(n, K, seed):
    if n < K:
        return
    sizes = cv_folds(n, K, seed).sizes
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1


def test_simplex_nnls_examples():
    rng = np.random.default_rng(0)
    y = rng.normal(size=30)
    assert np.array_equal(simplex_nnls(y[:, None], y), [1.0])
    assert np.allclose(simplex_nnls(np.column_stack([y, -y]), y), [1, 0], atol=1e-12)
    e = rng.normal(size=30)
    e -= (e @ y) / (y @ y) * y
    w = simplex_nnls(np.column_stack([y + e, y - e]), y)
    assert np.allclose(w, [0.5, 0.5], atol=1e-10)
    grid = _simplex_grid(2)
    Z = np.column_stack([y + e, y - e])
    assert np.allclose(grid[np.argmin(_objective(Z, y, grid))], [0.5, 0.5])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 3), n=st.integers(5, 60), collinear=st.booleans())
def test_simplex_nnls_matches_grid(seed, m, n, collinear):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    Z = y[:, None] * rng.uniform(-1, 2, size=m) + rng.normal(size=(n, m)) * rng.uniform(0.1, 2, size=m)
    if collinear:
        Z[:, -1] = Z[:, 0]
    w = simplex_nnls(Z, y)
    _assert_feasible(w)
    grid = _simplex_grid(m)
    best = _objective(Z, y, grid).min()
    ours = _objective(Z, y, w[None, :])[0]
    assert ours <= best + 1e-10
    assert best - ours <= 1e-5 * max(1.0, best)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 8))
def test_simplex_nnls_kkt(seed, m):
    # optimality: no vertex direction can lower the objective
    rng = np.random.default_rng(seed)
    n = 50
    y = rng.normal(size=n)
    Z = y[:, None] + rng.normal(size=(n, m)) * rng.uniform(0.2, 3, size=m)
    w = simplex_nnls(Z, y)
    _assert_feasible(w)
    grad = Z.T @ (Z @ w - y)
    active = w > 1e-9
    lam = grad[active].mean()
    assert np.allclose(grad[active], lam, atol=1e-8 * max(1, np.abs(grad).max()))
    assert np.all(grad >= lam - 1e-8 * max(1, np.abs(grad).max()))


def test_single_learner_library():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 2))
    sl = fit_super_learner(X, rng.normal(size=20), [Mean()], K=5, seed=0)
    assert np.array_equal(sl.weights, [1.0])


def test_linear_vertex_on_exact_linear_data():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 2))
    y = 1 + 2 * X[:, 0] - X[:, 1]
    sl = fit_super_learner(X, y, [Mean(), Linear()], K=5, seed=3)
    assert abs(sl.weights[1] - 1) <= 1e-6
    _assert_feasible(sl.weights)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_risk_dominance_and_feasibility(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    y = np.abs(X[:, 0]) + X[:, 1] + 0.5 * rng.normal(size=80)
    specs = default_library(seed) + [RandomForest(n_trees=15, seed=seed)]
    sl = fit_super_learner(X, y, specs, K=5, seed=seed)
    _assert_feasible(sl.weights)
    risk = np.mean((y - sl.level_one @ sl.weights) ** 2)
    assert risk <= sl.cv_risks.min() + 1e-12
    assert np.allclose(sl.cv_risks, np.mean((y[:, None] - sl.level_one) ** 2, axis=0))


def test_grouped_folds_keep_units_together():
    rng = np.random.default_rng(4)
    groups = np.repeat(np.arange(15), 3)
    X = rng.normal(size=(45, 1))
    y = rng.normal(size=45)

    sl = fit_super_learner(X, y, [Mean(), Linear()], K=5, seed=1, groups=groups)
    # rows of one unit share their out-of-fold predictions from the Mean learner
    for g in range(15):
        col = sl.level_one[groups == g, 0]
        assert np.all(col == col[0])
    with pytest.raises(ValueError, match="at least 2K"):
        fit_super_learner(X, y, [Mean(), Linear()], K=5, groups=np.repeat(np.arange(9), 5))


def test_super_learner_determinism():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 2))
    y = np.sin(X[:, 0]) + rng.normal(size=50)
    a = fit_super_learner(X, y, default_library(1), K=5, seed=7)
    b = fit_super_learner(X, y, default_library(1), K=5, seed=7)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(sl_predict(a, X), sl_predict(b, X))


def test_degenerate_level_one_uses_uniform_weights():
    X = np.random.default_rng(6).normal(size=(20, 1))
    y = np.full(20, 2.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sl = fit_super_learner(X, y, [Mean(), Mean(seed=1)], K=5, seed=0)
    assert sl.degenerate
    assert np.allclose(sl.weights, 0.5)
    assert any("degenerate" in str(c.message) for c in caught)


def test_ols_meta_option():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(60, 2))
    y = 3 * X[:, 0] + rng.normal(size=60)
    sl = fit_super_learner(X, y, [Mean(), Linear()], K=5, seed=0, meta="ols")
    assert np.allclose(sl.weights, np.linalg.lstsq(sl.level_one, y, rcond=None)[0])
    with pytest.raises(ValueError):
        fit_super_learner(X, y, [Mean(), Linear()], meta="ridge")
    with pytest.raises(ValueError, match="empty"):
        fit_super_learner(X, y, [])


def test_sl_predict_properties():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 2))
    y = X[:, 0] + rng.normal(size=40)
    sl = fit_super_learner(X, y, [Linear(), NeuralNet(seed=1), Mean()], K=5, seed=0)
    Xt = rng.normal(size=(10, 2))
    base = np.column_stack([predict(m, Xt) for m in sl.base_models])
    assert np.allclose(sl_predict(sl, Xt), base @ sl.weights, atol=1e-12)
    first = type(sl)(sl.base_models, np.array([1.0, 0, 0]), sl.cv_risks, sl.level_one)
    assert np.array_equal(sl_predict(first, Xt), predict(sl.base_models[0], Xt))
    with pytest.warns(RuntimeWarning, match="degenerate"):
        const = fit_super_learner(X, np.full(40, 4.0), [Mean(), Linear()], K=5, seed=0)
    assert np.allclose(sl_predict(const, Xt), 4.0)
    with pytest.raises(ValueError):
        sl_predict(sl, np.zeros((3, 5)))


def test_base_models_refit_on_all_rows():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    sl = fit_super_learner(X, y, [Mean(), Linear()], K=5, seed=0)
    full = fit(Linear(), X, y)
    assert np.allclose(predict(sl.base_models[1], X), predict(full, X))
