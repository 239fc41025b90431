import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slcf.inference import (
    RankDeficientError,
    check_rank,
    cluster_sandwich,
    cluster_scores,
    iv_solve,
    ls_solve,
    normal_ci,
)


def _hc0_loop(X, e, cluster):
    # explicit loop oracle: (X'X)^{-1} sum_g X_g' e_g e_g' X_g (X'X)^{-1}
    A = np.linalg.inv(X.T @ X)
    meat = np.zeros((X.shape[1], X.shape[1]))
    for g in np.unique(cluster):
        s = X[cluster == g].T @ e[cluster == g]
        meat += np.outer(s, s)
    return A @ meat @ A


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), G=st.integers(3, 20), T=st.integers(1, 4))
def test_cluster_sandwich_matches_loop(seed, G, T):
    rng = np.random.default_rng(seed)
    cluster = np.repeat(np.arange(G), T)
    X = rng.normal(size=(G * T, 2))
    e = rng.normal(size=G * T)
    assert np.allclose(cluster_sandwich(X, X, e, cluster), _hc0_loop(X, e, cluster), rtol=1e-10, atol=1e-14)


def test_singleton_clusters_give_hc0():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    e = rng.normal(size=30)
    A = np.linalg.inv(X.T @ X)
    hc0 = A @ (X.T * e**2) @ X @ A
    assert np.allclose(cluster_sandwich(X, X, e, np.arange(30)), hc0, rtol=1e-12)


def test_row_permutation_invariance():
    rng = np.random.default_rng(1)
    cluster = np.repeat(np.arange(10), 3)
    X = rng.normal(size=(30, 2))
    e = rng.normal(size=30)
    perm = rng.permutation(30)
    a = cluster_sandwich(X, X, e, cluster)
    b = cluster_sandwich(X[perm], X[perm], e[perm], cluster[perm])
    assert np.allclose(a, b, rtol=1e-12)


def test_cluster_scores_labels_any_type():
    Z = np.ones((4, 1))
    e = np.array([1.0, 2.0, 3.0, 4.0])
    s = cluster_scores(Z, e, np.array(["b", "a", "b", "a"]))
    assert np.allclose(s[:, 0], [6.0, 4.0])


def test_rank_errors_name_columns():
    rng = np.random.default_rng(2)
    x = rng.normal(size=20)
    X = np.column_stack([x, rng.normal(size=20), 2 * x])
    with pytest.raises(RankDeficientError) as info:
        check_rank(X, ["a", "b", "c"])
    assert set(info.value.columns) == {"a", "c"}
    assert "collinear" in str(info.value)
    with pytest.raises(RankDeficientError) as info:
        check_rank(np.column_stack([x, np.zeros(20)]), ["x", "zero"])
    assert info.value.columns == ("zero",)
    with pytest.raises(RankDeficientError):
        check_rank(np.ones((2, 3)))
    # scale does not matter
    check_rank(np.column_stack([1e-8 * x, 1e8 * rng.normal(size=20)]))


def test_ls_and_iv_solves():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 2))
    y = X @ [1.0, -2.0] + 0.1 * rng.normal(size=50)
    assert np.allclose(ls_solve(X, y), np.linalg.solve(X.T @ X, X.T @ y))
    Z = X + rng.normal(size=(50, 2))
    assert np.allclose(iv_solve(Z, X, y), np.linalg.solve(Z.T @ X, Z.T @ y))
    # over-identified 2SLS
    Z3 = np.column_stack([Z, rng.normal(size=50)])
    P = Z3 @ np.linalg.pinv(Z3)
    assert np.allclose(iv_solve(Z3, X, y), np.linalg.solve(X.T @ P @ X, X.T @ P @ y))
    with pytest.raises(RankDeficientError):
        iv_solve(Z[:, :1], X, y)


def test_normal_ci():
    ci = normal_ci(np.array([1.0, 2.0]), np.array([0.5, 0.0]))
    assert np.allclose(ci[0], [1 - 1.959963984540054 * 0.5, 1 + 1.959963984540054 * 0.5])
    assert np.allclose(ci[1], [2.0, 2.0])
