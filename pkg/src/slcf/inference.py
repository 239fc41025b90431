"""Least-squares solves and cluster-robust sandwich variances shared by all estimators.

Every estimator in the package works on *whitened* stacked rows, i.e. rows
premultiplied by ``L_i^{-1}`` where ``Vtilde_i = L_i L_i'``.  Weighted cross
products ``sum_i H_i' Vtilde_i^{-1} H_i`` then become plain cross products and
per-individual score contributions are sums of whitened rows within a cluster.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import norm

__all__ = [
    "RankDeficientError",
    "check_rank",
    "cluster_meat",
    "cluster_sandwich",
    "cluster_scores",
    "iv_solve",
    "ls_solve",
    "normal_ci",
    "sandwich",
]


class RankDeficientError(np.linalg.LinAlgError):
    """A design matrix does not have full column rank."""

    def __init__(self, message: str, columns: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.columns = tuple(columns)


def _names(p: int, names: Sequence[str] | None) -> list[str]:
    return list(names) if names is not None else [f"col{j}" for j in range(p)]


def check_rank(X: np.ndarray, names: Sequence[str] | None = None, what: str = "design matrix") -> None:
    """Raise :class:`RankDeficientError` naming the columns involved in a near-linear dependence."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    names = _names(p, names)
    if n < p:
        raise RankDeficientError(f"{what} has {n} rows for {p} columns", names)
    norms = np.linalg.norm(X, axis=0)
    zero = [names[j] for j in range(p) if norms[j] == 0.0]
    if zero:
        raise RankDeficientError(f"{what}: column(s) {zero} are identically zero", zero)
    # singular values of the column-normalized matrix are scale free
    _, s, vt = np.linalg.svd(X / norms, full_matrices=False)
    tol = max(n, p) * np.finfo(float).eps * s[0] * 1e3
    if s[-1] <= tol:
        v = np.abs(vt[-1])
        involved = [names[j] for j in range(p) if v[j] > 1e-6 * v.max()]
        raise RankDeficientError(f"{what} is rank deficient; collinear columns: {involved}", involved)


def ls_solve(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Least-squares coefficients of ``y`` on ``X`` after a rank check."""
    check_rank(X, names)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def iv_solve(Z: np.ndarray, X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Just- or over-identified linear IV: ``(X' P_Z X)^{-1} X' P_Z y``.

    For ``Z`` with as many columns as ``X`` this is ``(Z'X)^{-1} Z'y``.
    """
    check_rank(Z, None, "instrument matrix")
    if Z.shape[1] < X.shape[1]:
        raise RankDeficientError(f"{Z.shape[1]} instruments for {X.shape[1]} regressors")
    Xhat = Z @ np.linalg.lstsq(Z, X, rcond=None)[0]
    check_rank(Xhat, names, "projected regressor matrix")
    return np.linalg.solve(Xhat.T @ X, Xhat.T @ y)


def cluster_scores(Z: np.ndarray, e: np.ndarray, cluster: np.ndarray, n_clusters: int | None = None) -> np.ndarray:
    """Per-cluster sums ``s_g = sum_{r in g} Z_r e_r``, shape ``(G, p)``."""
    Z = np.asarray(Z, dtype=float)
    e = np.asarray(e, dtype=float).reshape(-1)
    cluster = np.asarray(cluster)
    _, inv = np.unique(cluster, return_inverse=True)
    G = int(inv.max()) + 1 if n_clusters is None else n_clusters
    out = np.zeros((G, Z.shape[1]))
    np.add.at(out, inv, Z * e[:, None])
    return out


def cluster_meat(Z: np.ndarray, e: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    """``sum_g s_g s_g'`` with ``s_g`` from :func:`cluster_scores`."""
    S = cluster_scores(Z, e, cluster)
    return S.T @ S


def sandwich(bread: np.ndarray, meat: np.ndarray) -> np.ndarray:
    """``bread^{-1} meat bread^{-T}``, symmetrized."""
    Binv = np.linalg.inv(bread)
    V = Binv @ meat @ Binv.T
    return 0.5 * (V + V.T)


def cluster_sandwich(Z: np.ndarray, X: np.ndarray, e: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    """Cluster-robust variance ``(Z'X)^{-1} [sum_g s_g s_g'] (Z'X)^{-T}`` of an estimating equation ``Z'(y - X b) = 0``.

    With ``Z = X`` this is the usual HC0 cluster sandwich for least squares.
    """
    return sandwich(Z.T @ X, cluster_meat(Z, e, cluster))


def normal_ci(theta: np.ndarray, se: np.ndarray, level: float = 0.95) -> np.ndarray:
    """Normal-approximation intervals ``theta +- q * se``; returns shape ``(p, 2)``."""
    q = norm.ppf(0.5 + level / 2.0)
    theta = np.asarray(theta, dtype=float)
    se = np.asarray(se, dtype=float)
    return np.column_stack([theta - q * se, theta + q * se])
