"""Cross-validated stacking of base learners on the probability simplex."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from slcf.learners import FittedLearner, LearnerSpec, fit, predict, with_seed

__all__ = [
    "FoldAssignment",
    "SuperLearnerModel",
    "cv_folds",
    "fit_super_learner",
    "simplex_nnls",
    "sl_predict",
]


@dataclass(frozen=True)
class FoldAssignment:
    fold: np.ndarray  # fold index in [0, K) per unit
    K: int

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold == k)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold, minlength=self.K)


def cv_folds(n_units: int, K: int, seed: int | np.random.SeedSequence) -> FoldAssignment:
    """Seeded random partition of ``n_units`` into ``K`` folds whose sizes differ by at most one."""
    if K < 2:
        raise ValueError(f"need at least 2 folds, got K={K}")
    if n_units < K:
        raise ValueError(f"cannot split {n_units} units into {K} folds")
    perm = np.random.default_rng(seed).permutation(n_units)
    fold = np.empty(n_units, dtype=np.int64)
    fold[perm] = np.arange(n_units) % K
    return FoldAssignment(fold, K)


def simplex_nnls(Z: np.ndarray, y: np.ndarray, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Minimize ``||y - Z w||^2`` subject to ``w >= 0`` and ``sum(w) = 1``.

    Primal active-set method for the convex QP, started from the best single
    column.  Each iteration solves the equality-constrained problem on the free
    set through its KKT system; a least-squares solve keeps it well defined when
    columns are collinear.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise ValueError("Z must be a 2-d array with at least one column")
    m = Z.shape[1]
    if m == 1:
        return np.ones(1)
    # scale for conditioning; the minimizer is unchanged
    s = np.sqrt(np.mean(Z * Z)) or 1.0
    Q = (Z.T @ Z) / s**2
    c = (Z.T @ y) / s**2
    risks = np.sum((y[:, None] - Z) ** 2, axis=0)
    w = np.zeros(m)
    w[int(np.argmin(risks))] = 1.0
    free = w > 0
    scale = max(1.0, float(np.abs(Q).max()))
    for _ in range(max_iter):
        F = np.flatnonzero(free)
        k = F.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = Q[np.ix_(F, F)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([c[F], [1.0]])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        target = np.zeros(m)
        target[F] = sol[:k]
        # lstsq may drift off the constraint for singular blocks
        target[F] += (1.0 - target[F].sum()) / k
        if np.all(target[F] >= -tol):
            w = np.clip(target, 0.0, None)
            w /= w.sum()
            grad = Q @ w - c
            lam = float(np.mean(grad[F]))
            mu = grad - lam
            mu[F] = 0.0
            j = int(np.argmin(mu))
            if mu[j] >= -tol * scale:
                return w
            free[j] = True
            continue
        # step towards target until a free weight hits zero
        d = target - w
        blocking = F[d[F] < 0]
        ratios = w[blocking] / -d[blocking]
        t = float(ratios.min()) if ratios.size else 1.0
        t = min(max(t, 0.0), 1.0)
        w = w + t * d
        hit = blocking[np.isclose(ratios, ratios.min(), rtol=0, atol=1e-15)] if ratios.size else []
        w[hit] = 0.0
        w = np.clip(w, 0.0, None)
        w /= w.sum()
        free = w > 0
        if not free.any():  # pragma: no cover - cannot happen with sum(w) = 1
            free[int(np.argmin(risks))] = True
    warnings.warn("simplex_nnls reached max_iter", RuntimeWarning, stacklevel=2)
    return w


@dataclass(frozen=True)
class SuperLearnerModel:
    base_models: list[FittedLearner]
    weights: np.ndarray
    cv_risks: np.ndarray
    level_one: np.ndarray
    degenerate: bool = False

    @property
    def names(self) -> list[str]:
        return [m.spec.name for m in self.base_models]


def _learner_seed(spec_seed: int, sl_seed: int, learner: int, fold: int) -> int:
    ss = np.random.SeedSequence([int(spec_seed) & 0xFFFFFFFF, int(sl_seed) & 0xFFFFFFFF, learner, fold])
    return int(ss.generate_state(1)[0])


def fit_super_learner(
    X: np.ndarray,
    y: np.ndarray,
    specs: Sequence[LearnerSpec],
    K: int = 5,
    seed: int = 0,
    groups: np.ndarray | None = None,
    meta: str = "simplex",
) -> SuperLearnerModel:
    """Fit a super learner.

    Parameters
    ----------
    X, y : training features and target.
    specs : library of base learners.
    K : number of cross-validation folds.
    seed : controls the fold assignment and the base learners' seeds.
    groups : optional unit label per row; folds are then formed over units so
        all rows of a unit fall in the same fold.
    meta : ``"simplex"`` (convex weights) or ``"ols"`` (unconstrained least
        squares of the target on the level-one matrix, no intercept).

    A single-learner library skips cross-validation entirely: its weight is 1,
    and ``cv_risks`` and ``level_one`` are NaN.

    Returns
    -------
    SuperLearnerModel
        Base learners refit on all rows, simplex weights minimizing the
        cross-validated squared error of the level-one matrix.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    specs = list(specs)
    if not specs:
        raise ValueError("the super learner library is empty")
    if meta not in ("simplex", "ols"):
        raise ValueError(f"meta must be 'simplex' or 'ols', got {meta!r}")
    n = X.shape[0]
    m = len(specs)
    if m == 1:
        base = [fit(with_seed(specs[0], _learner_seed(specs[0].seed, seed, 0, K)), X, y)]
        return SuperLearnerModel(base, np.ones(1), np.full(1, np.nan), np.full((n, 1), np.nan))
    if groups is None:
        unit_of_row = np.arange(n)
        n_units = n
    else:
        _, unit_of_row = np.unique(np.asarray(groups), return_inverse=True)
        n_units = int(unit_of_row.max()) + 1
    if n_units < 2 * K:
        raise ValueError(f"super learner needs at least 2K={2 * K} units, got {n_units}")
    folds = cv_folds(n_units, K, seed)
    row_fold = folds.fold[unit_of_row]
    Z = np.empty((n, m))
    for k in range(K):
        test = row_fold == k
        train = ~test
        for j, spec in enumerate(specs):
            model = fit(with_seed(spec, _learner_seed(spec.seed, seed, j, k)), X[train], y[train])
            Z[test, j] = predict(model, X[test])
    cv_risks = np.mean((y[:, None] - Z) ** 2, axis=0)
    degenerate = m > 1 and bool(np.all(np.ptp(Z, axis=0) == 0) and np.all(Z == Z[:, :1]))
    if degenerate:
        warnings.warn("degenerate level-one matrix; using uniform weights", RuntimeWarning, stacklevel=2)
        weights = np.full(m, 1.0 / m)
    elif meta == "ols":
        weights = np.linalg.lstsq(Z, y, rcond=None)[0]
    else:
        weights = simplex_nnls(Z, y)
    base = [fit(with_seed(spec, _learner_seed(spec.seed, seed, j, K)), X, y) for j, spec in enumerate(specs)]
    return SuperLearnerModel(base, weights, cv_risks, Z, degenerate)


def sl_predict(model: SuperLearnerModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    out = np.zeros(X.shape[0])
    for w, base in zip(model.weights, model.base_models):
        if w != 0.0:
            out += w * predict(base, X)
        else:
            # still validates the feature dimension
            if X.shape[1] != base.n_features:
                raise ValueError(f"expected {base.n_features} features, got {X.shape[1]}")
    return out
