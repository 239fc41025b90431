"""The cross-fitted super learner control function (SLCF) estimator.

For every repeated split of the individuals into ``B`` folds, the transformed
reduced form ``E[tau x1 | I_t]`` is learned by a super learner on the
complement of each fold, the fold's residuals ``tau u_hat`` become a control
regressor, and ``(beta1, beta2, rho)`` is estimated by weighted least squares
of ``tau y`` on ``[tau x1, tau x_exog, tau u_hat]`` with weights
``Vtilde_i^{-1}``.  Fold estimates are averaged within a split, and split
estimates are averaged (or their median taken) across splits.

The variance is a cluster (individual) sandwich averaged over folds and
splits plus the across-split dispersion of the split estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from slcf.inference import RankDeficientError, check_rank, cluster_scores, normal_ci, sandwich
from slcf.learners import LearnerSpec, default_library
from slcf.panel import (
    FirstStageDesign,
    PanelDataset,
    TransformedPanel,
    TransformKind,
    apply_operator,
    first_stage_design,
    transform,
)
from slcf.superlearner import SuperLearnerModel, cv_folds, fit_super_learner, sl_predict

__all__ = [
    "CrossFitPlan",
    "FoldData",
    "Nuisance",
    "OrthogonalityResult",
    "SlcfConfig",
    "SlcfFit",
    "SuperLearnerFitter",
    "coef_names",
    "crossfit_predictions",
    "in_sample_predictions",
    "partition",
    "first_stage_features",
    "first_stage_residuals",
    "fold_data_from_blocks",
    "make_crossfit_plan",
    "orthogonality_check",
    "second_stage",
    "slcf_estimate",
    "split_correction",
    "variance_estimate",
]


# --------------------------------------------------------------------------
# configuration and plans


@dataclass(frozen=True)
class SlcfConfig:
    """Settings of the SLCF estimator.

    Parameters
    ----------
    transform : ``"fd"`` or ``"within"``.
    B : folds per cross-fitting split.
    SS : number of repeated splits.
    sl_specs : base learner library; defaults to linear model, network, mean.
    sl_folds : cross-validation folds inside the super learner.
    weighting : ``"vtilde"`` or ``"identity"`` second-stage weights.
    aggregate : ``"mean"`` or ``"median"`` over splits.
    seed : master seed for partitions and learners.
    features : ``"design"`` uses the conditioning set of the transform
        (current and lagged values for first differences, current values and
        individual means for within); ``"transformed"`` uses the transformed
        instruments and exogenous regressors only.
    full_stack : within only, condition on every period's values instead of
        individual means (balanced panels).
    meta : super learner meta step, ``"simplex"`` or ``"ols"``.
    crossfit : when False the first stage is fit once on all individuals and
        residuals are in-sample (a single fold); kept for contrasts only.
    """

    transform: TransformKind | str = TransformKind.FIRST_DIFFERENCE
    B: int = 5
    SS: int = 10
    sl_specs: tuple[LearnerSpec, ...] | None = None
    sl_folds: int = 5
    weighting: str = "vtilde"
    aggregate: str = "mean"
    seed: int = 0
    features: str = "design"
    full_stack: bool = False
    meta: str = "simplex"
    crossfit: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "transform", TransformKind.parse(self.transform))
        specs = tuple(default_library(self.seed) if self.sl_specs is None else self.sl_specs)
        if not specs:
            raise ValueError("sl_specs must contain at least one learner")
        object.__setattr__(self, "sl_specs", specs)
        if self.B < 2:
            raise ValueError(f"B must be >= 2, got {self.B}")
        if self.SS < 1:
            raise ValueError(f"SS must be >= 1, got {self.SS}")
        if self.sl_folds < 2:
            raise ValueError(f"sl_folds must be >= 2, got {self.sl_folds}")
        if self.weighting not in ("vtilde", "identity"):
            raise ValueError(f"weighting must be 'vtilde' or 'identity', got {self.weighting!r}")
        if self.aggregate not in ("mean", "median"):
            raise ValueError(f"aggregate must be 'mean' or 'median', got {self.aggregate!r}")
        if self.features not in ("design", "transformed"):
            raise ValueError(f"features must be 'design' or 'transformed', got {self.features!r}")
        if self.meta not in ("simplex", "ols"):
            raise ValueError(f"meta must be 'simplex' or 'ols', got {self.meta!r}")


@dataclass(frozen=True)
class CrossFitPlan:
    """``assignments[ss, i]`` is the fold of individual ``i`` in split ``ss``."""

    assignments: np.ndarray
    B: int
    seed: int

    @property
    def SS(self) -> int:
        return self.assignments.shape[0]

    def fold(self, ss: int, b: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[ss] == b)


def partition(n: int, B: int, seed: int, ss: int, attempt: int = 0) -> np.ndarray:
    """Fold index per individual for split ``ss``; ``attempt > 0`` redraws it."""
    entropy = [seed, ss] if attempt == 0 else [seed, ss, attempt]
    return cv_folds(n, B, np.random.SeedSequence(entropy)).fold


def make_crossfit_plan(ids: int | Sequence[Any], B: int, SS: int, seed: int) -> CrossFitPlan:
    """``SS`` independent partitions of the individuals into ``B`` near-equal folds.

    Split ``ss`` is drawn from ``SeedSequence([seed, ss])``.
    """
    n = ids if isinstance(ids, (int, np.integer)) else len(ids)
    if n < B:
        raise ValueError(f"cannot split {n} individuals into B={B} folds")
    if SS < 1:
        raise ValueError("SS must be >= 1")
    seed = int(seed)
    return CrossFitPlan(np.stack([partition(int(n), B, seed, ss) for ss in range(SS)]), B, seed)


# --------------------------------------------------------------------------
# first stage


class Nuisance(Protocol):
    def predict(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class _SlNuisance:
    model: SuperLearnerModel

    def predict(self, X: np.ndarray) -> np.ndarray:
        return sl_predict(self.model, X)

    @property
    def diagnostics(self) -> dict[str, Any]:
        return {
            "learners": self.model.names,
            "weights": self.model.weights.tolist(),
            "cv_risks": self.model.cv_risks.tolist(),
            "degenerate": self.model.degenerate,
        }


@dataclass(frozen=True)
class SuperLearnerFitter:
    """Default first-stage fitter: ``fitter(X, y, groups, seed) -> Nuisance``."""

    specs: tuple[LearnerSpec, ...]
    K: int = 5
    meta: str = "simplex"

    def __call__(self, X: np.ndarray, y: np.ndarray, groups: np.ndarray, seed: int) -> _SlNuisance:
        return _SlNuisance(fit_super_learner(X, y, self.specs, K=self.K, seed=seed, groups=groups, meta=self.meta))


Fitter = Callable[[np.ndarray, np.ndarray, np.ndarray, int], Nuisance]


def first_stage_features(data: PanelDataset, config: SlcfConfig) -> FirstStageDesign:
    """Features and target aligned with the rows of ``transform(data, config.transform)``."""
    kind = config.transform
    design = first_stage_design(data, kind, full_stack=config.full_stack)
    if config.features == "design":
        return design
    st = data.stacked
    X = apply_operator(data, kind, np.hstack([st["z"], st["x_exog"]]))
    names = tuple(f"tau_z{j + 1}" for j in range(data.n_inst)) + tuple(
        f"tau_x{j + 2}" for j in range(data.n_exog)
    )
    return FirstStageDesign(X, design.target, design.rows, names)


def first_stage_residuals(
    design: FirstStageDesign,
    train: np.ndarray,
    test: np.ndarray,
    fitter: Fitter,
    seed: int,
) -> tuple[np.ndarray, Nuisance]:
    """Cross-fitted residuals for the individuals in ``test``.

    The nuisance is fit on the rows of the ``train`` individuals only and
    evaluated on the rows of ``test``; returns ``(residuals, nuisance)`` with
    residuals in the row order of ``design`` restricted to ``test``.
    """
    train = np.asarray(train, dtype=np.int64)
    test = np.asarray(test, dtype=np.int64)
    if train.size == 0 or test.size == 0:
        raise ValueError("first stage needs a nonempty training complement and a nonempty fold")
    ind = design.individual
    n_ind = int(max(ind.max(), train.max(), test.max())) + 1
    in_train = np.zeros(n_ind, dtype=bool)
    in_train[train] = True
    in_test = np.zeros(n_ind, dtype=bool)
    in_test[test] = True
    if np.any(in_train & in_test):
        raise ValueError("training and evaluation individuals overlap")
    tr_rows = in_train[ind]
    te_rows = in_test[ind]
    model = fitter(design.X[tr_rows], design.target[tr_rows], ind[tr_rows], seed)
    resid = design.target[te_rows] - model.predict(design.X[te_rows])
    return resid, model


def crossfit_predictions(
    design: FirstStageDesign, fold_of: np.ndarray, B: int, fitter: Fitter, seed: int, ss: int
) -> tuple[np.ndarray, list[dict[str, Any]]]:
    """Out-of-fold first-stage predictions for every row under one partition.

    Fold ``b`` of split ``ss`` uses learner seed ``_split_seed(seed, ss, b)``,
    so every estimator sharing a configuration sees the same predictions.
    """
    ghat = np.empty(design.target.shape[0])
    diags = []
    rows_fold = np.asarray(fold_of)[design.individual]
    for b in range(B):
        test = np.flatnonzero(fold_of == b)
        train = np.flatnonzero(fold_of != b)
        r, model = first_stage_residuals(design, train, test, fitter, _split_seed(seed, ss, b))
        ghat[rows_fold == b] = design.target[rows_fold == b] - r
        diags.append({"split": ss, "fold": b, **getattr(model, "diagnostics", {})})
    return ghat, diags


def in_sample_predictions(
    design: FirstStageDesign, fitter: Fitter, seed: int
) -> tuple[np.ndarray, list[dict[str, Any]]]:
    """First-stage predictions from a single fit on every individual."""
    model = fitter(design.X, design.target, design.individual, _split_seed(seed, 0, 0))
    return model.predict(design.X), [{"split": 0, "fold": -1, **getattr(model, "diagnostics", {})}]


# --------------------------------------------------------------------------
# second stage and variance


@dataclass(frozen=True)
class FoldData:
    """Whitened second-stage rows of one fold.

    ``H`` and ``y`` are premultiplied by ``L_i^{-1}`` (``Vtilde_i = L_i L_i'``),
    ``cluster`` labels each row's individual and ``n_total`` is the fold's
    untransformed row count ``n_T,b``.
    """

    H: np.ndarray
    y: np.ndarray
    cluster: np.ndarray
    n_total: int


def fold_data_from_blocks(
    blocks: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], n_total: int | None = None
) -> FoldData:
    """Whiten per-individual ``(tau_y_i, H_i, Vtilde_i)`` blocks into a :class:`FoldData`."""
    Hs, ys, cl = [], [], []
    for i, (ty, H, V) in enumerate(blocks):
        ty = np.asarray(ty, dtype=float).reshape(-1)
        H = np.asarray(H, dtype=float).reshape(ty.shape[0], -1)
        Linv = np.linalg.inv(np.linalg.cholesky(np.asarray(V, dtype=float)))
        Hs.append(Linv @ H)
        ys.append(Linv @ ty)
        cl.append(np.full(ty.shape[0], i))
    H = np.vstack(Hs)
    return FoldData(H, np.concatenate(ys), np.concatenate(cl), H.shape[0] if n_total is None else int(n_total))


def _gls(fold: FoldData, names: Sequence[str] | None = None) -> np.ndarray:
    check_rank(fold.H, names, "second-stage design")
    return np.linalg.solve(fold.H.T @ fold.H, fold.H.T @ fold.y)


def second_stage(
    blocks: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], names: Sequence[str] | None = None
) -> np.ndarray:
    """``(sum H_i' V_i^{-1} H_i)^{-1} sum H_i' V_i^{-1} tau_y_i`` over ``(tau_y_i, H_i, Vtilde_i)`` blocks.

    Raises
    ------
    RankDeficientError
        Naming the collinear columns of ``H``.
    """
    return _gls(fold_data_from_blocks(blocks), names)


def variance_estimate(folds: Sequence[FoldData], theta: np.ndarray) -> np.ndarray:
    """Sandwich ``J^{-1} M J^{-1}`` for one split.

    ``J`` and ``M`` average over folds the per-fold means
    ``(1/n_T,b) sum_i H_i' V_i^{-1} H_i`` and
    ``(1/n_T,b) sum_i s_i s_i'`` with ``s_i = H_i' V_i^{-1} (tau_y_i - H_i theta)``.
    The result estimates the asymptotic variance of ``sqrt(N_T) (theta_hat - theta)``.
    """
    theta = np.asarray(theta, dtype=float)
    p = theta.shape[0]
    J = np.zeros((p, p))
    M = np.zeros((p, p))
    for f in folds:
        J += f.H.T @ f.H / f.n_total
        S = cluster_scores(f.H, f.y - f.H @ theta, f.cluster)
        M += S.T @ S / f.n_total
    J /= len(folds)
    M /= len(folds)
    if np.linalg.matrix_rank(J) < p:
        raise np.linalg.LinAlgError("singular J matrix in the variance estimate")
    return sandwich(J, M)


def split_correction(per_split_thetas: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``C = (1/SS) sum_ss (theta_ss - theta)(theta_ss - theta)'``."""
    d = np.atleast_2d(np.asarray(per_split_thetas, dtype=float)) - np.asarray(theta, dtype=float)
    return d.T @ d / d.shape[0]


# --------------------------------------------------------------------------
# the estimator


@dataclass(frozen=True)
class SlcfFit:
    """Result of :func:`slcf_estimate`.

    ``sigma`` estimates the asymptotic variance of ``sqrt(N_T) (theta_hat - theta)``;
    standard errors are ``sqrt(diag(sigma) / N_T)``.
    """

    theta: np.ndarray
    names: tuple[str, ...]
    sigma: np.ndarray
    standard_errors: np.ndarray
    ci95: np.ndarray
    per_split_thetas: np.ndarray
    per_fold_thetas: np.ndarray
    correction: np.ndarray
    first_stage: list[dict[str, Any]]
    n_total: int
    n_individuals: int
    n_resampled: int = 0
    config: SlcfConfig | None = field(default=None, repr=False)

    @property
    def beta1(self) -> float:
        return float(self.theta[0])

    @property
    def rho(self) -> float:
        return float(self.theta[-1])

    def coef(self, name: str) -> float:
        return float(self.theta[self.names.index(name)])


def coef_names(n_exog: int) -> tuple[str, ...]:
    return ("x1",) + tuple(f"x{j + 2}" for j in range(n_exog)) + ("rho",)


def _whitened(tp: TransformedPanel) -> tuple[np.ndarray, np.ndarray]:
    X = tp.whiten(np.column_stack([tp.tx1, tp.tx_exog]))
    return X, tp.whiten(tp.ty)


def _split_seed(seed: int, ss: int, b: int) -> int:
    return int(np.random.SeedSequence([seed, ss, b, 7]).generate_state(1)[0])


def _run_split(
    tp: TransformedPanel,
    design: FirstStageDesign,
    fold_of: np.ndarray,
    B: int,
    Xw: np.ndarray,
    yw: np.ndarray,
    fitter: Fitter | None,
    oracle: np.ndarray | None,
    seed: int,
    ss: int,
    names: Sequence[str],
) -> tuple[np.ndarray, list[FoldData], list[dict[str, Any]]]:
    members = [np.flatnonzero(fold_of == b) for b in range(B)]
    if oracle is not None:
        resid = oracle
        diags = []
    else:
        ghat, diags = crossfit_predictions(design, fold_of, B, fitter, seed, ss)
        resid = design.target - ghat
    uw = tp.whiten(resid)
    Hw = np.column_stack([Xw, uw])
    folds = []
    thetas = []
    for b in range(B):
        rows = tp.rows_of(members[b])
        f = FoldData(Hw[rows], yw[rows], tp.individual[rows], int(tp.T_i[members[b]].sum()))
        thetas.append(_gls(f, names))
        folds.append(f)
    return np.array(thetas), folds, diags


def slcf_estimate(
    data: PanelDataset,
    config: SlcfConfig | None = None,
    fitter: Fitter | None = None,
    oracle_residuals: np.ndarray | None = None,
) -> SlcfFit:
    """Estimate ``theta = (beta1, beta2, rho)`` by cross-fitted control function GLS.

    Parameters
    ----------
    data : PanelDataset
    config : SlcfConfig, optional
    fitter : callable, optional
        ``fitter(X, y, groups, seed) -> object with .predict(X)`` replacing the
        super learner, e.g. to inject a known function or record training sets.
    oracle_residuals : ndarray, optional
        Control residuals aligned with the transformed rows; bypasses the
        first stage entirely.

    Returns
    -------
    SlcfFit

    Notes
    -----
    A fold whose second-stage design is rank deficient aborts its split; the
    split's partition is redrawn once and the error propagates if it recurs.
    """
    config = SlcfConfig() if config is None else config
    tp = transform(data, config.transform, config.weighting)
    design = first_stage_features(data, config)
    if fitter is None:
        fitter = SuperLearnerFitter(config.sl_specs, config.sl_folds, config.meta)
    if oracle_residuals is not None:
        oracle_residuals = np.asarray(oracle_residuals, dtype=float).reshape(-1)
        if oracle_residuals.shape[0] != tp.n_rows:
            raise ValueError(f"oracle residuals have {oracle_residuals.shape[0]} rows, expected {tp.n_rows}")
    names = coef_names(data.n_exog)
    Xw, yw = _whitened(tp)
    seed = int(config.seed)

    if config.crossfit:
        B, SS = config.B, config.SS
        if data.N < B:
            raise ValueError(f"cannot split {data.N} individuals into B={B} folds")
    else:
        B, SS = 1, 1

    split_thetas, fold_thetas, sigmas, diags = [], [], [], []
    n_resampled = 0
    for ss in range(SS):
        for attempt in range(2):
            try:
                if B == 1:
                    thetas, folds, dg = _run_in_sample(tp, design, Xw, yw, fitter, oracle_residuals, seed, names)
                else:
                    fold_of = partition(data.N, B, seed, ss, attempt)
                    thetas, folds, dg = _run_split(
                        tp, design, fold_of, B, Xw, yw, fitter, oracle_residuals, seed, ss, names
                    )
            except RankDeficientError:
                if attempt == 1 or B == 1:
                    raise
                n_resampled += 1
                continue
            break
        theta_ss = thetas.mean(axis=0)
        split_thetas.append(theta_ss)
        fold_thetas.append(thetas)
        sigmas.append(variance_estimate(folds, theta_ss))
        diags.extend(dg)

    per_split = np.array(split_thetas)
    if config.aggregate == "median":
        theta = np.median(per_split, axis=0)
    else:
        theta = per_split.mean(axis=0)
    C = split_correction(per_split, theta)
    N_T = data.n_total
    # C is a variance of theta itself; sigma is on the sqrt(N_T) scale
    sigma = np.mean(sigmas, axis=0) + N_T * C
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(np.clip(np.diag(sigma), 0.0, None) / N_T)
    return SlcfFit(
        theta=theta,
        names=names,
        sigma=sigma,
        standard_errors=se,
        ci95=normal_ci(theta, se),
        per_split_thetas=per_split,
        per_fold_thetas=np.array(fold_thetas),
        correction=C,
        first_stage=diags,
        n_total=N_T,
        n_individuals=data.N,
        n_resampled=n_resampled,
        config=config,
    )


def _run_in_sample(tp, design, Xw, yw, fitter, oracle, seed, names):
    # first stage fit and evaluated on the same individuals
    if oracle is not None:
        resid = oracle
        diags = []
    else:
        ghat, diags = in_sample_predictions(design, fitter, seed)
        resid = design.target - ghat
    Hw = np.column_stack([Xw, tp.whiten(resid)])
    f = FoldData(Hw, yw, tp.individual, tp.n_total)
    return np.array([_gls(f, names)]), [f], diags


# --------------------------------------------------------------------------
# orthogonality diagnostic


@dataclass(frozen=True)
class OrthogonalityResult:
    """Central-difference derivatives of the mean scores along a nuisance direction.

    ``orthogonal[k]`` and ``plugin[k]`` are the estimates at step ``h[k]``.
    """

    h: np.ndarray
    orthogonal: np.ndarray
    plugin: np.ndarray

    @property
    def orthogonal_derivative(self) -> float:
        return float(self.orthogonal[np.argmin(self.h)])

    @property
    def plugin_derivative(self) -> float:
        return float(self.plugin[np.argmin(self.h)])

    @property
    def ratio(self) -> float:
        """``|orthogonal| / |plugin|`` at the smallest step."""
        denom = abs(self.plugin_derivative)
        return float("inf") if denom == 0 else abs(self.orthogonal_derivative) / denom


def orthogonality_check(
    tp: TransformedPanel,
    theta: np.ndarray,
    tau_u: np.ndarray,
    direction: np.ndarray,
    h_grid: Sequence[float] = (1e-2, 5e-3),
) -> OrthogonalityResult:
    """Gateaux derivative of the orthogonalized and plug-in scores for ``beta1``.

    The nuisance is perturbed as ``tau g + h * direction``, so the control
    becomes ``tau u - h * direction``.  With the structural error ``omega``
    held at its true value, the orthogonalized score is
    ``x1' A_h omega`` where ``A_h`` projects (in the ``Vtilde^{-1}`` metric)
    off the exogenous regressors and the perturbed control; the plug-in score
    is ``x1' (y - x1 b1 - X b2 - rho (tau u - h direction))``.  Both are
    averaged over individuals and differentiated at ``h = 0`` by central
    differences for every step in ``h_grid``.

    The projection is formed over the whole sample: with two periods under
    first differencing each individual contributes a single row, and the
    per-individual projection off its own control is identically zero.
    """
    h_grid = np.asarray(h_grid, dtype=float).reshape(-1)
    if h_grid.size == 0:
        raise ValueError("h_grid is empty")
    if np.any(h_grid <= 0):
        raise ValueError("h_grid entries must be positive")
    theta = np.asarray(theta, dtype=float)
    k = tp.tx_exog.shape[1]
    if theta.shape[0] != k + 2:
        raise ValueError(f"theta must have {k + 2} entries")
    beta1, beta2, rho = theta[0], theta[1:-1], theta[-1]
    x1w = tp.whiten(tp.tx1)
    Xw = tp.whiten(tp.tx_exog)
    yw = tp.whiten(tp.ty)
    uw = tp.whiten(np.asarray(tau_u, dtype=float))
    dw = tp.whiten(np.asarray(direction, dtype=float))
    omega = yw - beta1 * x1w - Xw @ beta2 - rho * uw
    n = tp.N

    def ortho(h: float) -> float:
        Q = np.column_stack([Xw, uw - h * dw])
        r = x1w - Q @ np.linalg.lstsq(Q, x1w, rcond=None)[0]
        return float(r @ omega) / n

    def plug(h: float) -> float:
        e = yw - beta1 * x1w - Xw @ beta2 - rho * (uw - h * dw)
        return float(x1w @ e) / n

    o = np.array([(ortho(h) - ortho(-h)) / (2 * h) for h in h_grid])
    p = np.array([(plug(h) - plug(-h)) / (2 * h) for h in h_grid])
    return OrthogonalityResult(h_grid, o, p)
