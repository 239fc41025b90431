"""Comparator estimators: within OLS, within 2SLS and two plug-in estimators.

All standard errors come from the individual-clustered sandwich of
:mod:`slcf.inference`, applied to each estimator's own estimating equation.
Cross-fitted plug-in estimators average fold estimates, so their variance is
``(1/B^2) sum_b V_b`` per split; repeated splits are combined like the SLCF
estimator, adding the across-split dispersion.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any

import numpy as np

from slcf.estimator import (
    Fitter,
    SlcfConfig,
    SuperLearnerFitter,
    crossfit_predictions,
    first_stage_features,
    in_sample_predictions,
    partition,
    split_correction,
)
from slcf.inference import RankDeficientError, check_rank, cluster_sandwich, iv_solve, normal_ci
from slcf.panel import PanelDataset, TransformKind, apply_operator, transform

__all__ = [
    "BaselineFit",
    "FirstStagePredictions",
    "WeakInstrumentError",
    "first_stage_predictions",
    "naive_plugin_2sls",
    "plugin_iv",
    "polynomial_instruments",
    "w2sls",
    "wols",
]


class WeakInstrumentError(RankDeficientError):
    """The fitted instrument is (numerically) unrelated to the regressors."""


@dataclass(frozen=True)
class BaselineFit:
    name: str
    coef: np.ndarray
    names: tuple[str, ...]
    vcov: np.ndarray
    se: np.ndarray
    ci95: np.ndarray

    @property
    def beta1(self) -> float:
        return float(self.coef[0])


def _fit(name: str, coef: np.ndarray, vcov: np.ndarray, names: tuple[str, ...]) -> BaselineFit:
    vcov = 0.5 * (vcov + vcov.T)
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    return BaselineFit(name, coef, names, vcov, se, normal_ci(coef, se))


def _names(n_exog: int) -> tuple[str, ...]:
    return ("x1",) + tuple(f"x{j + 2}" for j in range(n_exog))


def _regressors(data: PanelDataset, kind: TransformKind | str, weighting: str = "vtilde"):
    tp = transform(data, kind, weighting)
    X = tp.whiten(np.column_stack([tp.tx1, tp.tx_exog]))
    return tp, X, tp.whiten(tp.ty)


def wols(data: PanelDataset, kind: TransformKind | str = TransformKind.WITHIN) -> BaselineFit:
    """Least squares of transformed ``y`` on transformed ``(x1, x_exog)``."""
    tp, X, y = _regressors(data, kind)
    names = _names(data.n_exog)
    check_rank(X, names)
    coef = np.linalg.solve(X.T @ X, X.T @ y)
    return _fit("WOLS", coef, cluster_sandwich(X, X, y - X @ coef, tp.individual), names)


def polynomial_instruments(data: PanelDataset, degree: int, interactions: bool = False) -> np.ndarray:
    """Untransformed instrument columns built from ``(z, x_exog)``.

    Without interactions: every variable's powers ``1..degree``.  With
    interactions: every monomial of total degree ``1..degree``.
    """
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    st = data.stacked
    base = np.hstack([st["z"], st["x_exog"]])
    if not interactions:
        return np.hstack([base**d for d in range(1, degree + 1)])
    cols = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(base.shape[1]), d):
            cols.append(np.prod(base[:, list(combo)], axis=1))
    return np.column_stack(cols)


def w2sls(
    data: PanelDataset,
    degree: int = 1,
    kind: TransformKind | str = TransformKind.WITHIN,
    interactions: bool = False,
) -> BaselineFit:
    """Two-stage least squares on transformed data with polynomial instruments.

    Instruments are expanded in levels and then transformed with the same
    operator as the outcome.
    """
    tp, X, y = _regressors(data, kind)
    Z = tp.whiten(apply_operator(data, kind, polynomial_instruments(data, degree, interactions)))
    scale = Z.std(axis=0)
    Z = Z / np.where(scale > 0, scale, 1.0)
    names = _names(data.n_exog)
    coef = iv_solve(Z, X, y, names)
    Xhat = Z @ np.linalg.lstsq(Z, X, rcond=None)[0]
    name = "W2SLS" if degree == 1 else f"W2SLS_poly{degree}"
    return _fit(name, coef, cluster_sandwich(Xhat, X, y - X @ coef, tp.individual), names)


@dataclass(frozen=True)
class FirstStagePredictions:
    """First-stage predictions ``g_hat`` per split with the partitions that produced them.

    ``fold_of[ss]`` is ``None`` for an in-sample fit.
    """

    ghat: list[np.ndarray]
    fold_of: list[np.ndarray | None]
    diagnostics: list[dict[str, Any]]
    crossfit: bool


def first_stage_predictions(
    data: PanelDataset, config: SlcfConfig, crossfit: bool = True, fitter: Fitter | None = None
) -> FirstStagePredictions:
    """Predictions of the transformed reduced form used by the plug-in estimators.

    Cross-fitted predictions use the same partitions and learner seeds as
    :func:`slcf.estimator.slcf_estimate` with the same ``config``.
    """
    design = first_stage_features(data, config)
    if fitter is None:
        fitter = SuperLearnerFitter(config.sl_specs, config.sl_folds, config.meta)
    seed = int(config.seed)
    if not crossfit:
        g, d = in_sample_predictions(design, fitter, seed)
        return FirstStagePredictions([g], [None], d, False)
    ghat, folds, diags = [], [], []
    for ss in range(config.SS):
        fold_of = partition(data.N, config.B, seed, ss)
        g, d = crossfit_predictions(design, fold_of, config.B, fitter, seed, ss)
        ghat.append(g)
        folds.append(fold_of)
        diags.extend(d)
    return FirstStagePredictions(ghat, folds, diags, True)


def _plugin(
    data: PanelDataset,
    config: SlcfConfig,
    crossfit: bool,
    fitter: Fitter | None,
    predictions: FirstStagePredictions | None,
    naive: bool,
) -> BaselineFit:
    tp, X, y = _regressors(data, config.transform, config.weighting)
    names = _names(data.n_exog)
    if predictions is None:
        predictions = first_stage_predictions(data, config, crossfit, fitter)
    Xex = X[:, 1:]
    thetas, vcovs = [], []
    for g, fold_of in zip(predictions.ghat, predictions.fold_of):
        Z = np.column_stack([tp.whiten(g), Xex])
        row_fold = np.zeros(tp.n_rows, dtype=np.int64) if fold_of is None else fold_of[tp.individual]
        n_folds = int(row_fold.max()) + 1
        coefs, V = [], np.zeros((X.shape[1], X.shape[1]))
        for b in range(n_folds):
            m = row_fold == b
            Zb, Xb, yb = Z[m], X[m], y[m]
            R = Zb if naive else Xb
            A = Zb.T @ R
            if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12:
                raise WeakInstrumentError(
                    "near-singular system: the fitted first stage is numerically unrelated to x1"
                )
            coef = np.linalg.solve(A, Zb.T @ yb)
            V += cluster_sandwich(Zb, R, yb - R @ coef, tp.individual[m])
            coefs.append(coef)
        thetas.append(np.mean(coefs, axis=0))
        vcovs.append(V / n_folds**2)
    per_split = np.array(thetas)
    theta = np.median(per_split, axis=0) if config.aggregate == "median" else per_split.mean(axis=0)
    vcov = np.mean(vcovs, axis=0) + split_correction(per_split, theta)
    if naive:
        name = "N2SLS"
    else:
        name = "PIV" if predictions.crossfit else "PIV_nocf"
    return _fit(name, theta, vcov, names)


def plugin_iv(
    data: PanelDataset,
    config: SlcfConfig | None = None,
    crossfit: bool = True,
    fitter: Fitter | None = None,
    predictions: FirstStagePredictions | None = None,
) -> BaselineFit:
    """IV with the fitted first stage as the excluded instrument.

    Instruments ``[g_hat, tau x_exog]`` for regressors ``[tau x1, tau x_exog]``,
    fold by fold when cross-fitted.

    Raises
    ------
    WeakInstrumentError
        When ``sum g_hat' tau x1`` (given the exogenous regressors) is numerically zero.
    """
    config = SlcfConfig() if config is None else config
    return _plugin(data, config, crossfit, fitter, predictions, naive=False)


def naive_plugin_2sls(
    data: PanelDataset,
    config: SlcfConfig | None = None,
    fitter: Fitter | None = None,
    predictions: FirstStagePredictions | None = None,
    crossfit: bool = True,
) -> BaselineFit:
    """Least squares of ``tau y`` on ``[g_hat, tau x_exog]`` with cross-fitted ``g_hat``."""
    config = SlcfConfig() if config is None else config
    return _plugin(data, config, crossfit, fitter, predictions, naive=True)
