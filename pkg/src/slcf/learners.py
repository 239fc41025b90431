"""Base learners with a uniform ``fit`` / ``predict`` contract.

Four regressors are provided: the training mean, least squares, a one hidden
layer sigmoid network, and a bootstrap random forest of exhaustive
variance-reduction trees.  Every learner standardizes features and target
inside :func:`fit` and de-standardizes its predictions.

>>> import numpy as np
>>> model = fit(Linear(), np.arange(5.0)[:, None], 2 * np.arange(5.0))
>>> np.allclose(predict(model, np.array([[10.0]])), 20.0)
True
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Union

import numpy as np

from slcf import _kernels

__all__ = [
    "FittedLearner",
    "LearnerSpec",
    "Linear",
    "Mean",
    "NeuralNet",
    "RandomForest",
    "default_library",
    "fit",
    "learner_from_dict",
    "learner_to_dict",
    "predict",
]


@dataclass(frozen=True)
class Mean:
    seed: int = 0
    name: str = field(default="mean", init=False)


@dataclass(frozen=True)
class Linear:
    seed: int = 0
    name: str = field(default="linear", init=False)


@dataclass(frozen=True)
class NeuralNet:
    """One hidden layer of sigmoid units.

    ``optimizer="bfgs"`` (default) runs quasi-Newton steps, ``"gd"`` plain
    full-batch gradient descent starting every step at ``learning_rate``.
    Both halve the step until the loss decreases, so the training loss is
    non-increasing.
    """

    hidden_units: int = 2
    output: str = "linear"
    max_iter: int = 100
    learning_rate: float = 0.1
    l2: float = 0.0
    optimizer: str = "bfgs"
    seed: int = 0
    name: str = field(default="nnet", init=False)

    def __post_init__(self) -> None:
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.output not in ("linear", "logistic"):
            raise ValueError("output must be 'linear' or 'logistic'")
        if self.optimizer not in ("bfgs", "gd"):
            raise ValueError("optimizer must be 'bfgs' or 'gd'")


@dataclass(frozen=True)
class RandomForest:
    n_trees: int = 100
    min_leaf: int = 5
    mtry: int = 2
    seed: int = 0
    name: str = field(default="forest", init=False)

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")


LearnerSpec = Union[Mean, Linear, NeuralNet, RandomForest]

_BY_NAME = {"mean": Mean, "linear": Linear, "nnet": NeuralNet, "forest": RandomForest}


def default_library(seed: int = 0) -> list[LearnerSpec]:
    """The three-learner library used in the simulations: linear model, network, mean."""
    return [Linear(seed=seed), NeuralNet(seed=seed), Mean(seed=seed)]


def learner_from_dict(d: Mapping[str, Any]) -> LearnerSpec:
    """Parse ``{"type": "nnet", "hidden_units": 2, ...}``; unknown keys are rejected."""
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _BY_NAME:
        raise ValueError(f"unknown learner type {kind!r}; expected one of {sorted(_BY_NAME)}")
    cls = _BY_NAME[kind]
    allowed = {f for f in cls.__dataclass_fields__ if f != "name"}
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"unknown keys for learner {kind!r}: {sorted(extra)}")
    return cls(**d)


def learner_to_dict(spec: LearnerSpec) -> dict[str, Any]:
    out = {"type": spec.name}
    out.update({k: getattr(spec, k) for k in spec.__dataclass_fields__ if k != "name"})
    return out


@dataclass(frozen=True)
class FittedLearner:
    spec: LearnerSpec
    params: dict[str, Any]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    train_loss: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.x_mean.shape[0]


def _check_xy(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit a learner on zero rows")
    if p == 0:
        raise ValueError("X must have at least one feature")
    if y.shape[0] != n:
        raise ValueError(f"X has {n} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in learner input")
    return X, y


def _scale(v: np.ndarray) -> np.ndarray:
    s = v.std(axis=0)
    return np.where(s > 0, s, 1.0)


def fit(spec: LearnerSpec, X: np.ndarray, y: np.ndarray) -> FittedLearner:
    """Fit ``spec`` to ``(X, y)``; deterministic given ``spec.seed``."""
    X, y = _check_xy(X, y)
    x_mean = X.mean(axis=0)
    x_scale = _scale(X)
    Xs = (X - x_mean) / x_scale
    y_mean = float(y.mean())
    y_scale = float(_scale(y))

    if isinstance(spec, NeuralNet) and spec.output == "logistic":
        # min-max target scaling so the (0, 1) output can span the training range
        y_mean = float(y.min())
        y_scale = float(y.max() - y.min()) or 1.0
    ys = (y - y_mean) / y_scale
    loss = None

    if isinstance(spec, Mean):
        params: dict[str, Any] = {}
    elif isinstance(spec, Linear):
        A = np.hstack([np.ones((Xs.shape[0], 1)), Xs])
        coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
        params = {"intercept": float(coef[0]), "coef": coef[1:]}
    elif isinstance(spec, NeuralNet):
        params, loss = _fit_nnet(spec, Xs, ys)
    elif isinstance(spec, RandomForest):
        params = _fit_forest(spec, Xs, ys)
    else:
        raise TypeError(f"unsupported learner spec {spec!r}")
    return FittedLearner(spec, params, x_mean, x_scale, y_mean, y_scale, loss)


def predict(model: FittedLearner, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got array of shape {X.shape}")
    Xs = (X - model.x_mean) / model.x_scale
    spec = model.spec
    if isinstance(spec, Mean):
        raw = np.zeros(X.shape[0])
    elif isinstance(spec, Linear):
        raw = model.params["intercept"] + Xs @ model.params["coef"]
    elif isinstance(spec, NeuralNet):
        raw = _kernels.nnet_forward(
            model.params["weights"], np.ascontiguousarray(Xs), spec.hidden_units, spec.output == "logistic"
        )
    elif isinstance(spec, RandomForest):
        raw = np.zeros(X.shape[0])
        Xc = np.ascontiguousarray(Xs)
        for tree in model.params["trees"]:
            raw += _kernels.predict_tree(Xc, *tree)
        raw /= len(model.params["trees"])
    else:
        raise TypeError(f"unsupported learner spec {spec!r}")
    return model.y_mean + model.y_scale * raw


def _fit_nnet(spec: NeuralNet, Xs: np.ndarray, ys: np.ndarray) -> tuple[dict[str, Any], np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    p = Xs.shape[1]
    h = spec.hidden_units
    n_params = p * h + h + h + 1
    w0 = rng.uniform(-0.5, 0.5, size=n_params)
    losses = np.full(spec.max_iter + 1, np.nan)
    Xc = np.ascontiguousarray(Xs)
    logistic = spec.output == "logistic"
    if spec.optimizer == "bfgs":
        w, n_acc = _kernels.nnet_train_bfgs(w0, Xc, ys, h, logistic, spec.l2, spec.max_iter, losses)
    else:
        w, n_acc = _kernels.nnet_train_gd(
            w0, Xc, ys, h, logistic, spec.l2, spec.max_iter, spec.learning_rate, losses
        )
    return {"weights": w}, losses[: n_acc + 1]


def _fit_forest(spec: RandomForest, Xs: np.ndarray, ys: np.ndarray) -> dict[str, Any]:
    n, p = Xs.shape
    if spec.mtry > p:
        raise ValueError(f"mtry={spec.mtry} exceeds the number of features ({p})")
    rng = np.random.default_rng(spec.seed)
    Xc = np.ascontiguousarray(Xs)
    trees = []
    for _ in range(spec.n_trees):
        sample = rng.integers(0, n, size=n)
        keys = rng.random((2 * n + 1, p))
        feat, thr, left, right, value, _n = _kernels.build_tree(Xc, ys, sample, spec.min_leaf, spec.mtry, keys)
        trees.append((feat, thr, left, right, value))
    return {"trees": trees}


def with_seed(spec: LearnerSpec, seed: int) -> LearnerSpec:
    return replace(spec, seed=int(seed))
