"""Super learner control function (SLCF) estimation for panel data.

The model has an endogenous regressor ``x1`` whose reduced form
``x1 = g(x_exog, z) + alpha + u`` is nonlinear, a linear structural equation
``y = beta1 x1 + x_exog beta2 + alpha + eps`` and errors linked by
``eps = rho u + omega``.  Individual effects ``alpha`` are removed by first
differences or the within transformation, the transformed reduced form is
learned by a cross-fitted super learner, and its residual enters the
structural regression as a control function.

Modules
-------
panel        data containers, transformations, CSV input
learners     mean, linear, neural network and random forest regressors
superlearner cross-validated stacking with simplex weights
estimator    the cross-fitted SLCF estimator, variance and diagnostics
baselines    within OLS/2SLS and plug-in IV/2SLS comparators
simulation   simulation design, Monte Carlo driver, result files
cli          ``slcf estimate|simulate|compare``
"""

from slcf.baselines import BaselineFit, naive_plugin_2sls, plugin_iv, w2sls, wols
from slcf.estimator import (
    CrossFitPlan,
    SlcfConfig,
    SlcfFit,
    make_crossfit_plan,
    orthogonality_check,
    second_stage,
    slcf_estimate,
    split_correction,
    variance_estimate,
)
from slcf.learners import Linear, Mean, NeuralNet, RandomForest, default_library, fit, predict
from slcf.panel import (
    PanelDataset,
    PanelFormatError,
    TransformKind,
    fd_matrix,
    first_stage_design,
    load_csv,
    transform,
    vtilde_matrix,
    within_matrix,
)
from slcf.simulation import DgpConfig, McConfig, McResult, g_fun, gen_dgp1, run_monte_carlo, sweep_a
from slcf.superlearner import SuperLearnerModel, cv_folds, fit_super_learner, simplex_nnls, sl_predict

__version__ = "0.1.0"

__all__ = [
    "BaselineFit",
    "CrossFitPlan",
    "DgpConfig",
    "Linear",
    "McConfig",
    "McResult",
    "Mean",
    "NeuralNet",
    "PanelDataset",
    "PanelFormatError",
    "RandomForest",
    "SlcfConfig",
    "SlcfFit",
    "SuperLearnerModel",
    "TransformKind",
    "cv_folds",
    "default_library",
    "fd_matrix",
    "first_stage_design",
    "fit",
    "fit_super_learner",
    "g_fun",
    "gen_dgp1",
    "load_csv",
    "make_crossfit_plan",
    "naive_plugin_2sls",
    "orthogonality_check",
    "plugin_iv",
    "predict",
    "run_monte_carlo",
    "second_stage",
    "simplex_nnls",
    "sl_predict",
    "slcf_estimate",
    "split_correction",
    "sweep_a",
    "transform",
    "variance_estimate",
    "vtilde_matrix",
    "w2sls",
    "within_matrix",
    "wols",
]
