import numpy as np
import pytest

from slcf.baselines import (
    FirstStagePredictions,
    WeakInstrumentError,
    first_stage_predictions,
    naive_plugin_2sls,
    plugin_iv,
    polynomial_instruments,
    w2sls,
    wols,
)
from slcf.estimator import SlcfConfig, first_stage_features, slcf_estimate
from slcf.learners import Linear, Mean
from slcf.panel import PanelDataset
from slcf.simulation import DgpConfig, gen_dgp1


def _linear_g(a, x2, z):
    return 1.5 * z - 0.5 * x2


@pytest.fixture(scope="module")
def nonlinear():
    return gen_dgp1(DgpConfig(a=5, N=300, T=2, seed=4))


@pytest.fixture(scope="module")
def linear():
    return gen_dgp1(DgpConfig(a=5, N=300, T=3, seed=5, g=_linear_g))


def _shift(data, seed, fields=("y", "x1", "x_exog")):
    rng = np.random.default_rng(seed)
    c = rng.normal(scale=3.0, size=(data.N, 3))

    def fn(blk):
        k = data.ids.index(blk.id)
        out = {}
        if "y" in fields:
            out["y"] = blk.y + c[k, 0]
        if "x1" in fields:
            out["x1"] = blk.x1 + c[k, 1]
        if "x_exog" in fields:
            out["x_exog"] = blk.x_exog + c[k, 2]
        return out

    return data.map_columns(fn)


LINEAR_TRANSFORMED = dict(sl_specs=(Linear(), Mean()), features="transformed", B=3, SS=2, seed=2)


@pytest.mark.parametrize("kind", ["within", "fd"])
def test_fixed_effect_invariance(linear, kind):
    shifted = _shift(linear, 0)
    cfg = SlcfConfig(kind, **LINEAR_TRANSFORMED)
    pairs = [
        (wols(linear, kind), wols(shifted, kind)),
        (w2sls(linear, 1, kind), w2sls(shifted, 1, kind)),
        (plugin_iv(linear, cfg), plugin_iv(shifted, cfg)),
        (naive_plugin_2sls(linear, cfg), naive_plugin_2sls(shifted, cfg)),
    ]
    for a, b in pairs:
        assert np.max(np.abs(a.coef - b.coef)) <= 1e-10, a.name
        assert np.allclose(a.se, b.se, rtol=1e-8), a.name


def test_polynomial_2sls_invariant_to_outcome_and_regressor_effects(linear):
    # instruments are expanded in levels, so only y and x1 shifts leave them untouched
    shifted = _shift(linear, 1, fields=("y", "x1"))
    a, b = w2sls(linear, 5), w2sls(shifted, 5)
    assert np.max(np.abs(a.coef - b.coef)) <= 1e-10


def test_wols_duplicate_individuals(nonlinear):
    st = nonlinear.stacked
    shape = (nonlinear.N, 2)
    arrays = [st["y"].reshape(shape), st["x1"].reshape(shape), st["x_exog"][:, 0].reshape(shape), st["z"][:, 0].reshape(shape)]
    doubled = PanelDataset.from_arrays(*[np.vstack([a, a]) for a in arrays])
    assert abs(wols(doubled).beta1 - wols(nonlinear).beta1) <= 1e-12
    assert abs(w2sls(doubled).beta1 - w2sls(nonlinear).beta1) <= 1e-12


def test_standard_errors_invariant_to_individual_order(nonlinear):
    perm = np.random.default_rng(0).permutation(nonlinear.N)
    shuffled = PanelDataset(tuple(nonlinear.individuals[i] for i in perm), nonlinear.n_exog, nonlinear.n_inst)
    for f in (wols, w2sls, lambda d: w2sls(d, 5)):
        a, b = f(nonlinear), f(shuffled)
        assert np.allclose(a.coef, b.coef, rtol=1e-10)
        assert np.allclose(a.se, b.se, rtol=1e-10)


def test_polynomial_span_nesting(nonlinear):
    Z1 = polynomial_instruments(nonlinear, 1)
    Z5 = polynomial_instruments(nonlinear, 5)
    assert Z5.shape[1] == 5 * Z1.shape[1]
    resid = Z1 - Z5 @ np.linalg.lstsq(Z5, Z1, rcond=None)[0]
    assert np.max(np.abs(resid)) <= 1e-8
    Zi = polynomial_instruments(nonlinear, 2, interactions=True)
    assert Zi.shape[1] == 2 + 3  # z, x2, z^2, z x2, x2^2
    with pytest.raises(ValueError):
        polynomial_instruments(nonlinear, 0)
    assert w2sls(nonlinear, 5).name == "W2SLS_poly5"


def test_linear_first_stage_collapse():
    data = gen_dgp1(DgpConfig(a=5, N=400, T=2, seed=6, g=_linear_g))
    cfg = SlcfConfig("within", sl_specs=(Linear(),), features="transformed", crossfit=False, weighting="identity")
    iv = plugin_iv(data, cfg, crossfit=False)
    naive = naive_plugin_2sls(data, cfg, crossfit=False)
    cf = slcf_estimate(data, cfg)
    classical = w2sls(data, 1)
    for other in (iv.beta1, naive.beta1, cf.beta1):
        assert abs(other - classical.beta1) <= 1e-8


def test_w2sls_consistent_with_linear_first_stage():
    est = [w2sls(gen_dgp1(DgpConfig(a=5, N=1000, T=2, seed=7, g=_linear_g), r)).beta1 for r in range(20)]
    assert abs(np.mean(est) - 1.0) <= 0.05


def test_wols_bias_sign():
    biased = [wols(gen_dgp1(DgpConfig(a=1, N=500, T=2, seed=8), r)).beta1 for r in range(20)]
    clean = [wols(gen_dgp1(DgpConfig(a=1, N=500, T=2, seed=8, rho=0.0), r)).beta1 for r in range(20)]
    se = np.std(biased, ddof=1) / np.sqrt(20)
    assert np.mean(biased) - 1.0 > 1.96 * se
    assert abs(np.mean(clean) - 1.0) <= 3 * np.std(clean, ddof=1) / np.sqrt(20)


def test_plugin_estimators_differ_from_slcf(nonlinear):
    cfg = SlcfConfig("fd", B=5, SS=1, seed=3)
    preds = first_stage_predictions(nonlinear, cfg)
    cf = slcf_estimate(nonlinear, cfg).beta1
    iv = plugin_iv(nonlinear, cfg, predictions=preds).beta1
    naive = naive_plugin_2sls(nonlinear, cfg, predictions=preds).beta1
    assert abs(cf - iv) > 1e-6 and abs(cf - naive) > 1e-6 and abs(iv - naive) > 1e-6
    # shared predictions are the ones the estimator would compute itself
    assert plugin_iv(nonlinear, cfg).beta1 == iv


def test_naive_with_exact_first_stage_equals_wols(nonlinear):
    cfg = SlcfConfig("within")
    target = first_stage_features(nonlinear, cfg).target
    exact = FirstStagePredictions([target], [None], [], False)
    assert np.allclose(naive_plugin_2sls(nonlinear, cfg, predictions=exact).coef, wols(nonlinear).coef, atol=1e-10)


def test_weak_fitted_instrument_raises(nonlinear):
    cfg = SlcfConfig("fd")
    zero = FirstStagePredictions([np.zeros(nonlinear.N)], [None], [], False)
    with pytest.raises(WeakInstrumentError):
        plugin_iv(nonlinear, cfg, predictions=zero)
    with pytest.raises(WeakInstrumentError):
        naive_plugin_2sls(nonlinear, cfg, predictions=zero)


def test_plugin_names_and_ci(nonlinear):
    cfg = SlcfConfig("fd", sl_specs=(Linear(), Mean()), B=2, SS=1)
    assert plugin_iv(nonlinear, cfg).name == "PIV"
    assert plugin_iv(nonlinear, cfg, crossfit=False).name == "PIV_nocf"
    fit = naive_plugin_2sls(nonlinear, cfg)
    assert fit.name == "N2SLS"
    assert np.all(fit.se > 0)
    assert np.allclose(fit.ci95.mean(axis=1), fit.coef)
