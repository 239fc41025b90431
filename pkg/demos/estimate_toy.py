"""Estimate the toy panel shipped with the package and print the fit.

Run with ``python3 demos/estimate_toy.py``.  The same numbers come from
``slcf estimate --config src/slcf/data/toy_config.json``.
"""

from importlib import resources

import numpy as np

from slcf import SlcfConfig, load_csv, slcf_estimate, wols

SCHEMA = {"id": "id", "time": "time", "y": "y", "x1": "x1", "exog": ["x2"], "instruments": ["z"]}


def main() -> None:
    path = resources.files("slcf") / "data" / "toy_panel.csv"
    data = load_csv(path, SCHEMA, kind="fd")
    # the default library (linear model, network, mean) is seeded by ``seed``
    config = SlcfConfig(
        transform="fd",
        B=5,
        SS=2,
        sl_folds=5,
        seed=7,
    )
    fit = slcf_estimate(data, config)
    print(f"N = {fit.n_individuals}, N_T = {fit.n_total}")
    for name, est, se, (lo, hi) in zip(fit.names, fit.theta, fit.standard_errors, fit.ci95):
        print(f"{name:>4s}  {est: .4f}  se {se:.4f}  95% CI [{lo: .4f}, {hi: .4f}]")

    # average super learner weights across all (split, fold) fits
    weights = np.mean([d["weights"] for d in fit.first_stage], axis=0)
    for learner, w in zip(fit.first_stage[0]["learners"], weights):
        print(f"weight {learner:>6s}  {w:.3f}")

    # the within OLS fit ignores endogeneity
    print(f"WOLS beta1 = {wols(data).beta1:.4f}")


if __name__ == "__main__":
    main()
