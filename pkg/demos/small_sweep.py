"""A small Monte Carlo sweep over the nonlinearity parameter ``a``.

Run with ``python3 demos/small_sweep.py``.  It takes under a minute; raise
``N`` and ``R`` for a study closer to the full design.
"""

from slcf import DgpConfig, Linear, McConfig, Mean, NeuralNet, SlcfConfig, sweep_a


def main() -> None:
    config = McConfig(
        dgp=DgpConfig(N=300, T=2, seed=11),
        R=10,
        estimators=("WOLS", "W2SLS", "W2SLS_poly", "FDCF", "WCF"),
        slcf=SlcfConfig(B=5, SS=2, sl_specs=(Linear(), NeuralNet(), Mean())),
        a_grid=(1.0, 5.0, 10.0),
    )
    print(f"{'a':>4s} {'estimator':>10s} {'mean':>8s} {'sd':>8s} {'cover%':>7s}")
    for study in sweep_a(config):
        for name, s in study.summary.items():
            print(f"{study.a:4g} {name:>10s} {s.mean:8.4f} {s.sd:8.4f} {s.coverage:7.1f}")


if __name__ == "__main__":
    main()
