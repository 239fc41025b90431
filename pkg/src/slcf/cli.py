"""Command line interface: ``slcf estimate|simulate|compare --config FILE``.

Exit codes: 0 success, 2 usage or configuration error (including a CSV
missing a schema column), 3 data error, 4 numerical failure.

Machine-readable outputs carry a ``schema_version`` and print floats with 17
significant digits (CSV) or their shortest round-trip representation (JSON);
the console summary uses 4 significant digits.  See ``docs/formats.md``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from slcf.baselines import BaselineFit, first_stage_predictions, naive_plugin_2sls, plugin_iv, w2sls, wols
from slcf.estimator import SlcfConfig, SlcfFit, slcf_estimate
from slcf.learners import learner_from_dict, learner_to_dict
from slcf.panel import MissingColumnError, PanelDataset, PanelFormatError, TransformKind, load_csv
from slcf.simulation import (
    ESTIMATORS,
    SCHEMA_VERSION,
    DgpConfig,
    McConfig,
    gen_dgp1,
    run_monte_carlo,
    sweep_a,
    write_replications_csv,
    write_summary_json,
    write_sweep_csv,
)

__all__ = ["ConfigError", "RunConfig", "load_run_config", "main"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMPARE_ESTIMATORS = ESTIMATORS + ("SLCF",)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# --------------------------------------------------------------------------
# configuration


_TOP_KEYS = {"schema_version", "seed", "data", "slcf", "plugin", "simulation", "compare", "output"}
_DATA_KEYS = {"path", "schema"}
_SCHEMA_KEYS = {"id", "time", "y", "x1", "exog", "instruments"}
_SLCF_KEYS = {
    "transform", "B", "SS", "K", "library", "weighting", "aggregate", "features", "full_stack", "meta", "crossfit",
}
_SIM_KEYS = {"a", "a_grid", "N", "T", "R", "beta1", "beta2", "rho", "estimators", "poly_degree"}
_COMPARE_KEYS = {"estimators", "source", "a", "N", "T", "equivalence_tol"}
_OUTPUT_KEYS = {"dir"}


def _check_keys(section: Any, allowed: set[str], where: str) -> dict[str, Any]:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")
    return dict(section)


def _int(v: Any, where: str, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{where} must be >= {lo}, got {v}")
    return v


def _num(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where} must be a finite number, got {v!r}")
    return float(v)


@dataclass(frozen=True)
class RunConfig:
    """Validated contents of a config file plus command line overrides."""

    seed: int
    data_path: Path | None
    schema: dict[str, Any] | None
    slcf: SlcfConfig
    plugin: SlcfConfig | None
    simulation: dict[str, Any]
    compare: dict[str, Any]
    out_dir: Path
    threads: int = 1


def _slcf_config(section: Mapping[str, Any], seed: int, where: str) -> SlcfConfig:
    s = _check_keys(section, _SLCF_KEYS, where)
    kwargs: dict[str, Any] = {"seed": seed}
    try:
        if "transform" in s:
            kwargs["transform"] = TransformKind.parse(s["transform"])
        for key, name in (("B", "B"), ("SS", "SS"), ("K", "sl_folds")):
            if key in s:
                kwargs[name] = _int(s[key], f"{where}.{key}", 1)
        for key in ("weighting", "aggregate", "features", "meta"):
            if key in s:
                kwargs[key] = s[key]
        for key in ("full_stack", "crossfit"):
            if key in s:
                if not isinstance(s[key], bool):
                    raise ConfigError(f"{where}.{key} must be true or false")
                kwargs[key] = s[key]
        if "library" in s:
            lib = s["library"]
            if not isinstance(lib, list) or not lib:
                raise ConfigError(f"{where}.library must be a nonempty list of learners")
            kwargs["sl_specs"] = tuple(learner_from_dict({"seed": seed, **d}) for d in lib)
        return SlcfConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(
    path: str | Path,
    seed: int | None = None,
    out: str | Path | None = None,
    transform: str | None = None,
    data: str | Path | None = None,
    threads: int | None = None,
) -> RunConfig:
    """Read and validate a JSON config; keyword arguments override file values."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    doc = _check_keys(doc, _TOP_KEYS, "config")
    if "schema_version" in doc and doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}")
    master = _int(doc.get("seed", 0), "seed", 0) if seed is None else _int(seed, "--seed", 0)

    data_path = schema = None
    if "data" in doc:
        d = _check_keys(doc["data"], _DATA_KEYS, "data")
        if "schema" in d:
            schema = _check_keys(d["schema"], _SCHEMA_KEYS, "data.schema")
            for role in ("id", "time", "y", "x1"):
                if not isinstance(schema.get(role), str):
                    raise ConfigError(f"data.schema.{role} must name a column")
            for role in ("exog", "instruments"):
                v = schema.get(role, [])
                if not isinstance(v, list) or not all(isinstance(c, str) for c in v):
                    raise ConfigError(f"data.schema.{role} must be a list of column names")
            if not schema.get("instruments"):
                raise ConfigError("data.schema.instruments must list at least one column")
        if "path" in d:
            data_path = (path.parent / d["path"]) if not Path(d["path"]).is_absolute() else Path(d["path"])
    if data is not None:
        data_path = Path(data)

    slcf_section = dict(doc.get("slcf", {}))
    if transform is not None:
        slcf_section["transform"] = transform
    slcf = _slcf_config(slcf_section, master, "slcf")
    plugin = _slcf_config(doc["plugin"], master, "plugin") if "plugin" in doc else None

    sim = _check_keys(doc.get("simulation", {}), _SIM_KEYS, "simulation")
    if "a" in sim and "a_grid" in sim:
        raise ConfigError("simulation: give either a or a_grid, not both")
    if "estimators" in sim:
        _estimator_list(sim["estimators"], ESTIMATORS, "simulation.estimators")
    cmp_ = _check_keys(doc.get("compare", {}), _COMPARE_KEYS, "compare")
    if "estimators" in cmp_:
        _estimator_list(cmp_["estimators"], COMPARE_ESTIMATORS, "compare.estimators")
    if cmp_.get("source", "data") not in ("data", "dgp"):
        raise ConfigError("compare.source must be 'data' or 'dgp'")

    output = _check_keys(doc.get("output", {}), _OUTPUT_KEYS, "output")
    out_dir = Path(out) if out is not None else Path(output.get("dir", "slcf_out"))
    n_threads = 1 if threads is None else _int(threads, "--threads", 1)
    return RunConfig(master, data_path, schema, slcf, plugin, sim, cmp_, out_dir, n_threads)


def _estimator_list(v: Any, allowed: Sequence[str], where: str) -> list[str]:
    if not isinstance(v, list) or not all(isinstance(e, str) for e in v):
        raise ConfigError(f"{where} must be a list of estimator names")
    if not v:
        raise ConfigError(f"{where} is empty")
    bad = [e for e in v if e not in allowed]
    if bad:
        raise ConfigError(f"{where}: unknown estimators {bad}; choose from {list(allowed)}")
    if len(set(v)) != len(v):
        raise ConfigError(f"{where} lists an estimator twice")
    return v


# --------------------------------------------------------------------------
# output helpers


def _g17(v: float) -> str:
    return format(float(v), ".17g")


def _g4(v: float) -> str:
    return format(float(v), ".4g")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_g17(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _json_value(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return _json_value(v.tolist())
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, TransformKind):
        return v.value
    return v


def _write_json(path: Path, doc: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(_json_value(dict(doc)), indent=2) + "\n")


def _slcf_echo(c: SlcfConfig) -> dict[str, Any]:
    return {
        "transform": c.transform.value,
        "B": c.B,
        "SS": c.SS,
        "K": c.sl_folds,
        "library": [learner_to_dict(s) for s in c.sl_specs],
        "weighting": c.weighting,
        "aggregate": c.aggregate,
        "features": c.features,
        "full_stack": c.full_stack,
        "meta": c.meta,
        "crossfit": c.crossfit,
        "seed": c.seed,
    }


def _load_data(cfg: RunConfig) -> PanelDataset:
    if cfg.data_path is None:
        raise ConfigError("no input data: set data.path in the config or pass --data")
    if cfg.schema is None:
        raise ConfigError("data.schema is required to read a CSV")
    if not cfg.data_path.exists():
        raise ConfigError(f"data file {cfg.data_path} not found")
    return load_csv(cfg.data_path, cfg.schema, kind=cfg.slcf.transform)


def _check_sizes(data: PanelDataset, c: SlcfConfig) -> None:
    if not c.crossfit:
        n_train = data.N
    else:
        if data.N < c.B:
            raise PanelFormatError(f"{data.N} individuals cannot be split into B={c.B} folds")
        n_train = data.N - math.ceil(data.N / c.B)
    if len(c.sl_specs) > 1 and n_train < 2 * c.sl_folds:
        raise PanelFormatError(
            f"too few individuals: each first-stage fit sees {n_train}, the super learner needs {2 * c.sl_folds}"
        )


def _coef_labels(cfg: RunConfig, names: Sequence[str]) -> list[str]:
    if cfg.schema is None:
        return list(names)
    mapping = {"x1": cfg.schema["x1"]}
    mapping.update({f"x{j + 2}": c for j, c in enumerate(cfg.schema.get("exog", []))})
    return [mapping.get(n, n) for n in names]


# --------------------------------------------------------------------------
# commands


def cmd_estimate(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    _check_sizes(data, cfg.slcf)
    fit = slcf_estimate(data, cfg.slcf)
    labels = _coef_labels(cfg, fit.names)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ps = fit.per_split_thetas
    split_sd = ps.std(axis=0, ddof=1) if ps.shape[0] > 1 else np.zeros(ps.shape[1])
    rows = []
    for j, name in enumerate(labels):
        rows.append(
            [
                SCHEMA_VERSION, name, fit.theta[j], fit.standard_errors[j], fit.ci95[j, 0], fit.ci95[j, 1],
                split_sd[j], ps[:, j].min(), ps[:, j].max(),
            ]
        )
    _write_csv(
        cfg.out_dir / "estimate.csv",
        ["schema_version", "coefficient", "estimate", "se", "ci_lo", "ci_hi", "split_sd", "split_min", "split_max"],
        rows,
    )
    _write_json(
        cfg.out_dir / "estimate.json",
        {
            "schema_version": SCHEMA_VERSION,
            "command": "estimate",
            "config": _slcf_echo(cfg.slcf),
            "n_individuals": fit.n_individuals,
            "n_total": fit.n_total,
            "coefficients": labels,
            "theta": fit.theta,
            "se": fit.standard_errors,
            "ci95": fit.ci95,
            "sigma": fit.sigma,
            "correction": fit.correction,
            "per_split_thetas": fit.per_split_thetas,
            "n_resampled": fit.n_resampled,
            "first_stage": fit.first_stage,
        },
    )
    print(_estimate_summary(fit, labels, cfg.slcf))
    return EXIT_OK


def _estimate_summary(fit: SlcfFit, labels: Sequence[str], c: SlcfConfig) -> str:
    lines = [
        f"SLCF estimate ({c.transform.value}, B={c.B}, SS={c.SS}, K={c.sl_folds}); "
        f"N={fit.n_individuals}, N_T={fit.n_total}",
        f"{'coefficient':<14}{'estimate':>12}{'se':>12}{'ci_lo':>12}{'ci_hi':>12}",
    ]
    for j, name in enumerate(labels):
        lines.append(
            f"{name:<14}{_g4(fit.theta[j]):>12}{_g4(fit.standard_errors[j]):>12}"
            f"{_g4(fit.ci95[j, 0]):>12}{_g4(fit.ci95[j, 1]):>12}"
        )
    diag = [d for d in fit.first_stage if "weights" in d]
    if diag:
        learners = diag[0]["learners"]
        w = np.mean([d["weights"] for d in diag], axis=0)
        r = np.nanmean([d["cv_risks"] for d in diag], axis=0) if len(learners) > 1 else [float("nan")]
        lines.append("first stage super learner (averaged over folds and splits):")
        for k, name in enumerate(learners):
            lines.append(f"  {name:<10} weight {_g4(w[k]):>8}   cv risk {_g4(r[k]):>10}")
    return "\n".join(lines)


def _mc_config(cfg: RunConfig) -> McConfig:
    s = cfg.simulation
    try:
        dgp = DgpConfig(
            a=_num(s.get("a", 5.0), "simulation.a"),
            N=_int(s.get("N", 1000), "simulation.N", 10),
            T=_int(s.get("T", 2), "simulation.T", 2),
            beta1=_num(s.get("beta1", 1.0), "simulation.beta1"),
            beta2=_num(s.get("beta2", 1.0), "simulation.beta2"),
            rho=_num(s.get("rho", 0.9), "simulation.rho"),
            seed=cfg.seed,
        )
        grid = None
        if "a_grid" in s:
            if not isinstance(s["a_grid"], list) or not s["a_grid"]:
                raise ConfigError("simulation.a_grid must be a nonempty list")
            grid = tuple(_num(a, "simulation.a_grid") for a in s["a_grid"])
            if any(a <= 0 for a in grid):
                raise ConfigError("simulation.a_grid values must be positive")
        return McConfig(
            dgp=dgp,
            R=_int(s.get("R", 100), "simulation.R", 2),
            estimators=tuple(s.get("estimators", ("WOLS", "W2SLS", "W2SLS_poly", "FDCF", "WCF"))),
            slcf=cfg.slcf,
            plugin=cfg.plugin,
            a_grid=grid,
            poly_degree=_int(s.get("poly_degree", 5), "simulation.poly_degree", 1),
            threads=cfg.threads,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"simulation: {exc}") from None


def cmd_simulate(cfg: RunConfig) -> int:
    mc = _mc_config(cfg)
    results = sweep_a(mc) if mc.a_grid else [run_monte_carlo(mc)]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_replications_csv(results, cfg.out_dir / "replications.csv")
    write_summary_json(results, cfg.out_dir / "summary.json", mc)
    write_sweep_csv(results, cfg.out_dir / "sweep.csv")
    lines = []
    for res in results:
        lines.append(f"a={_g4(res.a)}  N={res.N}  T={res.T}  R={res.R}")
        lines.append(f"  {'estimator':<12}{'mean b1':>10}{'bias':>10}{'sd':>10}{'rmse':>10}{'cover%':>8}{'failed':>8}")
        for name, s in res.summary.items():
            lines.append(
                f"  {name:<12}{_g4(s.mean):>10}{_g4(s.bias):>10}{_g4(s.sd):>10}{_g4(s.rmse):>10}"
                f"{_g4(s.coverage):>8}{s.n_failed:>8}"
            )
    print("\n".join(lines))
    return EXIT_OK


def _compare_data(cfg: RunConfig) -> PanelDataset:
    c = cfg.compare
    if c.get("source", "data") == "data":
        return _load_data(cfg)
    dgp = DgpConfig(
        a=_num(c.get("a", 5.0), "compare.a"),
        N=_int(c.get("N", 1000), "compare.N", 10),
        T=_int(c.get("T", 2), "compare.T", 2),
        seed=cfg.seed,
    )
    return gen_dgp1(dgp)


def run_compare(data: PanelDataset, cfg: RunConfig, estimators: Sequence[str]) -> dict[str, SlcfFit | BaselineFit]:
    """Fit each named estimator; plug-in estimators share first-stage predictions."""
    plugin_cfg = cfg.plugin or cfg.slcf
    fits: dict[str, Any] = {}
    preds: dict[bool, Any] = {}
    for name in estimators:
        if name == "WOLS":
            fits[name] = wols(data)
        elif name == "W2SLS":
            fits[name] = w2sls(data, 1)
        elif name == "W2SLS_poly":
            fits[name] = w2sls(data, int(cfg.simulation.get("poly_degree", 5)))
        elif name == "SLCF":
            fits[name] = slcf_estimate(data, cfg.slcf)
        elif name in ("FDCF", "WCF"):
            kind = TransformKind.FIRST_DIFFERENCE if name == "FDCF" else TransformKind.WITHIN
            fits[name] = slcf_estimate(data, replace(cfg.slcf, transform=kind))
        else:
            crossfit = name != "PIV_nocf"
            if crossfit not in preds:
                preds[crossfit] = first_stage_predictions(data, plugin_cfg, crossfit=crossfit)
            if name == "N2SLS":
                fits[name] = naive_plugin_2sls(data, plugin_cfg, predictions=preds[crossfit])
            else:
                fits[name] = plugin_iv(data, plugin_cfg, crossfit=crossfit, predictions=preds[crossfit])
    return fits


def _row(fit: SlcfFit | BaselineFit) -> tuple[float, float, float, float]:
    if isinstance(fit, SlcfFit):
        return fit.theta[0], fit.standard_errors[0], fit.ci95[0, 0], fit.ci95[0, 1]
    return fit.coef[0], fit.se[0], fit.ci95[0, 0], fit.ci95[0, 1]


def cmd_compare(cfg: RunConfig) -> int:
    estimators = cfg.compare.get("estimators", list(COMPARE_ESTIMATORS[:-1]))
    _estimator_list(estimators, COMPARE_ESTIMATORS, "compare.estimators")
    tol = _num(cfg.compare.get("equivalence_tol", 1e-6), "compare.equivalence_tol")
    data = _compare_data(cfg)
    if any(e in ("SLCF", "FDCF", "WCF", "PIV", "PIV_nocf", "N2SLS") for e in estimators):
        _check_sizes(data, cfg.plugin or cfg.slcf)
        _check_sizes(data, cfg.slcf)
    fits = run_compare(data, cfg, estimators)
    rows = {name: _row(f) for name, f in fits.items()}
    cf_names = [e for e in estimators if e in ("SLCF", "FDCF", "WCF")]
    pi_names = [e for e in estimators if e in ("PIV", "PIV_nocf", "N2SLS")]
    pairs = []
    group = cf_names + pi_names
    for i, a in enumerate(group):
        for b in group[i + 1 :]:
            if a in cf_names and b in cf_names:
                continue
            diff = abs(rows[a][0] - rows[b][0])
            pairs.append({"a": a, "b": b, "abs_diff_beta1": diff, "non_equivalent": bool(diff > tol)})
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        cfg.out_dir / "compare.csv",
        ["schema_version", "estimator", "beta1", "se", "ci_lo", "ci_hi"],
        [[SCHEMA_VERSION, name, *map(float, r)] for name, r in rows.items()],
    )
    _write_json(
        cfg.out_dir / "compare.json",
        {
            "schema_version": SCHEMA_VERSION,
            "command": "compare",
            "n_individuals": data.N,
            "n_total": data.n_total,
            "equivalence_tol": tol,
            "estimators": {name: dict(zip(("beta1", "se", "ci_lo", "ci_hi"), map(float, r))) for name, r in rows.items()},
            "pairwise": pairs,
        },
    )
    lines = [f"{'estimator':<12}{'beta1':>12}{'se':>12}{'ci_lo':>12}{'ci_hi':>12}"]
    for name, r in rows.items():
        lines.append(f"{name:<12}" + "".join(f"{_g4(v):>12}" for v in r))
    for p in pairs:
        flag = "NOT equivalent" if p["non_equivalent"] else "equivalent"
        lines.append(f"|{p['a']} - {p['b']}| = {_g4(p['abs_diff_beta1'])}  ({flag} at tol {_g4(tol)})")
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slcf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "estimate": "cross-fitted SLCF estimate on a CSV panel",
        "simulate": "Monte Carlo study on the simulation design",
        "compare": "side-by-side estimator comparison on a CSV panel or a simulated panel",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--threads", type=int, help="worker threads for Monte Carlo replications")
        p.add_argument("--transform", choices=["fd", "within"], help="override slcf.transform")
        if name != "simulate":
            p.add_argument("--data", help="input CSV (overrides data.path)")
    return parser


_COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_run_config(
            args.config,
            seed=args.seed,
            out=args.out,
            transform=args.transform,
            data=getattr(args, "data", None),
            threads=args.threads,
        )
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"slcf: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingColumnError as exc:
        print(f"slcf: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PanelFormatError as exc:
        print(f"slcf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"slcf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"slcf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
