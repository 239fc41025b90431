"""Simulation design with a nonlinear reduced form, Monte Carlo driver and result files.

The data generating process (two periods in the reference design)::

    alpha_i ~ U(-1, 1)
    x2 = alpha + zeta,      zeta ~ U(-2, 2)
    z  = alpha + nu,        nu ~ U(-2, 2)
    x1 = g(x2, z) + alpha + u,          u ~ U(-1, 1)
    eps = rho * u + zeta_tilde,         zeta_tilde ~ U(-1, 1)
    y  = beta1 * x1 + beta2 * x2 + alpha + eps

with ``g(x2, z) = -a |z| - 2 tanh(x2) + z / a``.  Larger ``a`` makes the
reduced form more nonlinear and weakens the linear correlation between
``x1`` and ``z``.

Replication ``r`` of a study with master seed ``s`` draws its data from a
Philox generator seeded by ``SeedSequence([s, r])``; estimators that need
randomness receive a seed derived from ``SeedSequence([s, r, 1])``.  Any
subset of replications can therefore be re-run in isolation.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from slcf.baselines import first_stage_predictions, naive_plugin_2sls, plugin_iv, w2sls, wols
from slcf.estimator import SlcfConfig, slcf_estimate
from slcf.learners import learner_to_dict
from slcf.panel import PanelDataset, TransformKind

__all__ = [
    "ESTIMATORS",
    "SCHEMA_VERSION",
    "DgpConfig",
    "DgpTruth",
    "EstimatorSummary",
    "McConfig",
    "McResult",
    "g_fun",
    "gen_dgp1",
    "read_replications_csv",
    "read_summary_json",
    "replication_seed",
    "run_monte_carlo",
    "sweep_a",
    "sweep_records",
    "write_replications_csv",
    "write_summary_json",
    "write_sweep_csv",
]

SCHEMA_VERSION = 1

ESTIMATORS = ("WOLS", "W2SLS", "W2SLS_poly", "FDCF", "WCF", "PIV", "PIV_nocf", "N2SLS")
_SLCF = ("FDCF", "WCF")


def g_fun(a: float, x2: np.ndarray | float, z: np.ndarray | float) -> np.ndarray | float:
    """``-a |z| - 2 tanh(x2) + z / a``."""
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    return -a * np.abs(z) - 2.0 * np.tanh(x2) + z / a


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the simulation design.

    ``g`` optionally replaces :func:`g_fun`; it is called as ``g(a, x2, z)``.
    """

    a: float = 5.0
    N: int = 1000
    T: int = 2
    beta1: float = 1.0
    beta2: float = 1.0
    rho: float = 0.9
    seed: int = 0
    g: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if self.N < 10:
            raise ValueError(f"N must be >= 10, got {self.N}")
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")


@dataclass(frozen=True)
class DgpTruth:
    """Unobserved components of a simulated panel, each shaped ``(N, T)`` (``alpha`` is ``(N,)``)."""

    alpha: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    g: np.ndarray

    def stacked(self, name: str) -> np.ndarray:
        """Individual-major stacking matching :attr:`PanelDataset.stacked`."""
        v = getattr(self, name)
        if v.ndim == 1:
            v = np.repeat(v[:, None], self.u.shape[1], axis=1)
        return v.reshape(-1)


def _generator(seed: int, replication: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication)])))


def replication_seed(seed: int, replication: int) -> int:
    """Seed handed to estimators for replication ``replication``."""
    return int(np.random.SeedSequence([int(seed), int(replication), 1]).generate_state(1)[0])


def gen_dgp1(
    config: DgpConfig, replication: int = 0, return_truth: bool = False
) -> PanelDataset | tuple[PanelDataset, DgpTruth]:
    """Draw one panel.

    Per individual the uniforms are consumed in the order ``alpha``, then for
    each period ``zeta, nu, u, zeta_tilde``.
    """
    N, T = config.N, config.T
    U = _generator(config.seed, replication).random((N, 1 + 4 * T))
    alpha = 2.0 * U[:, 0] - 1.0
    draws = U[:, 1:].reshape(N, T, 4)
    zeta = 4.0 * draws[:, :, 0] - 2.0
    nu = 4.0 * draws[:, :, 1] - 2.0
    u = 2.0 * draws[:, :, 2] - 1.0
    zeta_t = 2.0 * draws[:, :, 3] - 1.0
    a = alpha[:, None]
    x2 = a + zeta
    z = a + nu
    g = (config.g or g_fun)(config.a, x2, z)
    x1 = g + a + u
    eps = config.rho * u + zeta_t
    y = config.beta1 * x1 + config.beta2 * x2 + a + eps
    data = PanelDataset.from_arrays(y, x1, x2, z)
    if return_truth:
        return data, DgpTruth(alpha, u, eps, g)
    return data


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class McConfig:
    """A Monte Carlo study.

    ``slcf`` configures the FDCF/WCF estimators (its transform is overridden
    per estimator, its seed by the replication seed).  ``plugin`` configures
    the plug-in estimators and defaults to ``slcf``.
    """

    dgp: DgpConfig = field(default_factory=DgpConfig)
    R: int = 100
    estimators: tuple[str, ...] = ("WOLS", "W2SLS", "W2SLS_poly", "FDCF", "WCF")
    slcf: SlcfConfig = field(default_factory=SlcfConfig)
    plugin: SlcfConfig | None = None
    a_grid: tuple[float, ...] | None = None
    poly_degree: int = 5
    threads: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.R < 2:
            raise ValueError(f"R must be >= 2, got {self.R}")
        if not self.estimators:
            raise ValueError("the estimator list is empty")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}; choose from {list(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ValueError("duplicate estimator names")
        if self.a_grid is not None:
            object.__setattr__(self, "a_grid", tuple(float(a) for a in self.a_grid))
            if not self.a_grid:
                raise ValueError("a_grid is empty")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    n_ok: int
    n_failed: int
    mean: float
    sd: float
    bias: float
    rmse: float
    coverage: float
    mean_se: float
    mean_rho: float | None = None
    rho_rejection: float | None = None


@dataclass(frozen=True)
class McResult:
    """Per-replication records and per-estimator summaries of one study.

    ``records`` hold one entry per (replication, estimator, coefficient);
    ``failures`` one entry per failed (replication, estimator).
    """

    a: float
    N: int
    T: int
    R: int
    seed: int
    records: list[dict[str, Any]]
    failures: list[dict[str, Any]]
    summary: dict[str, EstimatorSummary]

    def beta1(self, estimator: str) -> np.ndarray:
        """``beta1`` estimates of the successful replications, in replication order."""
        return np.array(
            [r["estimate"] for r in self.records if r["estimator"] == estimator and r["coefficient"] == "x1"]
        )


def _estimate_one(name: str, data: PanelDataset, config: McConfig, seed: int, cache: dict) -> Any:
    if name == "WOLS":
        return wols(data)
    if name == "W2SLS":
        return w2sls(data, 1)
    if name == "W2SLS_poly":
        return w2sls(data, config.poly_degree)
    if name in _SLCF:
        kind = TransformKind.FIRST_DIFFERENCE if name == "FDCF" else TransformKind.WITHIN
        return slcf_estimate(data, replace(config.slcf, transform=kind, seed=seed))
    pcfg = replace(config.plugin or config.slcf, seed=seed)
    crossfit = name != "PIV_nocf"
    key = ("pred", crossfit)
    if key not in cache:
        cache[key] = first_stage_predictions(data, pcfg, crossfit=crossfit)
    if name == "N2SLS":
        return naive_plugin_2sls(data, pcfg, predictions=cache[key])
    return plugin_iv(data, pcfg, crossfit=crossfit, predictions=cache[key])


def _replication(config: McConfig, r: int) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    data = gen_dgp1(config.dgp, r)
    seed = replication_seed(config.dgp.seed, r)
    records, failures = [], []
    cache: dict = {}
    for name in config.estimators:
        try:
            fit = _estimate_one(name, data, config, seed, cache)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            failures.append({"replication": r, "estimator": name, "error": f"{type(exc).__name__}: {exc}"})
            continue
        if name in _SLCF:
            coefs, ses, cis, names = fit.theta, fit.standard_errors, fit.ci95, fit.names
        else:
            coefs, ses, cis, names = fit.coef, fit.se, fit.ci95, fit.names
        for j, cname in enumerate(names):
            records.append(
                {
                    "replication": r,
                    "estimator": name,
                    "coefficient": cname,
                    "estimate": float(coefs[j]),
                    "se": float(ses[j]),
                    "ci_lo": float(cis[j, 0]),
                    "ci_hi": float(cis[j, 1]),
                }
            )
    return records, failures


def _summarize(name: str, records: list[dict[str, Any]], n_failed: int, beta1: float) -> EstimatorSummary:
    rows = [r for r in records if r["estimator"] == name and r["coefficient"] == "x1"]
    b = np.array([r["estimate"] for r in rows])
    n = b.size
    if n == 0:
        nan = float("nan")
        return EstimatorSummary(name, 0, n_failed, nan, nan, nan, nan, nan, nan)
    covered = np.array([r["ci_lo"] <= beta1 <= r["ci_hi"] for r in rows])
    mean = float(b.mean())
    sd = float(b.std(ddof=1)) if n > 1 else 0.0
    rmse = float(np.sqrt(np.mean((b - beta1) ** 2)))
    mean_rho = rho_rej = None
    if name in _SLCF:
        rho = [r for r in records if r["estimator"] == name and r["coefficient"] == "rho"]
        mean_rho = float(np.mean([r["estimate"] for r in rho]))
        rho_rej = 100.0 * float(np.mean([not (r["ci_lo"] <= 0.0 <= r["ci_hi"]) for r in rho]))
    return EstimatorSummary(
        estimator=name,
        n_ok=n,
        n_failed=n_failed,
        mean=mean,
        sd=sd,
        bias=mean - beta1,
        rmse=rmse,
        coverage=100.0 * float(covered.mean()),
        mean_se=float(np.mean([r["se"] for r in rows])),
        mean_rho=mean_rho,
        rho_rejection=rho_rej,
    )


def run_monte_carlo(
    config: McConfig,
    replications: Sequence[int] | None = None,
    progress: Callable[[int], None] | None = None,
) -> McResult:
    """Run every estimator on ``R`` simulated panels and aggregate ``beta1`` metrics.

    ``replications`` restricts the run to a subset of replication indices
    (each still drawn with its own seed).  A replication on which an
    estimator raises a numerical or validation error is excluded from that
    estimator's summary and listed in ``failures``.
    """
    reps = list(range(config.R)) if replications is None else sorted(int(r) for r in replications)

    def work(r: int):
        out = _replication(config, r)
        if progress is not None:
            progress(r)
        return out

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, reps))
    else:
        results = [work(r) for r in reps]
    records = [row for recs, _ in results for row in recs]
    failures = [row for _, fails in results for row in fails]
    summary = {}
    for name in config.estimators:
        n_failed = sum(1 for f in failures if f["estimator"] == name)
        summary[name] = _summarize(name, records, n_failed, config.dgp.beta1)
    d = config.dgp
    return McResult(d.a, d.N, d.T, len(reps), d.seed, records, failures, summary)


def sweep_a(config: McConfig, progress: Callable[[float, int], None] | None = None) -> list[McResult]:
    """One study per value of ``config.a_grid`` (same replication seeds at every ``a``)."""
    if not config.a_grid:
        raise ValueError("a_grid is empty")
    out = []
    for a in config.a_grid:
        cb = None if progress is None else (lambda r, a=a: progress(a, r))
        out.append(run_monte_carlo(replace(config, dgp=replace(config.dgp, a=a)), progress=cb))
    return out


def sweep_records(results: Sequence[McResult]) -> list[dict[str, Any]]:
    """Long-format plot data: one row per (a, estimator)."""
    rows = []
    for res in results:
        for name, s in res.summary.items():
            rows.append(
                {
                    "a": res.a,
                    "estimator": name,
                    "mean_beta1": s.mean,
                    "bias": s.bias,
                    "sd": s.sd,
                    "rmse": s.rmse,
                    "coverage": s.coverage,
                    "n_ok": s.n_ok,
                }
            )
    return rows


# --------------------------------------------------------------------------
# files


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


_REP_FIELDS = ("schema_version", "a", "replication", "estimator", "coefficient", "estimate", "se", "ci_lo", "ci_hi")
_SWEEP_FIELDS = ("schema_version", "a", "estimator", "mean_beta1", "bias", "sd", "rmse", "coverage", "n_ok")


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict[str, Any]]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def write_replications_csv(results: McResult | Sequence[McResult], path: str | Path) -> None:
    """Long format: one line per (a, replication, estimator, coefficient)."""
    results = [results] if isinstance(results, McResult) else list(results)
    rows = [{"schema_version": SCHEMA_VERSION, "a": float(res.a), **r} for res in results for r in res.records]
    _write_csv(Path(path), _REP_FIELDS, rows)


def write_sweep_csv(results: Sequence[McResult], path: str | Path) -> None:
    rows = [{"schema_version": SCHEMA_VERSION, **r} for r in sweep_records(results)]
    for r in rows:
        r["a"] = float(r["a"])
    _write_csv(Path(path), _SWEEP_FIELDS, rows)


def _json_safe(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _json_safe(v.item())
    if isinstance(v, TransformKind):
        return v.value
    return v


def _config_dict(config: McConfig) -> dict[str, Any]:
    def slcf_dict(c: SlcfConfig) -> dict[str, Any]:
        d = {k: getattr(c, k) for k in c.__dataclass_fields__ if k != "sl_specs"}
        d["library"] = [learner_to_dict(s) for s in c.sl_specs]
        return d

    d = asdict(config.dgp)
    d.pop("g", None)
    return {
        "dgp": d,
        "R": config.R,
        "estimators": list(config.estimators),
        "slcf": slcf_dict(config.slcf),
        "plugin": None if config.plugin is None else slcf_dict(config.plugin),
        "a_grid": None if config.a_grid is None else list(config.a_grid),
        "poly_degree": config.poly_degree,
    }


def write_summary_json(results: McResult | Sequence[McResult], path: str | Path, config: McConfig | None = None) -> None:
    results = [results] if isinstance(results, McResult) else list(results)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": None if config is None else _config_dict(config),
        "studies": [
            {
                "a": res.a,
                "N": res.N,
                "T": res.T,
                "R": res.R,
                "seed": res.seed,
                "estimators": {name: asdict(s) for name, s in res.summary.items()},
                "failures": res.failures,
            }
            for res in results
        ],
    }
    Path(path).write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=False) + "\n")


def read_summary_json(path: str | Path) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def read_replications_csv(path: str | Path) -> list[dict[str, Any]]:
    """Parse a file written by :func:`write_replications_csv` (or the sweep writer)."""
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["schema_version"]) != SCHEMA_VERSION:
                raise ValueError(f"unsupported schema_version {row['schema_version']!r}")
            parsed: dict[str, Any] = {}
            for k, v in row.items():
                if k in ("schema_version", "replication", "n_ok"):
                    parsed[k] = int(v)
                elif k in ("estimator", "coefficient"):
                    parsed[k] = v
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out
