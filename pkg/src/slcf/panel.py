"""Panel data containers and fixed-effect removing transformations.

Observations are grouped by individual.  Every individual contributes a block
of ``T_i`` consecutive periods holding the outcome ``y``, the endogenous
regressor ``x1``, exogenous regressors and excluded instruments.  Individual
effects are removed either by first differencing or by the within (time
demeaning) operator.

Internally the transformed panel keeps stacked, individual-major arrays so the
estimators can work on whole folds at once; per-individual views are available
through :attr:`TransformedPanel.blocks`.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DEFAULT_T_MAX",
    "FirstStageDesign",
    "IndividualBlock",
    "MissingColumnError",
    "PanelDataset",
    "PanelFormatError",
    "TransformKind",
    "TransformedPanel",
    "apply_operator",
    "fd_matrix",
    "first_stage_design",
    "load_csv",
    "transform",
    "vtilde_matrix",
    "within_matrix",
]

DEFAULT_T_MAX = 1000


class PanelFormatError(ValueError):
    """Raised when panel input is malformed (shape, values or file layout)."""


class MissingColumnError(PanelFormatError):
    """A column named in the schema is absent from the file header."""

    def __init__(self, message: str, column: str) -> None:
        super().__init__(message)
        self.column = column


class TransformKind(str, enum.Enum):
    FIRST_DIFFERENCE = "fd"
    WITHIN = "within"

    @classmethod
    def parse(cls, value: "TransformKind | str") -> "TransformKind":
        if isinstance(value, cls):
            return value
        aliases = {
            "fd": cls.FIRST_DIFFERENCE,
            "first_difference": cls.FIRST_DIFFERENCE,
            "firstdifference": cls.FIRST_DIFFERENCE,
            "within": cls.WITHIN,
            "w": cls.WITHIN,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown transform {value!r}; use 'fd' or 'within'") from None

    @property
    def lost_periods(self) -> int:
        """Rows lost per individual (``T_i - T_i,a``)."""
        return 1 if self is TransformKind.FIRST_DIFFERENCE else 0


def fd_matrix(T: int) -> np.ndarray:
    """First-difference operator of shape ``(T-1, T)``.

    Row ``t`` maps a length-``T`` vector to ``v[t+1] - v[t]``, i.e. the
    current value minus the lagged one.
    """
    if T < 2:
        raise ValueError(f"first differencing needs T >= 2, got T={T}")
    D = np.zeros((T - 1, T))
    idx = np.arange(T - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return D


def within_matrix(T: int) -> np.ndarray:
    """Within (demeaning) operator ``I - J/T`` of shape ``(T, T)``."""
    if T < 2:
        raise ValueError(f"the within transformation needs T >= 2, got T={T}")
    return np.eye(T) - np.full((T, T), 1.0 / T)


def vtilde_matrix(kind: TransformKind | str, T: int) -> np.ndarray:
    """Second-stage weighting matrix for one individual.

    First differencing uses ``D D'`` (tridiagonal, 2 on the diagonal and -1
    beside it).  The within operator is singular, so its weighting matrix is
    the identity of size ``T``.
    """
    kind = TransformKind.parse(kind)
    if kind is TransformKind.FIRST_DIFFERENCE:
        D = fd_matrix(T)
        return D @ D.T
    if T < 2:
        raise ValueError(f"the within transformation needs T >= 2, got T={T}")
    return np.eye(T)


def _apply(kind: TransformKind, blk: np.ndarray) -> np.ndarray:
    """Apply the operator along axis 1 of ``(n, T)`` or ``(n, T, p)`` blocks.

    Equivalent to multiplying by :func:`fd_matrix` or :func:`within_matrix`,
    but exact for constant blocks.
    """
    if kind is TransformKind.FIRST_DIFFERENCE:
        return blk[:, 1:] - blk[:, :-1]
    return blk - blk.mean(axis=1, keepdims=True)


@dataclass(frozen=True)
class IndividualBlock:
    """All periods observed for one individual, ordered by time."""

    id: Hashable
    y: np.ndarray
    x1: np.ndarray
    x_exog: np.ndarray
    z: np.ndarray
    time: np.ndarray | None = None

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        T = y.shape[0]
        x1 = np.asarray(self.x1, dtype=float).reshape(-1)
        x_exog = np.asarray(self.x_exog, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if x_exog.ndim == 1:
            x_exog = x_exog.reshape(T, -1) if x_exog.size else np.zeros((T, 0))
        if z.ndim == 1:
            z = z.reshape(T, -1)
        if x1.shape[0] != T or x_exog.shape[0] != T or z.shape[0] != T:
            raise PanelFormatError(
                f"individual {self.id!r}: inconsistent row counts "
                f"(y={T}, x1={x1.shape[0]}, x_exog={x_exog.shape[0]}, z={z.shape[0]})"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x_exog", x_exog)
        object.__setattr__(self, "z", z)
        if self.time is not None:
            t = np.asarray(self.time).reshape(-1)
            if t.shape[0] != T:
                raise PanelFormatError(f"individual {self.id!r}: time has {t.shape[0]} rows, expected {T}")
            object.__setattr__(self, "time", t)

    @property
    def T(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class PanelDataset:
    """A validated collection of individual blocks.

    Parameters
    ----------
    individuals : sequence of IndividualBlock
    n_exog : int
        Number of exogenous regressors (``K - 1``); may be zero.
    n_inst : int
        Number of excluded instruments (``L >= 1``).
    t_max : int
        Upper bound on the number of periods per individual.
    """

    individuals: tuple[IndividualBlock, ...]
    n_exog: int
    n_inst: int
    t_max: int = DEFAULT_T_MAX

    def __post_init__(self) -> None:
        blocks = tuple(self.individuals)
        object.__setattr__(self, "individuals", blocks)
        if not blocks:
            raise PanelFormatError("panel has no individuals")
        if self.n_inst < 1:
            raise PanelFormatError("at least one instrument is required")
        seen = set()
        for blk in blocks:
            if blk.id in seen:
                raise PanelFormatError(f"duplicate individual id {blk.id!r}")
            seen.add(blk.id)
            if blk.T < 2:
                raise PanelFormatError(f"individual {blk.id!r} has T_i < 2 ({blk.T} row)")
            if blk.T > self.t_max:
                raise PanelFormatError(f"individual {blk.id!r} has T_i={blk.T} > T_max={self.t_max}")
            if blk.x_exog.shape[1] != self.n_exog:
                raise PanelFormatError(
                    f"individual {blk.id!r} has {blk.x_exog.shape[1]} exogenous columns, expected {self.n_exog}"
                )
            if blk.z.shape[1] != self.n_inst:
                raise PanelFormatError(
                    f"individual {blk.id!r} has {blk.z.shape[1]} instrument columns, expected {self.n_inst}"
                )
            for name in ("y", "x1", "x_exog", "z"):
                if not np.all(np.isfinite(getattr(blk, name))):
                    raise PanelFormatError(f"individual {blk.id!r}: non-finite values in {name}")

    @classmethod
    def from_arrays(
        cls,
        y: np.ndarray,
        x1: np.ndarray,
        x_exog: np.ndarray | None,
        z: np.ndarray,
        ids: Sequence[Hashable] | None = None,
    ) -> "PanelDataset":
        """Build a balanced panel from ``(N, T[, k])`` arrays."""
        y = np.asarray(y, dtype=float)
        x1 = np.asarray(x1, dtype=float)
        N, T = y.shape
        if x_exog is None:
            x_exog = np.zeros((N, T, 0))
        x_exog = np.asarray(x_exog, dtype=float)
        if x_exog.ndim == 2:
            x_exog = x_exog[:, :, None]
        z = np.asarray(z, dtype=float)
        if z.ndim == 2:
            z = z[:, :, None]
        if ids is None:
            ids = range(N)
        blocks = tuple(
            IndividualBlock(i, y[k], x1[k], x_exog[k], z[k]) for k, i in enumerate(ids)
        )
        return cls(blocks, n_exog=x_exog.shape[2], n_inst=z.shape[2])

    @property
    def N(self) -> int:
        return len(self.individuals)

    @cached_property
    def T_i(self) -> np.ndarray:
        return np.array([blk.T for blk in self.individuals], dtype=np.int64)

    @property
    def n_total(self) -> int:
        """``N_T``, the total number of untransformed rows."""
        return int(self.T_i.sum())

    @property
    def ids(self) -> list[Hashable]:
        return [blk.id for blk in self.individuals]

    @property
    def is_balanced(self) -> bool:
        return bool(np.all(self.T_i == self.T_i[0]))

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.T_i)])

    @cached_property
    def stacked(self) -> dict[str, np.ndarray]:
        """Individual-major stacked arrays plus ``individual``/``period`` indices."""
        blocks = self.individuals
        return {
            "y": np.concatenate([b.y for b in blocks]),
            "x1": np.concatenate([b.x1 for b in blocks]),
            "x_exog": np.concatenate([b.x_exog for b in blocks], axis=0),
            "z": np.concatenate([b.z for b in blocks], axis=0),
            "individual": np.repeat(np.arange(self.N), self.T_i),
            "period": np.concatenate([np.arange(t) for t in self.T_i]),
        }

    def subset(self, index: Iterable[int]) -> "PanelDataset":
        blocks = tuple(self.individuals[i] for i in index)
        return PanelDataset(blocks, self.n_exog, self.n_inst, self.t_max)

    def map_columns(self, fn) -> "PanelDataset":
        """Return a copy with ``fn(block) -> dict of replaced fields`` applied per block."""
        blocks = []
        for blk in self.individuals:
            fields = dict(id=blk.id, y=blk.y, x1=blk.x1, x_exog=blk.x_exog, z=blk.z, time=blk.time)
            fields.update(fn(blk))
            blocks.append(IndividualBlock(**fields))
        return PanelDataset(tuple(blocks), self.n_exog, self.n_inst, self.t_max)


@dataclass(frozen=True)
class _Group:
    """Individuals sharing the same number of transformed rows."""

    members: np.ndarray  # individual indices
    rows: np.ndarray  # (n_members, T_a) indices into the stacked transformed rows
    whitener: np.ndarray  # (T_a, T_a) inverse Cholesky factor of the weighting matrix


@dataclass(frozen=True)
class TransformedPanel:
    """Transformed outcome/regressors with per-individual weighting matrices.

    Attributes
    ----------
    ty, tx1 : ndarray, shape (n_rows,)
    tx_exog : ndarray, shape (n_rows, K-1)
    individual : ndarray, shape (n_rows,)
        Index (0..N-1) of the individual owning each row.
    period : ndarray, shape (n_rows,)
        Zero-based period of each row in the original block (for first
        differences the later of the two periods).
    T_i : ndarray, shape (N,)
        Untransformed period counts, used for ``n_T,b`` and ``N_T``.
    """

    kind: TransformKind
    ty: np.ndarray
    tx1: np.ndarray
    tx_exog: np.ndarray
    individual: np.ndarray
    period: np.ndarray
    T_i: np.ndarray
    weighting: str = "vtilde"
    _groups: tuple[_Group, ...] = field(default=(), repr=False)

    @property
    def N(self) -> int:
        return self.T_i.shape[0]

    @property
    def n_rows(self) -> int:
        return self.ty.shape[0]

    @property
    def n_total(self) -> int:
        return int(self.T_i.sum())

    @cached_property
    def offsets(self) -> np.ndarray:
        counts = np.bincount(self.individual, minlength=self.N)
        return np.concatenate([[0], np.cumsum(counts)])

    def vtilde(self, i: int) -> np.ndarray:
        """Weighting matrix of individual ``i``."""
        T_a = self.offsets[i + 1] - self.offsets[i]
        if self.weighting == "identity":
            return np.eye(T_a)
        return vtilde_matrix(self.kind, T_a + self.kind.lost_periods)

    @property
    def blocks(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Per-individual ``(ty, tx1, tx_exog, vtilde)`` tuples."""
        out = []
        for i in range(self.N):
            sl = slice(self.offsets[i], self.offsets[i + 1])
            out.append((self.ty[sl], self.tx1[sl], self.tx_exog[sl], self.vtilde(i)))
        return out

    def whiten(self, a: np.ndarray) -> np.ndarray:
        """Premultiply every individual's rows by ``L_i^{-1}`` where ``Vtilde_i = L_i L_i'``.

        After whitening, ``sum_i H_i' Vtilde_i^{-1} H_i`` is a plain cross
        product of the stacked whitened rows.
        """
        a = np.asarray(a, dtype=float)
        if self.weighting == "identity" or self.kind is TransformKind.WITHIN:
            return a.copy()
        out = np.empty_like(a)
        for g in self._groups:
            blk = a[g.rows]  # (n, T_a) or (n, T_a, p)
            if a.ndim == 1:
                out[g.rows] = blk @ g.whitener.T
            else:
                out[g.rows] = np.einsum("ij,njp->nip", g.whitener, blk)
        return out

    def design(self, control: np.ndarray | None = None) -> np.ndarray:
        """Second-stage regressor matrix ``[tx1, tx_exog, control]``."""
        cols = [self.tx1[:, None], self.tx_exog]
        if control is not None:
            cols.append(np.asarray(control, dtype=float).reshape(-1, 1))
        return np.hstack(cols)

    def rows_of(self, individuals: np.ndarray) -> np.ndarray:
        """Boolean row mask selecting the given individual indices."""
        mask = np.zeros(self.N, dtype=bool)
        mask[np.asarray(individuals, dtype=np.int64)] = True
        return mask[self.individual]


def _check_consecutive(data: PanelDataset) -> None:
    for blk in data.individuals:
        if blk.time is None:
            continue
        steps = np.diff(blk.time.astype(np.int64))
        if np.any(steps != 1):
            raise PanelFormatError(f"individual {blk.id!r}: periods are not consecutive, cannot first-difference")


def transform(
    data: PanelDataset, kind: TransformKind | str, weighting: str = "vtilde"
) -> TransformedPanel:
    """Apply the first-difference or within operator to ``y``, ``x1`` and ``x_exog``.

    ``weighting`` selects the second-stage weighting matrices: ``"vtilde"``
    (``D D'`` for first differences, identity for within) or ``"identity"``.
    """
    kind = TransformKind.parse(kind)
    if weighting not in ("vtilde", "identity"):
        raise ValueError(f"weighting must be 'vtilde' or 'identity', got {weighting!r}")
    if kind is TransformKind.FIRST_DIFFERENCE:
        _check_consecutive(data)
    st = data.stacked
    T_i = data.T_i
    lost = kind.lost_periods
    T_a = T_i - lost
    out_offsets = np.concatenate([[0], np.cumsum(T_a)])
    n_rows = int(out_offsets[-1])
    k = data.n_exog
    ty = np.empty(n_rows)
    tx1 = np.empty(n_rows)
    tx = np.empty((n_rows, k))
    individual = np.repeat(np.arange(data.N), T_a)
    period = np.concatenate([np.arange(lost, t) for t in T_i])
    groups = []
    for T in np.unique(T_i):
        members = np.flatnonzero(T_i == T)
        src = data.offsets[members][:, None] + np.arange(T)[None, :]
        dst = out_offsets[members][:, None] + np.arange(T - lost)[None, :]
        ty[dst] = _apply(kind, st["y"][src])
        tx1[dst] = _apply(kind, st["x1"][src])
        if k:
            tx[dst] = _apply(kind, st["x_exog"][src])
        V = vtilde_matrix(kind, int(T)) if weighting == "vtilde" else np.eye(int(T) - lost)
        L = np.linalg.cholesky(V)
        groups.append(_Group(members, dst, np.linalg.inv(L)))
    return TransformedPanel(
        kind=kind,
        ty=ty,
        tx1=tx1,
        tx_exog=tx,
        individual=individual,
        period=period,
        T_i=T_i.copy(),
        weighting=weighting,
        _groups=tuple(groups),
    )


def apply_operator(data: PanelDataset, kind: TransformKind | str, values: np.ndarray) -> np.ndarray:
    """Transform arbitrary stacked columns (rows aligned with ``data.stacked``).

    Returns rows aligned with :func:`transform` output for the same ``kind``.
    """
    kind = TransformKind.parse(kind)
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    if values.shape[0] != data.n_total:
        raise ValueError(f"expected {data.n_total} rows, got {values.shape[0]}")
    T_i = data.T_i
    lost = kind.lost_periods
    out_offsets = np.concatenate([[0], np.cumsum(T_i - lost)])
    out = np.empty((int(out_offsets[-1]), values.shape[1]))
    for T in np.unique(T_i):
        members = np.flatnonzero(T_i == T)
        src = data.offsets[members][:, None] + np.arange(T)[None, :]
        dst = out_offsets[members][:, None] + np.arange(T - lost)[None, :]
        out[dst] = _apply(kind, values[src])
    return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class FirstStageDesign:
    """Features and target for learning the transformed reduced form.

    ``rows`` aligns one-to-one with the rows of the matching
    :class:`TransformedPanel`; column 0 is the individual index and column 1
    the period.
    """

    X: np.ndarray
    target: np.ndarray
    rows: np.ndarray
    feature_names: tuple[str, ...]

    @property
    def individual(self) -> np.ndarray:
        return self.rows[:, 0]


def first_stage_design(
    data: PanelDataset, kind: TransformKind | str, full_stack: bool = False
) -> FirstStageDesign:
    """Build the conditioning set for ``E[tau x1_it | I_t]``.

    First differences: target ``x1_it - x1_it-1`` with features
    ``(x_it, x_it-1, z_it, z_it-1)`` for ``t >= 2``.

    Within: target ``x1_it - mean_i(x1)`` with features
    ``(x_it, z_it, mean_i(x), mean_i(z))``.  With ``full_stack=True`` (balanced
    panels only) the individual means are replaced by every period's values,
    ``(x_it, z_it, x_i1..x_iT, z_i1..z_iT)``.
    """
    kind = TransformKind.parse(kind)
    st = data.stacked
    k, L = data.n_exog, data.n_inst
    xe, z = st["x_exog"], st["z"]
    exog_names = [f"x{j + 2}" for j in range(k)]
    inst_names = [f"z{j + 1}" for j in range(L)] if L > 1 else ["z"]
    if kind is TransformKind.FIRST_DIFFERENCE:
        _check_consecutive(data)
        keep = st["period"] >= 1
        cur = np.flatnonzero(keep)
        lag = cur - 1
        X = np.hstack([xe[cur], xe[lag], z[cur], z[lag]])
        target = st["x1"][cur] - st["x1"][lag]
        rows = np.column_stack([st["individual"][cur], st["period"][cur]])
        names = (
            exog_names
            + [n + "_lag" for n in exog_names]
            + inst_names
            + [n + "_lag" for n in inst_names]
        )
        return FirstStageDesign(X, target, rows, tuple(names))

    ind = st["individual"]
    counts = data.T_i.astype(float)
    x1_bar = np.bincount(ind, weights=st["x1"]) / counts
    target = st["x1"] - x1_bar[ind]
    rows = np.column_stack([ind, st["period"]])
    current = np.hstack([xe, z])
    cur_names = exog_names + inst_names
    if full_stack:
        if not data.is_balanced:
            raise ValueError("full_stack features require a balanced panel")
        T = int(data.T_i[0])
        # one column per (variable, period), variable-major
        per_ind = np.hstack([current[:, j].reshape(data.N, T) for j in range(current.shape[1])])
        X = np.hstack([current, per_ind[ind]])
        names = cur_names + [f"{n}_t{t + 1}" for n in cur_names for t in range(T)]
        return FirstStageDesign(X, target, rows, tuple(names))
    means = np.column_stack(
        [np.bincount(ind, weights=current[:, j], minlength=data.N) / counts for j in range(current.shape[1])]
    ) if current.shape[1] else np.zeros((data.N, 0))
    X = np.hstack([current, means[ind]])
    names = cur_names + [n + "_mean" for n in cur_names]
    return FirstStageDesign(X, target, rows, tuple(names))


_REQUIRED_ROLES = ("id", "time", "y", "x1")


def load_csv(
    path: str | Path,
    schema: Mapping[str, Any],
    kind: TransformKind | str | None = TransformKind.FIRST_DIFFERENCE,
) -> PanelDataset:
    """Read a long-format panel CSV.

    ``schema`` maps roles to column names: ``id``, ``time``, ``y``, ``x1``
    (strings) and ``exog``, ``instruments`` (lists).  Rows are grouped by id
    and sorted by time.  When ``kind`` is first differencing, gaps in an
    individual's time index are rejected.

    Raises
    ------
    PanelFormatError
        With the offending row number (1-based, header is row 1) for missing
        columns, non-numeric cells, duplicate ``(id, time)`` keys, or
        individuals with fewer than two periods.
    """
    for role in _REQUIRED_ROLES:
        if role not in schema:
            raise PanelFormatError(f"schema is missing the {role!r} role")
    exog = list(schema.get("exog", []))
    inst = list(schema.get("instruments", []))
    if not inst:
        raise PanelFormatError("schema must list at least one instrument column")
    numeric_cols = [schema["y"], schema["x1"], *exog, *inst]
    path = Path(path)
    records: dict[str, list[tuple[int, int, list[float]]]] = {}
    seen: dict[tuple[str, int], int] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in [schema["id"], schema["time"], *numeric_cols]:
            if col not in header:
                raise MissingColumnError(f"missing required column {col!r} in {path}", col)
        for rownum, row in enumerate(reader, start=2):
            pid = row[schema["id"]]
            raw_t = row[schema["time"]]
            try:
                t = int(raw_t)
            except (TypeError, ValueError):
                raise PanelFormatError(f"row {rownum}: time value {raw_t!r} is not an integer") from None
            values = []
            for col in numeric_cols:
                cell = row[col]
                try:
                    v = float(cell)
                except (TypeError, ValueError):
                    raise PanelFormatError(f"row {rownum}: column {col!r} value {cell!r} is not numeric") from None
                if not np.isfinite(v):
                    raise PanelFormatError(f"row {rownum}: column {col!r} value {cell!r} is not finite")
                values.append(v)
            key = (pid, t)
            if key in seen:
                raise PanelFormatError(
                    f"row {rownum}: duplicate (id, time) key ({pid!r}, {t}) first seen on row {seen[key]}"
                )
            seen[key] = rownum
            records.setdefault(pid, []).append((t, rownum, values))
    if not records:
        raise PanelFormatError(f"{path} has no data rows")
    check_gaps = kind is not None and TransformKind.parse(kind) is TransformKind.FIRST_DIFFERENCE
    blocks = []
    k = len(exog)
    for pid, recs in records.items():
        recs.sort(key=lambda r: r[0])
        if len(recs) < 2:
            raise PanelFormatError(f"row {recs[0][1]}: individual {pid!r} has T_i < 2 (a single period)")
        times = np.array([r[0] for r in recs])
        if check_gaps:
            gaps = np.flatnonzero(np.diff(times) != 1)
            if gaps.size:
                bad = recs[gaps[0] + 1]
                raise PanelFormatError(
                    f"row {bad[1]}: individual {pid!r} has a gap in time before period {bad[0]}"
                )
        vals = np.array([r[2] for r in recs])
        blocks.append(
            IndividualBlock(
                id=pid,
                y=vals[:, 0],
                x1=vals[:, 1],
                x_exog=vals[:, 2 : 2 + k],
                z=vals[:, 2 + k :],
                time=times,
            )
        )
    return PanelDataset(tuple(blocks), n_exog=k, n_inst=len(inst))
