"""Longitudinal panel of sequentially randomized observations.

A panel holds one row per (subject, timepoint) with the availability
indicator ``I``, the treatment ``A``, the outcome ``Y`` and the design
propensity ``pi = P[A = 1 | history]``.  Any further columns are carried as
named real covariates; per-subject constants (arm indicators, baseline
summaries) live in a separate baseline table.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import IO, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    InvariantViolation,
    MissingColumn,
    NonConsecutiveTimepoints,
    PropensityOutOfRange,
)

__all__ = [
    "CORE_COLUMNS",
    "DEFAULT_EPSILON",
    "TrajectoryRecord",
    "Panel",
    "PositivityReport",
    "ingest",
    "validate_positivity",
]

CORE_COLUMNS = ("subject", "t", "I", "A", "Y", "pi")
DEFAULT_EPSILON = 0.01


@dataclass(frozen=True)
class TrajectoryRecord:
    subject_id: object
    t: int
    covariates: Mapping[str, float]
    availability: int
    treatment: int
    outcome: float
    propensity: float


def _row_label(frame: pd.DataFrame, pos: int) -> str:
    row = frame.iloc[pos]
    return f"subject={row['subject']!r}, t={row['t']}"


class Panel:
    """Immutable, validated panel.

    Parameters
    ----------
    frame : DataFrame
        Long table with the columns in ``CORE_COLUMNS`` plus covariates.
    baseline : DataFrame, optional
        Per-subject static covariates indexed by subject id.
    epsilon : float
        Positivity bound enforced on available rows: ``pi`` must lie in
        ``[epsilon, 1 - epsilon]``.  ``epsilon = 0`` only requires
        ``0 < pi <= 1``.
    """

    def __init__(
        self,
        frame: pd.DataFrame,
        baseline: pd.DataFrame | None = None,
        epsilon: float = DEFAULT_EPSILON,
    ):
        missing = [c for c in CORE_COLUMNS if c not in frame.columns]
        if missing:
            raise MissingColumn(f"missing required column(s): {', '.join(missing)}")
        if not 0.0 <= epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")
        frame = frame.copy()
        self.epsilon = float(epsilon)
        self._check_values(frame)
        frame = frame.sort_values(["subject", "t"], kind="mergesort").reset_index(drop=True)
        self._check_index(frame)
        for col in ("I", "A", "t"):
            frame[col] = frame[col].astype(np.int64)
        for col in ("Y", "pi"):
            frame[col] = frame[col].astype(np.float64)
        covs = [c for c in frame.columns if c not in CORE_COLUMNS]
        for c in covs:
            try:
                frame[c] = frame[c].astype(np.float64)
            except (TypeError, ValueError) as exc:
                raise InvariantViolation(f"covariate column {c!r} is not numeric") from exc

        subjects = pd.unique(frame["subject"])
        if baseline is None:
            baseline = pd.DataFrame(index=pd.Index(subjects, name="subject"))
        else:
            baseline = baseline.copy()
            baseline.index.name = "subject"
            absent = [s for s in subjects if s not in baseline.index]
            if absent:
                raise InvariantViolation(f"subject {absent[0]!r} has no baseline entry")
            baseline = baseline.loc[subjects].astype(np.float64)
            clash = set(baseline.columns) & set(frame.columns)
            if clash:
                raise InvariantViolation(f"baseline column(s) shadow panel columns: {sorted(clash)}")

        self._frame = frame
        self._baseline = baseline
        self._covariates = tuple(covs)
        self._subjects = tuple(subjects)

    def _check_values(self, frame: pd.DataFrame) -> None:
        for col in ("subject", "t", "I", "A", "Y", "pi"):
            bad = frame[col].isna().to_numpy()
            if bad.any():
                pos = int(np.flatnonzero(bad)[0])
                raise InvariantViolation(f"missing value in column {col!r} at row {pos}", row=pos)
        t = frame["t"].to_numpy()
        if not np.all(np.mod(t, 1) == 0):
            pos = int(np.flatnonzero(np.mod(t, 1) != 0)[0])
            raise InvariantViolation(f"non-integer timepoint at row {pos}", row=pos)
        I = frame["I"].to_numpy(dtype=float)
        A = frame["A"].to_numpy(dtype=float)
        pi = frame["pi"].to_numpy(dtype=float)
        checks = [
            (~np.isin(I, (0.0, 1.0)), "availability must be 0 or 1", InvariantViolation),
            (~np.isin(A, (0.0, 1.0)), "treatment must be 0 or 1", InvariantViolation),
            ((I == 0) & (A != 0), "treatment given while unavailable (I=0, A=1)", InvariantViolation),
            ((pi < 0) | (pi > 1), "propensity outside [0, 1]", PropensityOutOfRange),
            ((I == 0) & (pi != 0), "unavailable row with non-zero propensity", InvariantViolation),
            ((I == 1) & ~self._pi_ok(pi), f"propensity outside [{self.epsilon}, {1 - self.epsilon}] on available row",
             PropensityOutOfRange),
        ]
        first = None
        for mask, msg, exc in checks:
            if mask.any():
                pos = int(np.flatnonzero(mask)[0])
                if first is None or pos < first[0]:
                    first = (pos, msg, exc)
        if first is not None:
            pos, msg, exc = first
            raise exc(f"{msg} at row {pos} ({_row_label(frame, pos)})", row=pos)

    def _pi_ok(self, pi: np.ndarray) -> np.ndarray:
        if self.epsilon == 0:
            return (pi > 0) & (pi <= 1)
        return (pi >= self.epsilon) & (pi <= 1 - self.epsilon)

    @staticmethod
    def _check_index(frame: pd.DataFrame) -> None:
        subj = frame["subject"].to_numpy()
        t = frame["t"].to_numpy()
        same = np.r_[False, subj[1:] == subj[:-1]]
        dup = same & np.r_[False, t[1:] == t[:-1]]
        if dup.any():
            pos = int(np.flatnonzero(dup)[0])
            raise InvariantViolation(f"duplicate (subject, t) at {_row_label(frame, pos)}", row=pos)
        expected = np.where(same, np.r_[0, t[:-1]] + 1, 1)
        gap = t != expected
        if gap.any():
            pos = int(np.flatnonzero(gap)[0])
            raise NonConsecutiveTimepoints(
                f"timepoints must run 1, 2, ... without gaps; got {_row_label(frame, pos)}, "
                f"expected t={expected[pos]}"
            )

    # -- read-only views -------------------------------------------------
    @property
    def frame(self) -> pd.DataFrame:
        return self._frame

    @property
    def baseline(self) -> pd.DataFrame:
        return self._baseline

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self._covariates

    @property
    def baseline_names(self) -> tuple[str, ...]:
        return tuple(self._baseline.columns)

    @property
    def subjects(self) -> tuple:
        return self._subjects

    @property
    def n_subjects(self) -> int:
        return len(self._subjects)

    @property
    def T_per_subject(self) -> pd.Series:
        return self._frame.groupby("subject", sort=False)["t"].max()

    def __len__(self) -> int:
        return len(self._frame)

    def __repr__(self) -> str:
        return f"Panel(n_subjects={self.n_subjects}, rows={len(self)}, covariates={list(self._covariates)})"

    def records(self, subject=None) -> Iterator[TrajectoryRecord]:
        """Yield records in (subject, t) order."""
        frame = self._frame if subject is None else self._frame[self._frame["subject"] == subject]
        covs = self._covariates
        for row in frame.itertuples(index=False):
            d = row._asdict()
            yield TrajectoryRecord(
                subject_id=d["subject"],
                t=int(d["t"]),
                covariates={c: float(d[c]) for c in covs},
                availability=int(d["I"]),
                treatment=int(d["A"]),
                outcome=float(d["Y"]),
                propensity=float(d["pi"]),
            )

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        return self.records()

    def column(self, name: str) -> np.ndarray:
        """Row-aligned values of a panel or baseline column."""
        if name in self._frame.columns:
            return self._frame[name].to_numpy()
        if name in self._baseline.columns:
            return self._baseline[name].reindex(self._frame["subject"]).to_numpy()
        raise KeyError(name)

    def with_epsilon(self, epsilon: float) -> "Panel":
        return Panel(self._frame, self._baseline, epsilon=epsilon)

    def to_frame(self) -> pd.DataFrame:
        """Long table with baseline columns merged in."""
        out = self._frame.copy()
        for c in self._baseline.columns:
            out[c] = self.column(c)
        return out

    def serialize(self, dest: str | os.PathLike | IO[str] | None = None, sep: str = ",") -> str | None:
        """Write the panel as delimited text (returns the text if ``dest`` is None)."""
        text = self.to_frame().to_csv(sep=sep, index=False, float_format="%.17g")
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return None

    def equals(self, other: "Panel") -> bool:
        if not isinstance(other, Panel):
            return False
        cols = list(self._frame.columns)
        if sorted(cols) != sorted(other._frame.columns):
            return False
        if sorted(self._baseline.columns) != sorted(other._baseline.columns):
            return False
        try:
            pd.testing.assert_frame_equal(self._frame[cols], other._frame[cols], check_dtype=False)
            bcols = list(self._baseline.columns)
            pd.testing.assert_frame_equal(
                self._baseline[bcols], other._baseline[bcols], check_dtype=False, check_index_type=False
            )
        except AssertionError:
            return False
        return True


def ingest(
    source: str | os.PathLike | bytes | IO,
    schema: Mapping[str, str] | None = None,
    *,
    sep: str = ",",
    epsilon: float = DEFAULT_EPSILON,
    baseline_columns: Sequence[str] = (),
    propensity: float | None = None,
) -> Panel:
    """Read a delimited table into a validated :class:`Panel`.

    Parameters
    ----------
    source : path, bytes or file object
        Delimited text with a header row.
    schema : mapping, optional
        Maps canonical names (``subject``, ``t``, ``I``, ``A``, ``Y``,
        ``pi``) to column names in the file.
    sep : str
        Field delimiter.
    epsilon : float
        Positivity bound enforced on available rows.
    baseline_columns : sequence of str
        Columns that are constant within subject; moved to the baseline table.
    propensity : float, optional
        Constant design probability of treatment on available rows, used when
        the file has no ``pi`` column.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    raw = pd.read_csv(source, sep=sep, float_precision="round_trip")
    schema = dict(schema or {})
    rename = {schema.get(c, c): c for c in CORE_COLUMNS}
    raw = raw.rename(columns=rename)
    if "pi" not in raw.columns and propensity is not None:
        if "I" not in raw.columns:
            raise MissingColumn("missing required column(s): I")
        raw["pi"] = float(propensity) * raw["I"]
    missing = [c for c in CORE_COLUMNS if c not in raw.columns]
    if missing:
        raise MissingColumn(f"missing required column(s): {', '.join(missing)}")
    absent = [c for c in baseline_columns if c not in raw.columns]
    if absent:
        raise MissingColumn(f"missing baseline column(s): {', '.join(absent)}")

    baseline = None
    if baseline_columns:
        cols = list(baseline_columns)
        grouped = raw.groupby("subject", sort=False)[cols]
        varying = grouped.nunique(dropna=False).gt(1)
        if varying.to_numpy().any():
            subj, col = varying.stack()[lambda s: s].index[0]
            raise InvariantViolation(f"baseline column {col!r} varies within subject {subj!r}")
        baseline = grouped.first()
        raw = raw.drop(columns=cols)
    return Panel(raw, baseline, epsilon=epsilon)


@dataclass
class PositivityReport:
    epsilon: float
    violations: list[tuple[object, int, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


def validate_positivity(panel: Panel, epsilon: float = DEFAULT_EPSILON) -> PositivityReport:
    """List available rows whose propensity falls outside ``[epsilon, 1 - epsilon]``."""
    f = panel.frame
    pi = f["pi"].to_numpy()
    bad = (f["I"].to_numpy() == 1) & ((pi < epsilon) | (pi > 1 - epsilon))
    rows = f.loc[bad, ["subject", "t", "pi"]]
    return PositivityReport(
        epsilon=float(epsilon),
        violations=[(s, int(t), float(p)) for s, t, p in rows.itertuples(index=False)],
    )
