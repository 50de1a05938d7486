"""Availability-respecting deterministic regimes and their IP weights.

Two atomic rules exist at every timepoint: *never treat* (``d0 = 0``) and
*treat if available* (``d1 = I``).  A regime sequence strings ``gamma`` of
them together over the window ``t - gamma + 1, ..., t``.  Sequences are
written as bit strings in window order, so ``"01"`` means ``d0`` at ``t-1``
and ``d1`` at ``t``.
"""
from __future__ import annotations

import enum
import itertools
import os
import warnings
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DegeneratePropensity,
    InsufficientTimepoints,
    InvalidFilter,
    InvariantViolation,
    UnknownModifier,
    WindowLengthMismatch,
)
from .panel import Panel, TrajectoryRecord

__all__ = [
    "RegimeAtom",
    "RegimeSequence",
    "RegimeSet",
    "ExpandedTable",
    "enumerate_regimes",
    "intended_treatment",
    "compliance",
    "ip_weight",
    "expand_panel",
]


class RegimeAtom(enum.IntEnum):
    NEVER_TREAT = 0
    TREAT_IF_AVAILABLE = 1

    def apply(self, availability: int) -> int:
        return intended_treatment(self, availability)


def intended_treatment(atom: RegimeAtom, availability: int) -> int:
    """Treatment the rule assigns given the availability bit."""
    if availability not in (0, 1):
        raise ValueError("availability must be 0 or 1")
    return int(availability) if atom == RegimeAtom.TREAT_IF_AVAILABLE else 0


@dataclass(frozen=True)
class RegimeSequence:
    atoms: tuple[RegimeAtom, ...]

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValueError("a regime sequence needs at least one atom")
        object.__setattr__(self, "atoms", tuple(RegimeAtom(a) for a in self.atoms))

    @classmethod
    def from_bits(cls, bits: Iterable[int] | str) -> "RegimeSequence":
        return cls(tuple(RegimeAtom(int(b)) for b in bits))

    @property
    def gamma(self) -> int:
        return len(self.atoms)

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple(int(a) for a in self.atoms)

    @property
    def dose(self) -> int:
        return sum(self.bits)

    @property
    def label(self) -> str:
        return "".join(str(b) for b in self.bits)

    def __len__(self) -> int:
        return len(self.atoms)

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class RegimeSet:
    gamma: int
    sequences: tuple[RegimeSequence, ...]
    filter: dict | None = None

    def __post_init__(self):
        if self.gamma < 1:
            raise InvalidFilter("gamma must be >= 1")
        labels = [s.label for s in self.sequences]
        if len(set(labels)) != len(labels):
            raise InvalidFilter("regime sequences must be distinct")
        if any(s.gamma != self.gamma for s in self.sequences):
            raise InvalidFilter(f"every sequence must have length {self.gamma}")
        if not self.sequences:
            raise InvalidFilter("regime set is empty")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.sequences]

    def bit_matrix(self) -> np.ndarray:
        return np.array([s.bits for s in self.sequences], dtype=np.int64).reshape(len(self), self.gamma)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "sequences": self.labels, "filter": self.filter}


def enumerate_regimes(
    gamma: int,
    max_dose: int | None = None,
    sequences: Sequence[str | Sequence[int]] | None = None,
) -> RegimeSet:
    """All ``{0,1}^gamma`` sequences passing the filter, in lexicographic order.

    ``max_dose`` keeps sequences with at most that many treat-if-available
    atoms; ``sequences`` restricts to an explicit list.  The two filters
    cannot be combined.
    """
    if not isinstance(gamma, (int, np.integer)) or gamma < 1:
        raise InvalidFilter(f"gamma must be a positive integer, got {gamma!r}")
    if max_dose is not None and sequences is not None:
        raise InvalidFilter("give either max_dose or an explicit sequence list, not both")
    if max_dose is not None and not 0 <= max_dose <= gamma:
        raise InvalidFilter(f"max_dose must lie in [0, {gamma}], got {max_dose}")
    full = [RegimeSequence.from_bits(b) for b in itertools.product((0, 1), repeat=gamma)]
    if max_dose is not None:
        keep = [s for s in full if s.dose <= max_dose]
        filt = {"max_dose": int(max_dose)}
    elif sequences is not None:
        wanted = []
        for s in sequences:
            bits = tuple(int(c) for c in s)
            if len(bits) != gamma or any(b not in (0, 1) for b in bits):
                raise InvalidFilter(f"sequence {s!r} is not a length-{gamma} bit string")
            wanted.append(bits)
        if len(set(wanted)) != len(wanted):
            raise InvalidFilter("explicit sequences must be distinct")
        keep = [s for s in full if s.bits in set(wanted)]
        filt = {"sequences": [s.label for s in keep]}
    else:
        keep = full
        filt = None
    return RegimeSet(gamma=int(gamma), sequences=tuple(keep), filter=filt)


def _check_window(seq: RegimeSequence, window: Sequence[TrajectoryRecord]) -> None:
    if len(window) != seq.gamma:
        raise WindowLengthMismatch(f"window has {len(window)} records, regime needs {seq.gamma}")
    subj = window[0].subject_id
    for k, rec in enumerate(window):
        if rec.subject_id != subj or rec.t != window[0].t + k:
            raise InvariantViolation("window must be contiguous timepoints of one subject")


def compliance(seq: RegimeSequence, window: Sequence[TrajectoryRecord]) -> int:
    """1 if the observed treatments follow ``seq`` over the whole window."""
    _check_window(seq, window)
    return int(all(rec.treatment == a.apply(rec.availability) for a, rec in zip(seq.atoms, window)))


def ip_weight(seq: RegimeSequence, window: Sequence[TrajectoryRecord]) -> float:
    """Product of compliance indicators over realized treatment probabilities.

    Unavailable steps force ``A = 0`` with probability one, so they contribute
    a factor of 1.
    """
    _check_window(seq, window)
    w = 1.0
    for atom, rec in zip(seq.atoms, window):
        if rec.treatment != atom.apply(rec.availability):
            return 0.0
        p = rec.propensity if rec.treatment == 1 else 1.0 - rec.propensity
        if p <= 0.0:
            raise DegeneratePropensity(
                f"observed A={rec.treatment} has probability 0 (subject={rec.subject_id!r}, t={rec.t})"
            )
        w /= p
    return w


class ExpandedTable:
    """Panel copied once per regime, with compliance and IP weights.

    ``frame`` has one row per (subject, t >= gamma, regime) with columns
    ``subject, t, regime, compliance, weight, Y, J1..J<gamma>, dose`` and the
    requested modifiers.  ``J1`` refers to the first window position
    (``t - gamma + 1``) and ``J<gamma>`` to ``t``.
    """

    def __init__(self, frame: pd.DataFrame, gamma: int, regime_set: RegimeSet, modifiers: Sequence[str] = ()):
        self.frame = frame
        self.gamma = int(gamma)
        self.regime_set = regime_set
        self.modifiers = tuple(modifiers)

    def __len__(self) -> int:
        return len(self.frame)

    def __repr__(self) -> str:
        return f"ExpandedTable(rows={len(self)}, gamma={self.gamma}, regimes={self.regime_set.labels})"

    @property
    def position_columns(self) -> list[str]:
        return [f"J{j}" for j in range(1, self.gamma + 1)]

    def position(self, lag: int) -> np.ndarray:
        """Regime indicator at ``t - lag`` for every row."""
        if not 0 <= lag < self.gamma:
            raise IndexError(f"lag {lag} outside window of length {self.gamma}")
        return self.frame[f"J{self.gamma - lag}"].to_numpy()

    def to_csv(self, dest: str | os.PathLike | IO[str] | None = None, sep: str = ",") -> str | None:
        out = self.frame.copy()
        out["regime"] = out["regime"].astype(str)
        text = out.to_csv(sep=sep, index=False, float_format="%.17g")
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return None

    @classmethod
    def read_csv(cls, source, sep: str = ",") -> "ExpandedTable":
        frame = pd.read_csv(source, sep=sep, dtype={"regime": str}, float_precision="round_trip")
        jcols = sorted((c for c in frame.columns if c.startswith("J") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        gamma = len(jcols)
        if gamma == 0:
            raise InvariantViolation("expanded table has no J<k> regime indicator columns")
        labels = list(dict.fromkeys(frame["regime"]))
        labels.sort()
        rset = enumerate_regimes(gamma, sequences=labels) if len(labels) < 2 ** gamma else enumerate_regimes(gamma)
        frame["regime"] = pd.Categorical(frame["regime"], categories=rset.labels)
        known = {"subject", "t", "regime", "compliance", "weight", "Y", "dose", *jcols}
        mods = [c for c in frame.columns if c not in known]
        return cls(frame, gamma, rset, mods)


def expand_panel(
    panel: Panel,
    regime_set: RegimeSet,
    modifiers: Sequence[str] = (),
    *,
    observed_only: bool = False,
    max_weight: float | None = None,
) -> ExpandedTable:
    """Copy each window once per regime and attach compliance and IP weights.

    Parameters
    ----------
    panel : Panel
    regime_set : RegimeSet
    modifiers : sequence of str
        Covariate or baseline columns used as effect modifiers.  Values are
        read at the window start ``t - gamma + 1``.
    observed_only : bool
        Open-loop shortcut: keep only the rows whose regime matches the
        observed treatment sequence.  Requires ``I = 1`` throughout, in which
        case exactly one regime matches each window.
    max_weight : float, optional
        Emit a warning (never truncate) if any weight exceeds this value.
    """
    gamma = regime_set.gamma
    f = panel.frame
    T = panel.T_per_subject
    short = T[T < gamma]
    if len(short):
        raise InsufficientTimepoints(
            f"subject {short.index[0]!r} has {int(short.iloc[0])} timepoints, need at least {gamma}"
        )
    for m in modifiers:
        if m not in panel.covariate_names and m not in panel.baseline_names:
            raise UnknownModifier(f"unknown modifier column {m!r}")
    if observed_only and (f["I"].to_numpy() != 1).any():
        raise InvariantViolation("observed_only expansion requires availability I = 1 on every row")

    I = f["I"].to_numpy()
    A = f["A"].to_numpy()
    pi = f["pi"].to_numpy()
    p_obs = np.where(A == 1, pi, 1.0 - pi)
    # per-row factor of a compliant step under each atom
    factors = np.empty((2, len(f)))
    comp = np.empty((2, len(f)), dtype=bool)
    for b in (0, 1):
        comp[b] = A == b * I
        with np.errstate(divide="ignore"):
            factors[b] = np.where(comp[b], 1.0 / p_obs, 0.0)
        bad = comp[b] & (p_obs <= 0)
        if bad.any():
            pos = int(np.flatnonzero(bad)[0])
            raise DegeneratePropensity(
                f"observed A={A[pos]} has probability 0 (subject={f['subject'].iloc[pos]!r}, t={f['t'].iloc[pos]})"
            )

    ends = np.flatnonzero(f["t"].to_numpy() >= gamma)
    bits = regime_set.bit_matrix()  # (R, gamma)
    R = len(regime_set)
    w = np.ones((len(ends), R))
    c = np.ones((len(ends), R), dtype=bool)
    for p in range(gamma):
        rows = ends - (gamma - 1 - p)
        for b in (0, 1):
            sel = bits[:, p] == b
            w[:, sel] *= factors[b, rows][:, None]
            c[:, sel] &= comp[b, rows][:, None]

    n_rows = len(ends) * R
    out = {
        "subject": np.repeat(f["subject"].to_numpy()[ends], R),
        "t": np.repeat(f["t"].to_numpy()[ends], R),
        "regime": pd.Categorical.from_codes(np.tile(np.arange(R), len(ends)), categories=regime_set.labels),
        "compliance": c.reshape(n_rows).astype(np.int64),
        "weight": w.reshape(n_rows),
        "Y": np.repeat(f["Y"].to_numpy()[ends], R),
    }
    for p in range(gamma):
        out[f"J{p + 1}"] = np.tile(bits[:, p], len(ends))
    out["dose"] = np.tile(bits.sum(axis=1), len(ends))
    starts = ends - (gamma - 1)
    for m in modifiers:
        out[m] = np.repeat(panel.column(m)[starts].astype(np.float64), R)
    frame = pd.DataFrame(out)
    if observed_only:
        frame = frame[frame["compliance"] == 1].reset_index(drop=True)
    if max_weight is not None:
        wmax = float(frame["weight"].max()) if len(frame) else 0.0
        if wmax > max_weight:
            warnings.warn(f"IP weight {wmax:.4g} exceeds cap {max_weight:.4g}; weights are not truncated",
                          RuntimeWarning, stacklevel=2)
    return ExpandedTable(frame, gamma, regime_set, modifiers)
