"""Working marginal structural models: links, feature maps and weight functions."""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidModel, NonFiniteFeature, UnknownModifier
from .regimes import ExpandedTable

__all__ = [
    "LINKS",
    "ETA_CLAMP",
    "ClampWarning",
    "Feature",
    "HSpec",
    "WorkingModel",
    "Design",
    "build_design",
    "mean_and_gradient",
    "link_derivatives",
    "saturated_model",
    "dose_model",
]

LINKS = ("identity", "logit", "log")
ETA_CLAMP = 30.0
FEATURE_KINDS = ("intercept", "position", "dose_indicator", "dose", "modifier", "time", "interaction")


class ClampWarning(RuntimeWarning):
    """Linear predictor clamped before exponentiation."""


@dataclass(frozen=True)
class Feature:
    """One column of the design matrix.

    ``kind`` is one of ``intercept``, ``position`` (regime indicator at
    ``t - lag``), ``dose_indicator`` (dose equals ``dose``), ``dose``,
    ``modifier`` (named effect modifier), ``time`` and ``interaction``
    (product of two earlier features, referenced by name).
    """

    kind: str
    lag: int | None = None
    dose: int | None = None
    modifier: str | None = None
    operands: tuple[str, str] | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise InvalidModel(f"unknown feature kind {self.kind!r}")
        if self.kind == "position" and (self.lag is None or self.lag < 0):
            raise InvalidModel("position feature needs a non-negative lag")
        if self.kind == "dose_indicator" and (self.dose is None or self.dose < 0):
            raise InvalidModel("dose_indicator feature needs a non-negative dose")
        if self.kind == "modifier" and not self.modifier:
            raise InvalidModel("modifier feature needs a column name")
        if self.kind == "interaction":
            if self.operands is None or len(self.operands) != 2:
                raise InvalidModel("interaction feature needs two operand names")
            object.__setattr__(self, "operands", tuple(self.operands))
        if self.name is None:
            object.__setattr__(self, "name", self._default_name())

    def _default_name(self) -> str:
        return {
            "intercept": lambda: "(Intercept)",
            "position": lambda: "J[t]" if self.lag == 0 else f"J[t-{self.lag}]",
            "dose_indicator": lambda: f"dose=={self.dose}",
            "dose": lambda: "dose",
            "modifier": lambda: str(self.modifier),
            "time": lambda: "t",
            "interaction": lambda: f"{self.operands[0]}:{self.operands[1]}",
        }[self.kind]()

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.lag is not None:
            d["lag"] = self.lag
        if self.dose is not None:
            d["dose"] = self.dose
        if self.modifier is not None:
            d["modifier"] = self.modifier
        if self.operands is not None:
            d["operands"] = list(self.operands)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Feature":
        d = dict(d)
        kind = d.pop("kind", None) or d.pop("type", None)
        if kind is None:
            raise InvalidModel(f"feature entry without a kind: {d}")
        unknown = set(d) - {"lag", "dose", "modifier", "operands", "name"}
        if unknown:
            raise InvalidModel(f"unknown feature field(s) {sorted(unknown)}")
        if "operands" in d:
            d["operands"] = tuple(d["operands"])
        return cls(kind=kind, **d)


@dataclass(frozen=True)
class HSpec:
    """Non-negative weight function ``h(t, regime)``.

    ``constant_one`` is the default.  ``open_loop`` multiplies in the design
    probability of the regime's static treatment sequence under a constant
    randomization probability ``p``, which cancels the IP weight on the
    compliant row.  ``table`` looks values up by (t, regime label); use
    ``"*"`` for t to match every timepoint.  Missing keys default to
    ``default``.
    """

    kind: str = "constant_one"
    p: float | None = None
    table: tuple[tuple[str, str, float], ...] = ()
    default: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant_one", "open_loop", "table"):
            raise InvalidModel(f"unknown h preset {self.kind!r}")
        if self.kind == "open_loop" and (self.p is None or not 0 < self.p < 1):
            raise InvalidModel("open_loop h needs a randomization probability p in (0, 1)")
        object.__setattr__(self, "table", tuple((str(t), str(r), float(v)) for t, r, v in self.table))
        if any(v < 0 for _, _, v in self.table) or self.default < 0:
            raise InvalidModel("h must be non-negative")

    def evaluate(self, table: ExpandedTable) -> np.ndarray:
        f = table.frame
        n = len(f)
        if self.kind == "constant_one":
            return np.ones(n)
        if self.kind == "open_loop":
            J = f[table.position_columns].to_numpy()
            return np.prod(np.where(J == 1, self.p, 1.0 - self.p), axis=1)
        lookup = {(t, r): v for t, r, v in self.table}
        regimes = f["regime"].astype(str).to_numpy()
        ts = f["t"].to_numpy()
        out = np.empty(n)
        for i in range(n):
            r = regimes[i]
            out[i] = lookup.get((str(ts[i]), r), lookup.get(("*", r), self.default))
        return out

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.p is not None:
            d["p"] = self.p
        if self.table:
            d["table"] = [list(row) for row in self.table]
        if self.default != 1.0:
            d["default"] = self.default
        return d

    @classmethod
    def from_dict(cls, d: Mapping | str | None) -> "HSpec":
        if d is None:
            return cls()
        if isinstance(d, str):
            return cls(kind=d)
        d = dict(d)
        d["table"] = tuple(tuple(r) for r in d.get("table", ()))
        return cls(**d)


@dataclass(frozen=True)
class WorkingModel:
    features: tuple[Feature, ...]
    link: str = "identity"
    h: HSpec = field(default_factory=HSpec)

    def __post_init__(self):
        if self.link not in LINKS:
            raise InvalidModel(f"unknown link {self.link!r}; choose from {LINKS}")
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise InvalidModel("a working model needs at least one feature")
        seen: set[str] = set()
        for f in self.features:
            if f.name in seen:
                raise InvalidModel(f"duplicate feature name {f.name!r}")
            if f.kind == "interaction":
                for op in f.operands:
                    if op not in seen:
                        raise InvalidModel(f"interaction {f.name!r} references {op!r} before it is defined")
            seen.add(f.name)

    @property
    def q(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def modifiers(self) -> list[str]:
        return [f.modifier for f in self.features if f.kind == "modifier"]

    @property
    def max_lag(self) -> int:
        return max((f.lag for f in self.features if f.kind == "position"), default=0)

    def to_dict(self) -> dict:
        return {"link": self.link, "features": [f.to_dict() for f in self.features], "h": self.h.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorkingModel":
        try:
            feats = tuple(Feature.from_dict(x) for x in d["features"])
        except KeyError as exc:
            raise InvalidModel("model document needs a 'features' list") from exc
        return cls(features=feats, link=d.get("link", "identity"), h=HSpec.from_dict(d.get("h")))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "WorkingModel":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InvalidModel(f"model document is not valid JSON: {exc}") from exc


def saturated_model(gamma: int, link: str = "identity", modifiers: Sequence[str] = ()) -> WorkingModel:
    """Intercept plus every product of regime indicators in the window.

    For ``gamma = 2`` the columns are ``1, J[t-1], J[t], J[t-1]:J[t]``.
    Each modifier adds a main effect and its interactions with all regime
    terms.
    """
    lags = list(range(gamma - 1, -1, -1))  # earliest window position first
    feats = [Feature("intercept")]
    pos = {lag: Feature("position", lag=lag) for lag in lags}
    named: dict[tuple[int, ...], str] = {}
    terms = []
    for size in range(1, gamma + 1):
        for combo in itertools.combinations(lags, size):
            if size == 1:
                f = pos[combo[0]]
            else:
                f = Feature("interaction", operands=(named[combo[:-1]], pos[combo[-1]].name))
            named[combo] = f.name
            terms.append(f)
    feats.extend(terms)
    for m in modifiers:
        mf = Feature("modifier", modifier=m)
        feats.append(mf)
        feats.extend(Feature("interaction", operands=(t.name, mf.name)) for t in terms)
    return WorkingModel(tuple(feats), link=link)


def dose_model(gamma: int, max_dose: int | None = None, link: str = "identity") -> WorkingModel:
    """Intercept plus one indicator per positive dose level."""
    top = gamma if max_dose is None else max_dose
    feats = [Feature("intercept")] + [Feature("dose_indicator", dose=r) for r in range(1, top + 1)]
    return WorkingModel(tuple(feats), link=link)


@dataclass
class Design:
    """Columnar design rows: ``X`` (rows x q), outcome ``y``, combined weight
    ``w = h * ip_weight`` and integer cluster codes into ``cluster_ids``."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    cluster: np.ndarray
    cluster_ids: np.ndarray
    regime: np.ndarray
    regime_labels: list[str]
    names: list[str]

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    def subset(self, mask: np.ndarray) -> "Design":
        return Design(self.X[mask], self.y[mask], self.w[mask], self.cluster[mask], self.cluster_ids,
                      self.regime[mask], self.regime_labels, self.names)


def _feature_columns(model: WorkingModel, table: ExpandedTable) -> np.ndarray:
    f = table.frame
    cols: dict[str, np.ndarray] = {}
    n = len(f)
    for feat in model.features:
        if feat.kind == "intercept":
            v = np.ones(n)
        elif feat.kind == "position":
            if feat.lag >= table.gamma:
                raise InvalidModel(f"feature {feat.name!r} looks back {feat.lag} steps; window length is {table.gamma}")
            v = table.position(feat.lag).astype(np.float64)
        elif feat.kind == "dose_indicator":
            v = (f["dose"].to_numpy() == feat.dose).astype(np.float64)
        elif feat.kind == "dose":
            v = f["dose"].to_numpy().astype(np.float64)
        elif feat.kind == "modifier":
            if feat.modifier not in f.columns or feat.modifier not in table.modifiers:
                raise UnknownModifier(f"modifier {feat.modifier!r} was not carried into the expanded table")
            v = f[feat.modifier].to_numpy().astype(np.float64)
        elif feat.kind == "time":
            v = f["t"].to_numpy().astype(np.float64)
        else:
            a, b = feat.operands
            v = cols[a] * cols[b]
        cols[feat.name] = v
    X = np.column_stack([cols[name] for name in model.names]) if n else np.empty((0, model.q))
    if not np.all(np.isfinite(X)):
        row = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise NonFiniteFeature(f"non-finite feature value at expanded row {row}")
    return X


def build_design(table: ExpandedTable, model: WorkingModel) -> Design:
    """Evaluate the model's feature map and weights on every expanded row."""
    for m in model.modifiers:
        if m not in table.modifiers:
            raise UnknownModifier(f"modifier {m!r} was not carried into the expanded table")
    X = _feature_columns(model, table)
    f = table.frame
    h = model.h.evaluate(table)
    w = h * f["weight"].to_numpy()
    codes, ids = _cluster_codes(f["subject"].to_numpy())
    regime = f["regime"].cat.codes.to_numpy() if hasattr(f["regime"], "cat") else np.zeros(len(f), dtype=int)
    labels = list(f["regime"].cat.categories) if hasattr(f["regime"], "cat") else []
    return Design(X, f["Y"].to_numpy().astype(np.float64), w, codes, ids, regime, labels, model.names)


def _cluster_codes(subject: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # subjects arrive grouped and in panel order; keep that order
    if len(subject) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=object)
    change = np.r_[True, subject[1:] != subject[:-1]]
    codes = np.cumsum(change) - 1
    ids = subject[change]
    if len(set(ids.tolist())) != len(ids):
        ids, codes = np.unique(subject, return_inverse=True)
    return codes.astype(np.int64), ids


def link_derivatives(link: str, eta: np.ndarray, warn: bool = True):
    """Mean and its first two derivatives in the linear predictor.

    For ``logit`` and ``log`` the predictor is clamped to ``[-30, 30]``; a
    :class:`ClampWarning` is raised when that happens.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if link == "identity":
        return eta, np.ones_like(eta), np.zeros_like(eta)
    if link not in LINKS:
        raise InvalidModel(f"unknown link {link!r}")
    clipped = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    if warn and np.any(clipped != eta):
        warnings.warn(f"linear predictor clamped to +/-{ETA_CLAMP:g} for {link} link", ClampWarning, stacklevel=3)
    if link == "logit":
        m = 1.0 / (1.0 + np.exp(-clipped))
        d1 = m * (1.0 - m)
        return m, d1, d1 * (1.0 - 2.0 * m)
    m = np.exp(clipped)
    return m, m, m


def mean_and_gradient(model: WorkingModel | str, x: np.ndarray, beta: np.ndarray):
    """Mean ``m`` and gradient ``M = dm/dbeta`` for one row or a matrix of rows."""
    link = model if isinstance(model, str) else model.link
    x = np.asarray(x, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.shape[-1] != beta.shape[0]:
        raise InvalidModel(f"beta has length {beta.shape[0]}, design rows have {x.shape[-1]} columns")
    m, d1, _ = link_derivatives(link, x @ beta)
    M = d1[..., None] * x
    return m, M
