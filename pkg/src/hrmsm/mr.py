"""Multiply-robust estimation for two-step regimes with cross-fitting.

For a window ``(t-1, t)`` and regime ``(d_{t-1}, d_t)`` the estimating
function is ``h * M * (Z - m)`` with the pseudo-outcome

    Z = b2 + c1 * (b1 - b2) + c2 * (Y - b1),

where ``b1`` is the outcome regression at ``t`` evaluated at the regime's
treatment, ``b2`` the regression of ``b1`` on the history at ``t-1``
evaluated at the regime's earlier treatment, ``c1`` the inverse-probability
compliance factor at ``t-1`` and ``c2`` the product over both steps.  With
the nuisances fixed, the equation is a weighted GEE in the pseudo-outcome,
so the IPW solver and covariance estimators apply unchanged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DegeneratePropensity, NonFinite, NuisanceFitFailure, RankDeficientDesign
from .estimator import FitResult, _cluster_sum, solve_beta
from .msm import Design, WorkingModel, build_design, link_derivatives
from .panel import DEFAULT_EPSILON, Panel
from .regimes import ExpandedTable, RegimeSet, enumerate_regimes, expand_panel

__all__ = [
    "Learner",
    "LinearLearner",
    "LogisticLearner",
    "ConstantLearner",
    "NuisanceSpec",
    "NuisanceSet",
    "CrossFitPlan",
    "MRFit",
    "fit_nuisances",
    "nuisance_values",
    "psi",
    "pseudo_outcome",
    "solve_mr",
]

Predictor = Callable[[np.ndarray], np.ndarray]


class Learner(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray) -> Predictor: ...


@dataclass
class LinearLearner:
    """Ordinary least squares with an intercept."""

    intercept: bool = True
    coef_: np.ndarray | None = field(default=None, repr=False)

    def fit(self, X: np.ndarray, y: np.ndarray) -> Predictor:
        D = _with_intercept(X, self.intercept)
        if len(y) == 0:
            raise NuisanceFitFailure("no training rows for linear regression")
        if np.linalg.matrix_rank(D) < D.shape[1]:
            raise RankDeficientDesign(f"nuisance design with {D.shape[1]} columns has rank {np.linalg.matrix_rank(D)}")
        coef, *_ = np.linalg.lstsq(D, y, rcond=None)
        self.coef_ = coef
        intercept = self.intercept
        return lambda Xn: _with_intercept(Xn, intercept) @ coef


@dataclass
class LogisticLearner:
    """Maximum-likelihood logistic regression (Newton-Raphson) with an intercept."""

    intercept: bool = True
    max_iter: int = 50
    tol: float = 1e-10
    coef_: np.ndarray | None = field(default=None, repr=False)

    def fit(self, X: np.ndarray, y: np.ndarray) -> Predictor:
        D = _with_intercept(X, self.intercept)
        if len(y) == 0:
            raise NuisanceFitFailure("no training rows for logistic regression")
        if np.linalg.matrix_rank(D) < D.shape[1]:
            raise RankDeficientDesign("logistic nuisance design is rank deficient")
        beta = np.zeros(D.shape[1])
        for _ in range(self.max_iter):
            p, v, _ = link_derivatives("logit", D @ beta, warn=False)
            grad = D.T @ (y - p)
            H = (D * v[:, None]).T @ D
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError as exc:
                raise NuisanceFitFailure("logistic regression Hessian is singular (separation?)") from exc
            beta = beta + step
            if np.max(np.abs(step)) < self.tol:
                break
        else:
            raise NuisanceFitFailure("logistic regression did not converge")
        self.coef_ = beta
        intercept = self.intercept
        return lambda Xn: link_derivatives("logit", _with_intercept(Xn, intercept) @ beta, warn=False)[0]


@dataclass
class ConstantLearner:
    """Ignores the data and predicts a fixed value (``0`` gives the no-outcome-model case)."""

    value: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> Predictor:
        v = float(self.value)
        return lambda Xn: np.full(len(Xn), v)


def _with_intercept(X: np.ndarray, intercept: bool) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    return np.column_stack([np.ones(len(X)), X]) if intercept else X


def _learner(spec) -> Learner:
    if hasattr(spec, "fit"):
        return spec
    if spec == "linear":
        return LinearLearner()
    if spec == "logistic":
        return LogisticLearner()
    if spec in ("zero", 0, 0.0):
        return ConstantLearner(0.0)
    raise ConfigError(f"unknown learner {spec!r}")


@dataclass
class NuisanceSpec:
    """How to build the outcome regressions and propensities.

    Feature tokens name panel columns at the evaluation time (``"X"``), lagged
    values (``"lag1:X"``, ``"lag1:A"``, ``"lag2:Y"``), baseline columns, or an
    interaction with the current treatment (``"A*X"``).  The current
    treatment itself is always appended as the last regressor.  Lags that
    reach before the first timepoint read as 0.

    ``b`` is a learner (``"linear"``, ``"logistic"``, ``"zero"`` or an object
    with ``fit(X, y) -> predict``).  ``pi`` is ``"known"`` (use the panel's
    design propensities), ``"logistic"`` (fit on available rows), a constant
    probability on available rows, or a learner object.
    """

    b1_features: Sequence[str] = ("lag1:X", "lag1:A", "X")
    b2_features: Sequence[str] = ("X",)
    b: object = "linear"
    pi: object = "known"
    pi_features: Sequence[str] = ()
    epsilon: float = DEFAULT_EPSILON

    def to_dict(self) -> dict:
        def name(x):
            return x if isinstance(x, (str, int, float)) else type(x).__name__

        return {
            "b1_features": list(self.b1_features),
            "b2_features": list(self.b2_features),
            "b": name(self.b),
            "pi": name(self.pi),
            "pi_features": list(self.pi_features),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NuisanceSpec":
        allowed = {"b1_features", "b2_features", "b", "pi", "pi_features", "epsilon"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown nuisance option(s) {sorted(unknown)}")
        return cls(**d)


class _History:
    """Row-aligned access to panel columns, lags and treatment interactions."""

    def __init__(self, panel: Panel):
        self.panel = panel
        f = panel.frame
        self.t = f["t"].to_numpy()
        self.A = f["A"].to_numpy().astype(float)
        self.I = f["I"].to_numpy().astype(float)
        self._cache: dict[str, np.ndarray] = {}

    def column(self, name: str) -> np.ndarray:
        if name not in self._cache:
            try:
                self._cache[name] = self.panel.column(name).astype(np.float64)
            except KeyError:
                raise ConfigError(f"unknown history column {name!r}") from None
        return self._cache[name]

    def token(self, tok: str, rows: np.ndarray, a: np.ndarray) -> np.ndarray:
        if tok.startswith("A*"):
            return a * self.token(tok[2:], rows, a)
        if tok.startswith("lag") and ":" in tok:
            k_str, col = tok[3:].split(":", 1)
            k = int(k_str)
            vals = self.column(col)
            src = rows - k
            ok = self.t[rows] - k >= 1
            return np.where(ok, vals[np.where(ok, src, rows)], 0.0)
        return self.column(tok)[rows]

    def matrix(self, tokens: Sequence[str], rows: np.ndarray, a: np.ndarray) -> np.ndarray:
        cols = [self.token(tok, rows, a) for tok in tokens]
        cols.append(np.asarray(a, dtype=float))
        return np.column_stack(cols)


@dataclass
class NuisanceSet:
    """Fitted nuisance predictors.

    ``b1[j2](rows)`` evaluates the outcome regression at window-end rows with
    the current treatment set by atom ``j2``; ``b2[(j1, j2)](rows)`` evaluates
    the second-stage regression at the previous row under atom ``j1``;
    ``pi(rows)`` returns P[A = 1 | history], already clamped.
    """

    b1: dict
    b2: dict
    pi: Callable[[np.ndarray], np.ndarray]
    diagnostics: dict = field(default_factory=dict)


def _window_ends(panel: Panel, subjects_mask: np.ndarray | None = None) -> np.ndarray:
    t = panel.frame["t"].to_numpy()
    keep = t >= 2
    if subjects_mask is not None:
        keep &= subjects_mask
    return np.flatnonzero(keep)


def fit_nuisances(panel: Panel, spec: NuisanceSpec, train: np.ndarray | None = None) -> NuisanceSet:
    """Fit ``b1``, ``b2`` and the propensity model on the training rows.

    ``train`` is a boolean mask over panel rows (default: all rows).
    """
    hist = _History(panel)
    ends = _window_ends(panel, train)
    if len(ends) == 0:
        raise NuisanceFitFailure("no two-step windows in the training data")
    prev = ends - 1
    Y = panel.frame["Y"].to_numpy().astype(float)
    diag: dict = {}

    learner = _learner(spec.b)
    b1_pred = learner.fit(hist.matrix(spec.b1_features, ends, hist.A[ends]), Y[ends])
    diag["b1_coef"] = _coef(learner)
    b1 = {j: (lambda rows, j=j: b1_pred(hist.matrix(spec.b1_features, rows, j * hist.I[rows]))) for j in (0, 1)}

    b2 = {}
    for j2 in (0, 1):
        target = b1[j2](ends)
        l2 = _learner(spec.b)
        if isinstance(l2, LogisticLearner):
            l2 = LinearLearner()  # second stage targets are fitted means, not binary outcomes
        pred = l2.fit(hist.matrix(spec.b2_features, prev, hist.A[prev]), target)
        diag[f"b2_coef_j{j2}"] = _coef(l2)
        for j1 in (0, 1):
            b2[(j1, j2)] = (lambda rows, pred=pred, j1=j1: pred(hist.matrix(spec.b2_features, rows - 1, j1 * hist.I[rows - 1])))

    eps = spec.epsilon
    pi_known = panel.frame["pi"].to_numpy().astype(float)
    if isinstance(spec.pi, str) and spec.pi == "known":
        pi_fn = lambda rows: pi_known[rows]
        diag["pi"] = "known"
    elif isinstance(spec.pi, (int, float)) and not isinstance(spec.pi, bool):
        c = float(spec.pi)
        if not eps <= c <= 1 - eps:
            raise ConfigError(f"constant propensity {c} outside [{eps}, {1 - eps}]")
        pi_fn = lambda rows: c * hist.I[rows]
        diag["pi"] = {"constant": c}
    else:
        pl = LogisticLearner() if spec.pi == "logistic" else _learner(spec.pi)
        avail = np.flatnonzero(hist.I == 1) if train is None else np.flatnonzero((hist.I == 1) & train)
        Xp = _pi_matrix(hist, spec.pi_features, avail)
        raw = pl.fit(Xp, hist.A[avail])
        clamp_count = [0, 0]

        def pi_fn(rows, raw=raw):
            p = raw(_pi_matrix(hist, spec.pi_features, rows))
            out = np.clip(p, eps, 1 - eps)
            av = hist.I[rows] == 1
            clamp_count[0] += int(np.sum(av & (out != p)))
            clamp_count[1] += int(np.sum(av))
            return np.where(av, out, 0.0)

        diag["pi"] = {"coef": _coef(pl), "clamp_counter": clamp_count}
    return NuisanceSet(b1=b1, b2=b2, pi=pi_fn, diagnostics=diag)


def _pi_matrix(hist: _History, tokens: Sequence[str], rows: np.ndarray) -> np.ndarray:
    if not tokens:
        return np.empty((len(rows), 0))
    return np.column_stack([hist.token(tok, rows, hist.A[rows]) for tok in tokens])


def _coef(learner) -> list[float] | None:
    c = getattr(learner, "coef_", None)
    return None if c is None else [float(v) for v in c]


@dataclass
class NuisanceValues:
    """Nuisance predictions aligned with the rows of a two-step expanded table."""

    b1: np.ndarray
    b2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray


def nuisance_values(panel: Panel, table: ExpandedTable, nuisances: NuisanceSet | Sequence[tuple[np.ndarray, NuisanceSet]]) -> NuisanceValues:
    """Evaluate nuisances on every (window, regime) row of ``table``.

    ``nuisances`` is one set for all subjects, or a list of
    ``(row_mask, set)`` pairs assigning each panel row to the set fitted
    without it.
    """
    if table.gamma != 2:
        raise ConfigError("multiply-robust estimation is implemented for gamma = 2 only")
    f = panel.frame
    ends = _window_ends(panel)
    bits = table.regime_set.bit_matrix()
    R = len(bits)
    if len(table) != len(ends) * R:
        raise ConfigError("expanded table does not match the panel's two-step windows")
    A = f["A"].to_numpy()
    I = f["I"].to_numpy()
    Y = f["Y"].to_numpy().astype(float)
    parts = [(np.ones(len(f), dtype=bool), nuisances)] if isinstance(nuisances, NuisanceSet) else list(nuisances)

    b1 = np.empty((len(ends), R))
    b2 = np.empty((len(ends), R))
    p_prev = np.empty(len(ends))
    p_cur = np.empty(len(ends))
    covered = np.zeros(len(ends), dtype=bool)
    for mask, ns in parts:
        sel = mask[ends]
        rows = ends[sel]
        if len(rows) == 0:
            continue
        covered |= sel
        pi_t = ns.pi(rows)
        pi_p = ns.pi(rows - 1)
        p_cur[sel] = np.where(A[rows] == 1, pi_t, 1 - pi_t)
        p_prev[sel] = np.where(A[rows - 1] == 1, pi_p, 1 - pi_p)
        for r, (j1, j2) in enumerate(bits):
            b1[sel, r] = ns.b1[int(j2)](rows)
            b2[sel, r] = ns.b2[(int(j1), int(j2))](rows)
    if not covered.all():
        raise ConfigError("cross-fitting parts do not cover every subject")
    comp_prev = A[ends - 1][:, None] == bits[None, :, 0] * I[ends - 1][:, None]
    comp_cur = A[ends][:, None] == bits[None, :, 1] * I[ends][:, None]
    if np.any(comp_prev & (p_prev[:, None] <= 0)) or np.any(comp_cur & (p_cur[:, None] <= 0)):
        raise DegeneratePropensity("estimated probability of an observed treatment is 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        c1 = np.where(comp_prev, 1.0 / p_prev[:, None], 0.0)
        c2 = np.where(comp_prev & comp_cur, c1 / p_cur[:, None], 0.0)
    vals = NuisanceValues(b1.reshape(-1), b2.reshape(-1), c1.reshape(-1), c2.reshape(-1))
    for name in ("b1", "b2", "c1", "c2"):
        if not np.all(np.isfinite(getattr(vals, name))):
            raise NonFinite(f"nuisance values {name} are not finite")
    # outcome is aligned by repetition over regimes
    vals.y = np.repeat(Y[ends], R)
    return vals


def pseudo_outcome(vals: NuisanceValues) -> np.ndarray:
    return vals.b2 + vals.c1 * (vals.b1 - vals.b2) + vals.c2 * (vals.y - vals.b1)


def _mr_design(table: ExpandedTable, model: WorkingModel, vals: NuisanceValues) -> Design:
    design = build_design(table, model)
    h = model.h.evaluate(table)
    design.y = pseudo_outcome(vals)
    design.w = h
    return design


def psi(design: Design, beta: np.ndarray, link: str = "identity") -> np.ndarray:
    """Per-subject multiply-robust estimating function for a pseudo-outcome design."""
    beta = np.asarray(beta, dtype=np.float64)
    m, d1, _ = link_derivatives(link, design.X @ beta)
    contrib = (design.w * d1 * (design.y - m))[:, None] * design.X
    return _cluster_sum(contrib, design.cluster, design.n_clusters).reshape(design.n_clusters, -1)


@dataclass
class CrossFitPlan:
    folds: int = 2
    seed: int = 0
    assignment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("cross-fitting needs at least 2 folds")

    def assign(self, subjects: Sequence) -> dict:
        """Balanced random partition of ``subjects`` into folds, fixed by ``seed``."""
        subjects = list(subjects)
        if len(subjects) < self.folds:
            raise ConfigError(f"{len(subjects)} subjects cannot fill {self.folds} folds")
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        order = rng.permutation(len(subjects))
        fold = np.empty(len(subjects), dtype=int)
        fold[order] = np.arange(len(subjects)) % self.folds
        self.assignment = {s: int(k) for s, k in zip(subjects, fold)}
        return self.assignment


@dataclass
class MRFit:
    fit: FitResult
    plan: CrossFitPlan
    nuisance_diagnostics: list[dict]

    def diagnostics_json(self, **kw) -> str:
        return json.dumps({"folds": self.plan.folds, "seed": self.plan.seed, "per_fold": self.nuisance_diagnostics}, **kw)


def solve_mr(
    panel: Panel,
    model: WorkingModel,
    plan: CrossFitPlan | None = None,
    spec: NuisanceSpec | None = None,
    *,
    gamma: int = 2,
    regime_set: RegimeSet | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
    nuisances: NuisanceSet | None = None,
) -> MRFit:
    """Cross-fitted multiply-robust estimate of the working-model coefficients.

    Nuisances for each fold are fitted on the other folds.  Passing
    ``nuisances`` skips fitting and uses the given set for every subject.
    Covariances are the sandwich ``U^-1 mean(psi psi') U^-1 / n`` plus the
    CR1-CR3 variants, all computed with the fold-specific nuisances.
    """
    if gamma != 2:
        raise ConfigError(f"multiply-robust estimation supports gamma = 2 only (got {gamma})")
    plan = plan or CrossFitPlan()
    spec = spec or NuisanceSpec()
    rset = regime_set or enumerate_regimes(2)
    if rset.gamma != 2:
        raise ConfigError("regime set must have gamma = 2")
    table = expand_panel(panel, rset, model.modifiers)
    subj = panel.frame["subject"].to_numpy()
    diags: list[dict] = []
    if nuisances is not None:
        parts = nuisances
    else:
        assignment = plan.assign(panel.subjects)
        fold_of_row = np.array([assignment[s] for s in subj])
        parts = []
        for k in range(plan.folds):
            held = fold_of_row == k
            ns = fit_nuisances(panel, spec, train=~held)
            parts.append((held, ns))
            diags.append({"fold": k, "n_train_subjects": int(sum(v != k for v in assignment.values())),
                          **ns.diagnostics})
    vals = nuisance_values(panel, table, parts)
    for d in diags:
        pi_diag = d.get("pi")
        if isinstance(pi_diag, dict) and "clamp_counter" in pi_diag:
            hits, total = pi_diag.pop("clamp_counter")
            pi_diag["clamp_rate"] = hits / total if total else 0.0
    design = _mr_design(table, model, vals)
    fit = solve_beta(design, model, tol=tol, max_iter=max_iter)
    fit.estimator = "mr"
    fit.diagnostics["folds"] = plan.folds
    return MRFit(fit=fit, plan=plan, nuisance_diagnostics=diags)
