"""IPW estimation of working-model coefficients with cluster-robust inference.

The estimating function of a subject is

    phi(beta) = sum over rows  w * M(beta) * (Y - m(beta))

with ``w = h * ip_weight`` and ``M`` the gradient of the mean.  The solver
finds ``mean_i phi_i(beta) = 0``; covariances are sandwich estimators
clustered on subject.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import (
    ConfigError,
    EmptyCell,
    NoConvergence,
    NonFinite,
    SingularSystem,
    UnknownVcov,
)
from .msm import ClampWarning, Design, WorkingModel, build_design, link_derivatives
from .panel import Panel
from .regimes import enumerate_regimes, expand_panel

__all__ = [
    "VCOV_NAMES",
    "CONTRAST_PRESETS",
    "FitResult",
    "Contrast",
    "estimating_function",
    "jacobian",
    "solve_beta",
    "sandwich_vcov",
    "wald",
    "contrast_vector",
    "fit_ipw",
    "availability_conditional_fit",
]

VCOV_NAMES = ("sandwich", "CR1", "CR2", "CR3")

# Named contrasts of the saturated two-step model 1, J[t-1], J[t], J[t-1]:J[t].
CONTRAST_PRESETS: dict[str, dict[str, float]] = {
    "blip": {"J[t]": 1.0},
    "dissipation": {"J[t]": 1.0, "J[t-1]": -1.0},
    "dose_0": {"(Intercept)": 1.0},
    "dose_1": {"(Intercept)": 1.0, "J[t-1]": 0.5, "J[t]": 0.5},
    "dose_2": {"(Intercept)": 1.0, "J[t-1]": 1.0, "J[t]": 1.0, "J[t-1]:J[t]": 1.0},
}
PRESET_GROUPS = {"dose": ("dose_0", "dose_1", "dose_2")}


@dataclass
class FitResult:
    beta_hat: np.ndarray
    names: list[str]
    vcov: dict[str, np.ndarray]
    A_hat: np.ndarray
    B_hat: np.ndarray
    n_subjects: int
    converged: bool
    iterations: int
    residual_norm: float
    link: str = "identity"
    estimator: str = "ipw"
    diagnostics: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.beta_hat)

    def se(self, vcov: str = "sandwich") -> np.ndarray:
        return np.sqrt(np.clip(np.diag(_get_vcov(self, vcov)), 0.0, None))

    def coef_table(self) -> pd.DataFrame:
        out = pd.DataFrame({"term": self.names, "estimate": self.beta_hat})
        for name in VCOV_NAMES:
            if name in self.vcov:
                out[f"se_{name}"] = self.se(name)
        return out

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "link": self.link,
            "names": list(self.names),
            "beta_hat": self.beta_hat.tolist(),
            "vcov": {k: v.tolist() for k, v in self.vcov.items()},
            "A_hat": self.A_hat.tolist(),
            "B_hat": self.B_hat.tolist(),
            "n_subjects": self.n_subjects,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "residual_norm": self.residual_norm,
            },
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        conv = d["convergence"]
        return cls(
            beta_hat=np.asarray(d["beta_hat"], dtype=float),
            names=list(d["names"]),
            vcov={k: np.asarray(v, dtype=float) for k, v in d["vcov"].items()},
            A_hat=np.asarray(d["A_hat"], dtype=float),
            B_hat=np.asarray(d["B_hat"], dtype=float),
            n_subjects=int(d["n_subjects"]),
            converged=bool(conv["converged"]),
            iterations=int(conv["iterations"]),
            residual_norm=float(conv["residual_norm"]),
            link=d.get("link", "identity"),
            estimator=d.get("estimator", "ipw"),
            diagnostics=dict(d.get("diagnostics", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Contrast:
    c: np.ndarray
    estimate: float
    se: float
    ci: tuple[float, float]
    p_value: float
    level: float
    vcov_name: str
    name: str = ""

    @property
    def z(self) -> float:
        return self.estimate / self.se if self.se > 0 else math.copysign(math.inf, self.estimate)


def _get_vcov(fit: FitResult, name: str) -> np.ndarray:
    try:
        return fit.vcov[name]
    except KeyError:
        raise UnknownVcov(f"unknown covariance estimator {name!r}; available: {sorted(fit.vcov)}") from None


def _cluster_sum(values: np.ndarray, cluster: np.ndarray, n: int) -> np.ndarray:
    """Sum row contributions (rows x k) within clusters, in cluster order."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(cluster, weights=values, minlength=n)
    return np.column_stack([np.bincount(cluster, weights=values[:, j], minlength=n) for j in range(values.shape[1])])


def _row_terms(design: Design, beta: np.ndarray, link: str, warn: bool = True):
    eta = design.X @ beta
    m, d1, d2 = link_derivatives(link, eta, warn=warn)
    return m, d1, d2


def estimating_function(design: Design, beta: np.ndarray, link: str = "identity") -> np.ndarray:
    """Per-subject estimating function values, shape (n_subjects, q)."""
    beta = np.asarray(beta, dtype=np.float64)
    m, d1, _ = _row_terms(design, beta, link)
    contrib = (design.w * d1 * (design.y - m))[:, None] * design.X
    out = _cluster_sum(contrib, design.cluster, design.n_clusters)
    if not np.all(np.isfinite(out)):
        raise NonFinite("estimating function is not finite")
    return out.reshape(design.n_clusters, design.X.shape[1])


def jacobian(design: Design, beta: np.ndarray, link: str = "identity") -> np.ndarray:
    """Analytic ``mean_i d phi_i / d beta`` (q x q)."""
    m, d1, d2 = _row_terms(design, beta, link, warn=False)
    c = design.w * (d2 * (design.y - m) - d1 * d1)
    return (design.X * c[:, None]).T @ design.X / design.n_clusters


def numeric_jacobian(design: Design, beta: np.ndarray, link: str = "identity", step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``mean_i phi_i``."""
    beta = np.asarray(beta, dtype=np.float64)
    q = len(beta)
    J = np.empty((q, q))
    for k in range(q):
        h = step * max(1.0, abs(beta[k]))
        up, dn = beta.copy(), beta.copy()
        up[k] += h
        dn[k] -= h
        J[:, k] = (estimating_function(design, up, link).mean(0) - estimating_function(design, dn, link).mean(0)) / (2 * h)
    return J


def _check_cells(design: Design) -> None:
    if len(design) == 0:
        raise EmptyCell("design has no rows")
    if design.regime_labels:
        mass = np.bincount(design.regime, weights=design.w, minlength=len(design.regime_labels))
        for label, tot in zip(design.regime_labels, mass):
            if not tot > 0:
                raise EmptyCell(f"regime {label} has no compliant rows with positive weight", regime=label)
    elif not np.any(design.w > 0):
        raise EmptyCell("no rows with positive weight")


def _solve(J: np.ndarray, g: np.ndarray, what: str) -> np.ndarray:
    _, sv, vt = np.linalg.svd(J)
    if sv[0] == 0 or sv[-1] <= 1e-12 * sv[0]:
        raise SingularSystem(f"{what} is singular (parameter not identified)", null_direction=vt[-1])
    return np.linalg.solve(J, g)


def _initial_beta(design: Design, link: str) -> np.ndarray:
    q = design.X.shape[1]
    if link == "identity":
        return np.zeros(q)
    beta = np.zeros(q)
    intercept = np.flatnonzero(np.all(design.X == 1.0, axis=0))
    wsum = design.w.sum()
    ybar = float(design.w @ design.y / wsum) if wsum > 0 else 0.5
    if len(intercept):
        if link == "logit":
            ybar = min(max(ybar, 1e-6), 1 - 1e-6)
            beta[intercept[0]] = math.log(ybar / (1 - ybar))
        else:
            beta[intercept[0]] = math.log(max(ybar, 1e-6))
    return beta


def solve_beta(
    design: Design,
    model: WorkingModel | str = "identity",
    init: Sequence[float] | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
    *,
    method: str = "auto",
    numeric_jac: bool = False,
    compute_vcov: bool = True,
) -> FitResult:
    """Root of the IPW estimating equation.

    Identity links are solved in closed form as weighted least squares unless
    ``method="newton"``.  Other links use Newton steps with the analytic
    Jacobian (``numeric_jac=True`` swaps in central differences), halving the
    step whenever the residual norm fails to decrease.
    """
    link = model if isinstance(model, str) else model.link
    _check_cells(design)
    live = design.subset(design.w > 0)
    q = design.X.shape[1]
    n = design.n_clusters
    clamps = 0

    def residual(b):
        nonlocal clamps
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ClampWarning)
            g = estimating_function(live, b, link).mean(0) if n else np.zeros(q)
        clamps += sum(issubclass(w.category, ClampWarning) for w in caught)
        return g

    if link == "identity" and method == "auto":
        XtW = live.X.T * live.w
        beta = _solve(XtW @ live.X, XtW @ live.y, "weighted normal-equations matrix")
        iterations = 0
        g = residual(beta)
        # iterative refinement if round-off leaves the residual above tol
        while np.max(np.abs(g)) > tol and iterations < 3:
            beta = beta - _solve(jacobian(live, beta, link), g, "weighted normal-equations matrix")
            g = residual(beta)
            iterations += 1
    else:
        beta = np.asarray(init, dtype=float).copy() if init is not None else _initial_beta(live, link)
        g = residual(beta)
        iterations = 0
        while np.max(np.abs(g)) > tol and iterations < max_iter:
            J = numeric_jacobian(live, beta, link) if numeric_jac else jacobian(live, beta, link)
            step = _solve(J, g, "estimating-equation Jacobian")
            current = np.max(np.abs(g))
            t = 1.0
            while True:
                cand = beta - t * step
                g_new = residual(cand)
                if np.all(np.isfinite(g_new)) and np.max(np.abs(g_new)) < current or t < 1e-8:
                    break
                t /= 2
            beta, g = cand, g_new
            iterations += 1
    g = residual(beta)
    res_norm = float(np.max(np.abs(g)))
    converged = bool(res_norm <= tol)
    fit = FitResult(
        beta_hat=beta,
        names=list(design.names),
        vcov={},
        A_hat=np.full((q, q), np.nan),
        B_hat=np.full((q, q), np.nan),
        n_subjects=n,
        converged=converged,
        iterations=iterations,
        residual_norm=res_norm,
        link=link,
        diagnostics={"clamp_events": clamps, "rows": int(len(design)), "positive_weight_rows": int(len(live))},
    )
    if not converged:
        raise NoConvergence(f"no convergence after {iterations} iterations (residual {res_norm:.3g})", result=fit)
    if compute_vcov:
        vc = sandwich_vcov(live, beta, link)
        fit.vcov, fit.A_hat, fit.B_hat = vc["vcov"], vc["A_hat"], vc["B_hat"]
    return fit


def sandwich_vcov(design: Design, beta: np.ndarray, link: str = "identity") -> dict:
    """Sandwich covariance of ``beta_hat`` and its small-sample cluster variants.

    Returns a dict with ``vcov`` (sandwich, CR1, CR2, CR3), ``A_hat`` and
    ``B_hat``.  ``sandwich = B^-1 A B^-1 / n``; ``CR1`` rescales it by
    ``n / (n - q)``; ``CR2`` and ``CR3`` replace each subject's score by
    ``Z'(I - H)^(-1/2) r`` and ``Z'(I - H)^(-1) r``, where ``Z`` holds the
    weighted mean gradients of the subject's rows, ``r`` the weighted
    residuals and ``H = Z G^-1 Z'`` the subject's leverage block.
    """
    beta = np.asarray(beta, dtype=np.float64)
    n = design.n_clusters
    q = design.X.shape[1]
    if n <= q:
        raise SingularSystem(f"{n} subject(s) cannot support {q} parameters (n - q <= 0)")
    m, d1, d2 = _row_terms(design, beta, link, warn=False)
    resid = design.y - m
    phi = _cluster_sum((design.w * d1 * resid)[:, None] * design.X, design.cluster, n).reshape(n, q)
    A = phi.T @ phi / n
    B = jacobian(design, beta, link)
    try:
        Binv = np.linalg.inv(B)
    except np.linalg.LinAlgError:
        raise SingularSystem("Jacobian of the estimating equation is singular") from None
    V = Binv @ A @ Binv.T / n

    # per-subject Gauss-Newton blocks S_c = Z_c'Z_c with Z = sqrt(w) d1 X
    Zw = design.w * d1 * d1
    S = np.empty((n, q, q))
    for j in range(q):
        for k in range(j, q):
            S[:, j, k] = S[:, k, j] = np.bincount(design.cluster, weights=Zw * design.X[:, j] * design.X[:, k], minlength=n)
    G = S.sum(0)
    gv, gV = np.linalg.eigh(G)
    if gv[0] <= 1e-12 * max(gv[-1], 1e-300):
        raise SingularSystem("information matrix is singular", null_direction=gV[:, 0])
    L = (gV / np.sqrt(gv)) @ gV.T  # G^(-1/2)
    C = L @ S @ L  # batched
    lam, U = np.linalg.eigh(C)
    one_minus = 1.0 - lam
    if np.any(one_minus <= 1e-10):
        warnings.warn("subject leverage at or above 1; CR2/CR3 adjustments clamped", RuntimeWarning, stacklevel=2)
        one_minus = np.maximum(one_minus, 1e-10)
    live = lam > 1e-14 * max(lam.max(), 1e-300)
    Lg = np.einsum("jk,ck->cj", L, phi)
    proj = np.einsum("cjk,cj->ck", U, Lg)  # U' L g
    bread_inv = np.linalg.inv(B * n)
    out = {"sandwich": V, "CR1": V * n / (n - q)}
    for name, power in (("CR2", 0.5), ("CR3", 1.0)):
        coef = np.where(live, (one_minus ** -power - 1.0) / np.where(live, lam, 1.0), 0.0)
        inner = np.einsum("cjk,ck->cj", U, coef * proj)
        u = phi + np.einsum("cjk,kl,cl->cj", S, L, inner)
        meat = u.T @ u
        out[name] = bread_inv @ meat @ bread_inv.T
    for k, v in out.items():
        out[k] = (v + v.T) / 2
    return {"vcov": out, "A_hat": A, "B_hat": B}


def contrast_vector(spec: str | Mapping[str, float] | Sequence[float], names: Sequence[str]) -> np.ndarray:
    """Build a contrast from a preset name, a {term: coef} map or a raw vector."""
    if isinstance(spec, str):
        if spec not in CONTRAST_PRESETS:
            raise ConfigError(f"unknown contrast preset {spec!r}; choose from {sorted(CONTRAST_PRESETS)}")
        spec = CONTRAST_PRESETS[spec]
    if isinstance(spec, Mapping):
        c = np.zeros(len(names))
        for term, val in spec.items():
            if term not in names:
                raise ConfigError(f"contrast references term {term!r} absent from the model {list(names)}")
            c[list(names).index(term)] = val
        return c
    c = np.asarray(spec, dtype=float)
    if c.shape != (len(names),):
        raise ConfigError(f"contrast has length {c.size}, model has {len(names)} coefficients")
    return c


def wald(
    fit: FitResult,
    c: str | Mapping[str, float] | Sequence[float],
    level: float = 0.95,
    vcov: str = "sandwich",
    name: str | None = None,
) -> Contrast:
    """Wald estimate, standard error, normal CI and two-sided p-value for ``c'beta``."""
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    label = name or (c if isinstance(c, str) else "")
    cv = contrast_vector(c, fit.names)
    V = _get_vcov(fit, vcov)
    est = float(cv @ fit.beta_hat)
    se = float(math.sqrt(max(cv @ V @ cv, 0.0)))
    z = stats.norm.ppf(0.5 + level / 2)
    if se > 0:
        p = float(2 * stats.norm.sf(abs(est) / se))
    else:
        p = 0.0 if est != 0 else 1.0
    return Contrast(cv, est, se, (est - z * se, est + z * se), p, level, vcov, label)


def fit_ipw(
    panel: Panel,
    model: WorkingModel,
    gamma: int,
    *,
    max_dose: int | None = None,
    sequences: Sequence[str] | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> FitResult:
    """Expand ``panel`` over the regime set and solve the IPW equation."""
    rset = enumerate_regimes(gamma, max_dose=max_dose, sequences=sequences)
    table = expand_panel(panel, rset, model.modifiers)
    return solve_beta(build_design(table, model), model, tol=tol, max_iter=max_iter)


def availability_conditional_fit(
    panel: Panel,
    model: WorkingModel,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> FitResult:
    """Single-step fit restricted to available rows.

    The regime indicator ``J[t]`` then equals the treatment ``a_t`` and rows
    carry weight ``1 / pi_t(A_t)``.
    """
    if model.max_lag > 0:
        raise ConfigError("availability-conditional models may only use the current treatment (lag 0)")
    table = expand_panel(panel, enumerate_regimes(1), model.modifiers)
    available = np.repeat(panel.frame["I"].to_numpy() == 1, 2)
    if not available.any():
        raise EmptyCell("panel has no available (I = 1) rows")
    table.frame = table.frame[available].reset_index(drop=True)
    design = build_design(table, model)
    design.cluster_ids = np.asarray(panel.subjects, dtype=object)
    codes = {s: i for i, s in enumerate(panel.subjects)}
    design.cluster = np.array([codes[s] for s in table.frame["subject"].to_numpy()], dtype=np.int64)
    fit = solve_beta(design, model, tol=tol, max_iter=max_iter)
    fit.estimator = "availability_conditional"
    return fit
