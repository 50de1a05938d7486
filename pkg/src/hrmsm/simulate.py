"""Synthetic panels from two structural-equation scenarios, analytic truth, replicate harness.

Random streams come from numpy's ``SeedSequence`` feeding a PCG64 generator.
Replicate ``r`` of a run with root seed ``s`` draws from
``SeedSequence(s, spawn_key=(r,))``, so each replicate is reproducible on its
own and results do not depend on how replicates are spread over workers.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, HRMSMError, InvalidParams
from .estimator import PRESET_GROUPS, VCOV_NAMES, contrast_vector, fit_ipw, wald
from .msm import WorkingModel, saturated_model
from .panel import Panel
from .regimes import RegimeSequence

__all__ = [
    "SimScenario",
    "TruthReport",
    "simulate_panel",
    "true_beta",
    "feedback_true_beta",
    "feedback_macro_difference",
    "forced_regime_outcomes",
    "replicate_rng",
    "ReplicateReport",
    "run_replicates",
]

PAPER_ALPHA = (0.25, 2.0, 1.75, 0.5)
KINDS = ("ClosedLoopMain", "FeedbackCancel")


@dataclass
class SimScenario:
    """Structural-equation scenario.

    ``ClosedLoopMain`` uses ``alpha = (a1, a2, a3, a4)`` and ``sigma``.
    ``FeedbackCancel`` uses ``gamma = (g1, g2, g3, g4)``, an optional
    intercept ``gamma0`` (scalar or length-T vector, default 0), ``sigma``
    and ``active_fraction``, the share of subjects in the active group
    (``G = 1``, where treatment affects covariates and outcomes).
    """

    kind: str = "ClosedLoopMain"
    n: int = 100
    T: int = 50
    seed: int = 0
    alpha: Sequence[float] = PAPER_ALPHA
    gamma: Sequence[float] = (1.0, 0.5, 1.0, 0.5)
    gamma0: float | Sequence[float] = 0.0
    sigma: float = 1.0
    active_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParams(f"scenario kind must be one of {KINDS}, got {self.kind!r}")
        if self.n < 2 or self.T < 2:
            raise InvalidParams(f"need n >= 2 and T >= 2 (got n={self.n}, T={self.T})")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidParams("sigma must be a finite non-negative number")
        if len(self.alpha) != 4 or len(self.gamma) != 4:
            raise InvalidParams("alpha and gamma must each have 4 entries")
        if not 0 <= self.active_fraction <= 1:
            raise InvalidParams("active_fraction must lie in [0, 1]")
        g0 = np.atleast_1d(np.asarray(self.gamma0, dtype=float))
        if g0.size not in (1, self.T):
            raise InvalidParams(f"gamma0 must be a scalar or have length T={self.T}")
        if not np.all(np.isfinite(np.r_[self.alpha, self.gamma, g0])):
            raise InvalidParams("structural coefficients must be finite")

    def replace(self, **kw) -> "SimScenario":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return SimScenario(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("alpha", "gamma"):
            d[k] = [float(v) for v in d[k]]
        g0 = np.asarray(self.gamma0, dtype=float)
        d["gamma0"] = float(g0) if g0.ndim == 0 else g0.tolist()
        return d


@dataclass(frozen=True)
class TruthReport:
    beta_true: np.ndarray
    excursion_contrasts: dict

    def contrast(self, name: str, names: Sequence[str]) -> float:
        return float(contrast_vector(name, names) @ self.beta_true)


def _truth(beta: np.ndarray) -> TruthReport:
    b0, b1, b2, b3 = beta
    return TruthReport(
        beta_true=beta,
        excursion_contrasts={
            "blip": b2,
            "dissipation": b2 - b1,
            "dose_curve": (b0, b0 + 0.5 * (b1 + b2), b0 + b1 + b2 + b3),
        },
    )


def true_beta(alpha: Sequence[float]) -> TruthReport:
    """Saturated two-step coefficients implied by the closed-loop scenario."""
    a1, a2, a3, a4 = (float(a) for a in alpha)
    return _truth(np.array([0.5 * a1 + 0.4 * a3, 0.5 * a2 + 0.2 * a3, 0.4 * a4, 0.2 * a4]))


def feedback_true_beta(gamma: Sequence[float], group: int, gamma0: float = 0.0) -> TruthReport:
    """Saturated two-step coefficients within one group of the feedback scenario.

    In the active group ``E[X] = 0.5`` before the window and a treated step
    lowers the next ``P[X = 1]`` from 0.7 to 0.2; in the inactive group
    ``P[X = 1] = 0.7`` and treatment has no effect.
    """
    g1, g2, g3, g4 = (float(g) for g in gamma)
    if group == 1:
        beta = [gamma0 + 0.5 * g1 + 0.7 * g3, 0.5 * g2 - 0.25 * g3, 0.7 * g4, -0.25 * g4]
    elif group == 0:
        beta = [gamma0 + 0.7 * (g1 + g3), 0.0, 0.0, 0.0]
    else:
        raise InvalidParams("group must be 0 or 1")
    return _truth(np.array(beta))


def feedback_macro_difference(gamma: Sequence[float]) -> float:
    """Stationary mean outcome of the active group minus the inactive group."""
    g1, g2, g3, g4 = (float(g) for g in gamma)
    return -0.2 * (g1 + g3) + 0.4 * (g2 + g4)


def _closed_loop(sc: SimScenario, rng: np.random.Generator):
    n, T = sc.n, sc.T
    a1, a2, a3, a4 = sc.alpha
    X = np.empty((n, T + 1), dtype=np.int64)
    A = np.empty((n, T + 1), dtype=np.int64)
    X[:, 0] = rng.random(n) < 0.5
    A[:, 0] = rng.random(n) < 0.5 * X[:, 0]
    for t in range(1, T + 1):
        X[:, t] = rng.random(n) < 0.4 + 0.4 * A[:, t - 1]
        A[:, t] = rng.random(n) < 0.5 * X[:, t]
    noise = rng.standard_normal((n, T))
    Y = a1 * X[:, :-1] + a2 * A[:, :-1] + a3 * X[:, 1:] + a4 * A[:, 1:] + sc.sigma * noise
    return X[:, 1:], A[:, 1:], Y, 0.5 * X[:, 1:], None


def _feedback(sc: SimScenario, rng: np.random.Generator):
    n, T = sc.n, sc.T
    g1, g2, g3, g4 = sc.gamma
    n_active = int(round(sc.active_fraction * n))
    G = np.zeros(n, dtype=np.int64)
    G[rng.permutation(n)[:n_active]] = 1
    X = np.empty((n, T + 1), dtype=np.int64)
    A = np.empty((n, T + 1), dtype=np.int64)
    X[:, 0] = rng.random(n) < 0.5
    A[:, 0] = rng.random(n) < 0.8 * X[:, 0]
    for t in range(1, T + 1):
        X[:, t] = rng.random(n) < 0.7 - 0.5 * A[:, t - 1] * G
        A[:, t] = rng.random(n) < 0.8 * X[:, t]
    noise = rng.standard_normal((n, T))
    g0 = np.broadcast_to(np.asarray(sc.gamma0, dtype=float), (T,))
    Gc = G[:, None]
    Y = g0 + g1 * X[:, :-1] + g3 * X[:, 1:] + Gc * (g2 * A[:, :-1] + g4 * A[:, 1:]) + sc.sigma * noise
    return X[:, 1:], A[:, 1:], Y, 0.8 * X[:, 1:], G


def simulate_panel(scenario: SimScenario, rng: np.random.Generator | None = None) -> Panel:
    """Draw one panel.  Timepoint 0 is a burn-in step; rows cover t = 1..T.

    Columns: subject, t, I (= X), A, Y, pi and the covariate X.  The feedback
    scenario adds the baseline column ``G``.
    """
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence(scenario.seed))
    draw = _closed_loop if scenario.kind == "ClosedLoopMain" else _feedback
    X, A, Y, pi, G = draw(scenario, rng)
    n, T = scenario.n, scenario.T
    frame = pd.DataFrame(
        {
            "subject": np.repeat(np.arange(n), T),
            "t": np.tile(np.arange(1, T + 1), n),
            "I": X.reshape(-1),
            "A": A.reshape(-1),
            "Y": Y.reshape(-1),
            "pi": pi.reshape(-1),
            "X": X.reshape(-1),
        }
    )
    baseline = None if G is None else pd.DataFrame({"G": G}, index=pd.Index(np.arange(n), name="subject"))
    return Panel(frame, baseline=baseline, epsilon=0.0)


def forced_regime_outcomes(
    alpha: Sequence[float],
    regime: RegimeSequence | str,
    draws: int,
    rng: np.random.Generator,
    sigma: float = 1.0,
) -> np.ndarray:
    """Counterfactual ``Y_2`` under a two-step regime, by direct simulation.

    Timepoint 0 evolves naturally; at t = 1 and t = 2 treatment is set by the
    regime (``A = bit * X``) instead of being randomized.
    """
    seq = regime if isinstance(regime, RegimeSequence) else RegimeSequence.from_bits(regime)
    if seq.gamma != 2:
        raise ConfigError("forced-regime oracle covers two-step regimes only")
    j1, j2 = seq.bits
    a1, a2, a3, a4 = alpha
    X0 = rng.random(draws) < 0.5
    A0 = rng.random(draws) < 0.5 * X0
    X1 = (rng.random(draws) < 0.4 + 0.4 * A0).astype(float)
    A1 = j1 * X1
    X2 = (rng.random(draws) < 0.4 + 0.4 * A1).astype(float)
    A2 = j2 * X2
    return a1 * X1 + a2 * A1 + a3 * X2 + a4 * A2 + sigma * rng.standard_normal(draws)


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(r,))))


def _expand_contrasts(contrasts) -> list[str | tuple[str, Mapping]]:
    out = []
    for c in contrasts:
        if isinstance(c, str) and c in PRESET_GROUPS:
            out.extend(PRESET_GROUPS[c])
        else:
            out.append(c)
    return out


def _label(c) -> str:
    return c if isinstance(c, str) else c[0]


def _spec(c):
    return c if isinstance(c, str) else c[1]


def _one_replicate(args) -> list[dict]:
    scenario, model, estimator, r, vcov_names, contrasts, level, gamma, mr_options = args
    rng = replicate_rng(scenario.seed, r)
    rows = []
    try:
        panel = simulate_panel(scenario, rng)
        if estimator == "ipw":
            fit = fit_ipw(panel, model, gamma)
        else:
            from .mr import CrossFitPlan, NuisanceSpec, solve_mr

            opts = dict(mr_options or {})
            plan = CrossFitPlan(folds=opts.pop("folds", 2), seed=int(rng.integers(2**63)))
            spec = opts.pop("spec", None) or NuisanceSpec(**opts)
            fit = solve_mr(panel, model, plan, spec).fit
    except HRMSMError as exc:
        return [{"rep": r, "contrast": _label(c), "vcov": v, "failed": True, "error": type(exc).__name__}
                for c in contrasts for v in vcov_names]
    for c in contrasts:
        for v in vcov_names:
            w = wald(fit, _spec(c), level=level, vcov=v)
            rows.append({"rep": r, "contrast": _label(c), "vcov": v, "failed": False, "error": "",
                         "estimate": w.estimate, "se": w.se, "ci_low": w.ci[0], "ci_high": w.ci[1]})
    return rows


@dataclass
class ReplicateReport:
    """Per-replicate results and their summary.

    ``replicates`` has one row per replicate x contrast x vcov; ``summary``
    one row per contrast x vcov with relative bias (absolute bias when the
    truth is 0, flagged in ``bias_kind``), empirical SD, mean SE, coverage
    and failure rate.
    """

    replicates: pd.DataFrame
    summary: pd.DataFrame
    truth: dict
    scenario: SimScenario
    meta: dict = field(default_factory=dict)

    def long_table(self) -> pd.DataFrame:
        """Plot-ready long format: one row per contrast x vcov x metric."""
        return self.summary.melt(
            id_vars=["contrast", "vcov"],
            value_vars=["bias", "emp_sd", "mean_se", "coverage", "failure_rate"],
            var_name="metric",
            value_name="value",
        )


def _summarize(reps: pd.DataFrame, truth: Mapping[str, float], level: float) -> pd.DataFrame:
    out = []
    for (c, v), g in reps.groupby(["contrast", "vcov"], sort=False):
        ok = g[~g["failed"]]
        tr = truth.get(c, math.nan)
        mean = ok["estimate"].mean() if len(ok) else math.nan
        if tr != 0 and math.isfinite(tr):
            bias, kind = (mean - tr) / tr, "relative"
        else:
            bias, kind = mean - tr, "absolute"
        covered = (ok["ci_low"] <= tr) & (tr <= ok["ci_high"])
        out.append({
            "contrast": c, "vcov": v, "truth": tr, "mean_estimate": mean, "bias": bias, "bias_kind": kind,
            "emp_sd": ok["estimate"].std(ddof=1) if len(ok) > 1 else math.nan,
            "mean_se": ok["se"].mean() if len(ok) else math.nan,
            "coverage": covered.mean() if len(ok) and math.isfinite(tr) else math.nan,
            "level": level, "n_ok": len(ok), "failure_rate": 1 - len(ok) / len(g),
        })
    return pd.DataFrame(out)


def run_replicates(
    scenario: SimScenario,
    model: WorkingModel | None = None,
    estimator: str = "ipw",
    reps: int = 100,
    vcov_names: Sequence[str] = VCOV_NAMES,
    contrasts: Sequence = ("blip", "dissipation", "dose"),
    *,
    workers: int = 1,
    level: float = 0.95,
    truth: Mapping[str, float] | Sequence[float] | None = None,
    mr_options: Mapping | None = None,
) -> ReplicateReport:
    """Simulate ``reps`` panels, fit each, and summarize bias and coverage.

    Contrasts are preset names, ``"dose"`` (expanding to three dose levels),
    ``"beta:<term>"`` for a single coefficient, or ``(label, {term: coef})``
    pairs.  ``truth`` defaults to the closed-form coefficients for the
    closed-loop scenario with the saturated model; pass a coefficient vector
    or a ``{label: value}`` map otherwise.  Fit errors are recorded per
    replicate and summarized as a failure rate.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if estimator not in ("ipw", "mr"):
        raise ConfigError(f"estimator must be 'ipw' or 'mr', got {estimator!r}")
    model = model or saturated_model(2)
    gamma = max(model.max_lag + 1, 2) if estimator == "ipw" else 2
    for v in vcov_names:
        if v not in VCOV_NAMES:
            raise ConfigError(f"unknown covariance estimator {v!r}")
    cs = []
    for c in _expand_contrasts(contrasts):
        if isinstance(c, str) and c.startswith("beta:"):
            cs.append((c, {c[5:]: 1.0}))
        else:
            cs.append(c)
    for c in cs:
        contrast_vector(_spec(c), model.names)

    if truth is None:
        if model.names != saturated_model(2).names or model.link != "identity":
            beta_true = None
        elif scenario.kind == "ClosedLoopMain":
            beta_true = true_beta(scenario.alpha).beta_true
        else:
            # pooled estimand mixes the two groups by their share of subjects
            share = round(scenario.active_fraction * scenario.n) / scenario.n
            beta_true = share * feedback_true_beta(scenario.gamma, 1, scenario.gamma0).beta_true + (
                1 - share
            ) * feedback_true_beta(scenario.gamma, 0, scenario.gamma0).beta_true
    elif isinstance(truth, Mapping):
        beta_true = None
    else:
        beta_true = np.asarray(truth, dtype=float)
    tmap: dict[str, float] = {}
    for c in cs:
        if isinstance(truth, Mapping) and _label(c) in truth:
            tmap[_label(c)] = float(truth[_label(c)])
        elif beta_true is not None:
            tmap[_label(c)] = float(contrast_vector(_spec(c), model.names) @ beta_true)
        else:
            tmap[_label(c)] = math.nan

    jobs = [(scenario, model, estimator, r, tuple(vcov_names), cs, level, gamma, mr_options) for r in range(reps)]
    workers = max(1, int(workers))
    if workers == 1:
        results = [_one_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_replicate, jobs, chunksize=max(1, reps // (4 * workers))))
    frame = pd.DataFrame([row for res in results for row in res])
    frame = frame.sort_values(["rep"], kind="stable").reset_index(drop=True)
    for col in ("estimate", "se", "ci_low", "ci_high"):
        if col not in frame:
            frame[col] = np.nan
    return ReplicateReport(
        replicates=frame,
        summary=_summarize(frame, tmap, level),
        truth=tmap,
        scenario=scenario,
        meta={"estimator": estimator, "reps": reps, "workers": workers, "rng": "PCG64 via SeedSequence(seed, spawn_key=(rep,))"},
    )


def default_workers() -> int:
    """Worker cap from ``HRMSM_THREADS`` or the CPU count."""
    env = os.environ.get("HRMSM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HRMSM_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1
