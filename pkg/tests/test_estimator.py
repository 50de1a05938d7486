import itertools
import json

import numpy as np
import pytest
import scipy.linalg

from hrmsm import (
    Design,
    Feature,
    FitResult,
    HSpec,
    SimScenario,
    WorkingModel,
    availability_conditional_fit,
    build_design,
    dose_model,
    enumerate_regimes,
    estimating_function,
    expand_panel,
    fit_ipw,
    jacobian,
    saturated_model,
    simulate_panel,
    solve_beta,
    wald,
)
from hrmsm.errors import EmptyCell, NoConvergence, SingularSystem, UnknownVcov
from hrmsm.estimator import numeric_jacobian

from conftest import make_panel, random_panel

ALPHA = (0.25, 2.0, 1.75, 0.5)


def manual_design(X, y, w, cluster):
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    cluster = np.asarray(cluster)
    ids, codes = np.unique(cluster, return_inverse=True)
    return Design(X, np.asarray(y, float), np.asarray(w, float), codes, ids, np.zeros(len(y), int), [],
                  [f"x{j}" for j in range(X.shape[1])])


def test_phi_single_row():
    d = manual_design([[1.0]], [2.0], [1.0], [0])
    assert estimating_function(d, np.zeros(1))[0, 0] == 2.0


def test_zero_weight_rows_contribute_nothing():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    w = np.r_[np.ones(5), np.zeros(5)]
    full = estimating_function(manual_design(X, y, w, np.arange(10) // 2), np.ones(2))
    y2 = y.copy()
    y2[5:] += 1e6
    again = estimating_function(manual_design(X, y2, w, np.arange(10) // 2), np.ones(2))
    np.testing.assert_array_equal(full, again)


def _gamma1_fixture():
    rng = np.random.default_rng(11)
    A = rng.integers(0, 2, size=20)
    Y = rng.normal(size=20) + A
    rows = [(i // 4, i % 4 + 1, 1, int(A[i]), float(Y[i]), 0.5) for i in range(20)]
    return make_panel(rows), A, Y


def test_gamma1_static_design_matches_stratified_means():
    panel, A, Y = _gamma1_fixture()
    fit = fit_ipw(panel, saturated_model(1), 1)
    assert fit.names == ["(Intercept)", "J[t]"]
    np.testing.assert_allclose(fit.beta_hat, [Y[A == 0].mean(), Y[A == 1].mean() - Y[A == 0].mean()], rtol=1e-12)
    assert fit.converged and fit.residual_norm <= 1e-9


def test_empty_cell_names_regime():
    # treatment only at t = 2, so no window is treated twice
    rows = []
    for s in range(4):
        for t in range(1, 5):
            rows.append((s, t, 1, int(t == 2), float(t), 0.5))
    with pytest.raises(EmptyCell) as info:
        fit_ipw(make_panel(rows), saturated_model(2), 2)
    assert info.value.regime == "11"


def test_newton_matches_closed_form():
    panel = simulate_panel(SimScenario(n=200, T=20, seed=5))
    d = build_design(expand_panel(panel, enumerate_regimes(2)), saturated_model(2))
    closed = solve_beta(d, "identity")
    newton = solve_beta(d, "identity", method="newton")
    np.testing.assert_allclose(newton.beta_hat, closed.beta_hat, rtol=0, atol=1e-10)


@pytest.mark.parametrize("link", ["identity", "logit", "log"])
def test_bhat_matches_numeric_jacobian(link):
    rng = np.random.default_rng(21)
    panel = random_panel(rng, n=40, T=6)
    frame = panel.frame.copy()
    if link == "logit":
        frame["Y"] = (frame["Y"] > 0.5).astype(float)
    elif link == "log":
        frame["Y"] = np.exp(frame["Y"] / 2)
    from hrmsm import Panel

    model = saturated_model(2, link)
    fit = fit_ipw(Panel(frame), model, 2)
    d = build_design(expand_panel(Panel(frame), enumerate_regimes(2)), model)
    live = d.subset(d.w > 0)
    num = numeric_jacobian(live, fit.beta_hat, link, step=1e-5)
    np.testing.assert_allclose(fit.B_hat, num, rtol=1e-5, atol=1e-8 * np.abs(num).max())
    # analytic Jacobian also at a point away from the root
    b = fit.beta_hat + 0.1
    np.testing.assert_allclose(jacobian(live, b, link), numeric_jacobian(live, b, link, 1e-5), rtol=1e-5,
                               atol=1e-8 * np.abs(num).max())


def test_numeric_jacobian_newton_path():
    rng = np.random.default_rng(2)
    panel = random_panel(rng, n=60, T=5)
    frame = panel.frame.copy()
    frame["Y"] = (frame["Y"] > 0.5).astype(float)
    from hrmsm import Panel

    model = saturated_model(2, "logit")
    d = build_design(expand_panel(Panel(frame), enumerate_regimes(2)), model)
    a = solve_beta(d, model)
    b = solve_beta(d, model, numeric_jac=True)
    np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-8)


def test_no_convergence_carries_result():
    rng = np.random.default_rng(2)
    frame = random_panel(rng, n=60, T=5).frame.copy()
    frame["Y"] = (frame["Y"] > 0.5).astype(float)
    from hrmsm import Panel

    model = saturated_model(2, "logit")
    d = build_design(expand_panel(Panel(frame), enumerate_regimes(2)), model)
    with pytest.raises(NoConvergence) as info:
        solve_beta(d, model, max_iter=1)
    assert info.value.result.iterations == 1 and not info.value.result.converged


def explicit_cr(d, beta, power):
    """Per-subject (I - H_c)^(-power) adjusted scores, identity link."""
    live = d.w > 0
    X, y, w, c = d.X[live], d.y[live], d.w[live], d.cluster[live]
    Z = np.sqrt(w)[:, None] * X
    r = np.sqrt(w) * (y - X @ beta)
    G = Z.T @ Z
    Ginv = np.linalg.inv(G)
    meat = np.zeros_like(G)
    for k in np.unique(c):
        Zc, rc = Z[c == k], r[c == k]
        H = Zc @ Ginv @ Zc.T
        adj = np.linalg.inv(scipy.linalg.sqrtm(np.eye(len(rc)) - H).real) if power == 0.5 else np.linalg.inv(np.eye(len(rc)) - H)
        u = Zc.T @ adj @ rc
        meat += np.outer(u, u)
    return Ginv @ meat @ Ginv


def test_cluster_robust_variants_match_explicit_leverage():
    panel = simulate_panel(SimScenario(n=12, T=6, seed=9))
    model = saturated_model(2)
    fit = fit_ipw(panel, model, 2)
    d = build_design(expand_panel(panel, enumerate_regimes(2)), model)
    n, q = panel.n_subjects, 4
    np.testing.assert_allclose(fit.vcov["CR1"], fit.vcov["sandwich"] * n / (n - q), rtol=1e-14)
    np.testing.assert_allclose(fit.vcov["CR2"], explicit_cr(d, fit.beta_hat, 0.5), rtol=1e-8)
    np.testing.assert_allclose(fit.vcov["CR3"], explicit_cr(d, fit.beta_hat, 1.0), rtol=1e-8)
    # sandwich equals the unadjusted explicit formula
    live = d.w > 0
    Z = np.sqrt(d.w[live])[:, None] * d.X[live]
    r = np.sqrt(d.w[live]) * (d.y[live] - d.X[live] @ fit.beta_hat)
    Ginv = np.linalg.inv(Z.T @ Z)
    u = np.array([Z[d.cluster[live] == k].T @ r[d.cluster[live] == k] for k in range(n)])
    np.testing.assert_allclose(fit.vcov["sandwich"], Ginv @ u.T @ u @ Ginv, rtol=1e-10)


def test_vcov_symmetric_psd_and_ordered():
    fit = fit_ipw(simulate_panel(SimScenario(n=8, T=10, seed=1)), saturated_model(2), 2)
    for name, V in fit.vcov.items():
        assert np.abs(V - V.T).max() <= 1e-8 * np.abs(V).max(), name
        assert np.linalg.eigvalsh(V).min() >= -1e-12 * np.abs(V).max(), name
    diag = {k: np.diag(v) for k, v in fit.vcov.items()}
    assert np.all(diag["CR3"] >= diag["CR2"]) and np.all(diag["CR2"] >= diag["sandwich"])


def test_vcov_estimators_agree_at_large_n():
    fit = fit_ipw(simulate_panel(SimScenario(n=1000, T=20, seed=77)), saturated_model(2), 2)
    base = fit.vcov["sandwich"]
    for name in ("CR1", "CR2", "CR3"):
        assert np.linalg.norm(fit.vcov[name] - base) / np.linalg.norm(base) < 0.05


def test_single_cluster_is_singular():
    panel = simulate_panel(SimScenario(n=2, T=30, seed=2))
    one = make_panel(panel.frame[panel.frame["subject"] == 0][["subject", "t", "I", "A", "Y", "pi"]].values.tolist(),
                     epsilon=0.0)
    with pytest.raises(SingularSystem):
        fit_ipw(one, saturated_model(2), 2)


def test_collinear_features_report_null_direction():
    rng = np.random.default_rng(0)
    panel = random_panel(rng, n=10, T=4)
    model = WorkingModel((Feature("intercept"), Feature("dose")))
    with pytest.raises(SingularSystem) as info:
        fit_ipw(panel, model, 1, sequences=["1"])
    v = info.value.null_direction
    assert abs(abs(v[0]) - abs(v[1])) < 1e-10 and v[0] * v[1] < 0


def test_wald_contrasts():
    fit = fit_ipw(simulate_panel(SimScenario(n=50, T=20, seed=3)), saturated_model(2), 2)
    b, se = fit.beta_hat, fit.se("CR2")
    for j in range(4):
        c = wald(fit, np.eye(4)[j], vcov="CR2")
        assert c.estimate == b[j] and c.se == pytest.approx(se[j], rel=1e-12)
        assert c.ci[0] == pytest.approx(b[j] - 1.959963984540054 * se[j]) and c.ci[0] < c.estimate < c.ci[1]
    assert wald(fit, "dissipation").estimate == pytest.approx(b[2] - b[1], rel=1e-14)
    assert wald(fit, "blip").estimate == b[2]
    assert wald(fit, [0, 0.5, 0.5, 0]).estimate == pytest.approx(0.5 * (b[1] + b[2]), rel=1e-14)
    assert wald(fit, "dose_1").estimate == pytest.approx(b[0] + 0.5 * (b[1] + b[2]), rel=1e-14)
    c = wald(fit, {"J[t]": 1.0}, level=0.9)
    assert c.p_value == pytest.approx(2 * (1 - __import__("scipy").stats.norm.cdf(abs(c.z))))
    with pytest.raises(UnknownVcov):
        wald(fit, "blip", vcov="HC7")


def test_fit_result_document_roundtrip():
    fit = fit_ipw(simulate_panel(SimScenario(n=20, T=10, seed=4)), saturated_model(2), 2)
    again = FitResult.from_json(fit.to_json())
    np.testing.assert_array_equal(again.beta_hat, fit.beta_hat)
    for k in fit.vcov:
        np.testing.assert_array_equal(again.vcov[k], fit.vcov[k])
    assert json.loads(fit.to_json())["convergence"]["converged"] is True


def test_static_design_equivalence():
    rng = np.random.default_rng(5)
    panel = random_panel(rng, n=80, T=8, p_avail=1.0, pi_avail=0.3)
    # saturated model with h = 1: full expansion equals the observed-sequence GEE
    full = fit_ipw(panel, saturated_model(2), 2)
    obs = expand_panel(panel, enumerate_regimes(2), observed_only=True)
    d = build_design(obs, saturated_model(2))
    d.w = np.ones(len(d))
    gee = solve_beta(d, "identity")
    np.testing.assert_allclose(full.beta_hat, gee.beta_hat, atol=1e-10)
    # non-saturated model: the open-loop h cancels the product of design probabilities
    model = WorkingModel(dose_model(2).features, h=HSpec("open_loop", p=0.3))
    full = fit_ipw(panel, model, 2)
    d = build_design(expand_panel(panel, enumerate_regimes(2), observed_only=True), dose_model(2))
    d.w = np.ones(len(d))
    np.testing.assert_allclose(full.beta_hat, solve_beta(d, "identity").beta_hat, atol=1e-10)


def counterfactual_mean(alpha, t_end, bits):
    """E[Y_t(d)] by exhaustive enumeration of binary histories 0..t_end."""
    a1, a2, a3, a4 = alpha
    start = t_end - len(bits) + 1
    total = 0.0
    for path in itertools.product((0, 1), repeat=2 * (t_end + 1)):
        X, A = path[0::2], path[1::2]
        prob = 0.5  # X_0
        for s in range(t_end + 1):
            if s > 0:
                px = 0.4 + 0.4 * A[s - 1]
                prob *= px if X[s] else 1 - px
            if s >= start:
                prob *= 1.0 if A[s] == bits[s - start] * X[s] else 0.0
            else:
                pa = 0.5 * X[s]
                prob *= pa if A[s] else 1 - pa
            if prob == 0:
                break
        if prob:
            total += prob * (a1 * X[t_end - 1] + a2 * A[t_end - 1] + a3 * X[t_end] + a4 * A[t_end])
    return total


def test_projection_of_misspecified_model():
    T = 3
    model = WorkingModel((Feature("intercept"), Feature("dose")))
    rs = enumerate_regimes(2)
    rows, target = [], []
    for t in range(2, T + 1):
        for seq in rs:
            rows.append([1.0, seq.dose])
            target.append(counterfactual_mean(ALPHA, t, seq.bits))
    beta_star = np.linalg.lstsq(np.array(rows), np.array(target), rcond=None)[0]
    fit = fit_ipw(simulate_panel(SimScenario(n=40000, T=T, seed=8)), model, 2)
    z = (fit.beta_hat - beta_star) / fit.se()
    assert np.all(np.abs(z) < 3), (fit.beta_hat, beta_star)
    # the dose slope is not any single closed-form coefficient: the model is genuinely misspecified
    assert abs(beta_star[1] - 1.35) > 0.1 and abs(beta_star[1] - 0.2) > 0.1


def test_enumeration_oracle_matches_closed_form():
    b0, b1, b2, b3 = 0.825, 1.35, 0.2, 0.1
    for bits in itertools.product((0, 1), repeat=2):
        expect = b0 + b1 * bits[0] + b2 * bits[1] + b3 * bits[0] * bits[1]
        assert counterfactual_mean(ALPHA, 2, bits) == pytest.approx(expect, abs=1e-12)


def conditional_model():
    return WorkingModel((Feature("intercept"), Feature("position", lag=0)))


def test_conditional_fit_constant_weights_is_ols():
    rng = np.random.default_rng(4)
    panel = random_panel(rng, n=30, T=5, p_avail=0.6, pi_avail=0.5)
    fit = availability_conditional_fit(panel, conditional_model())
    f = panel.frame[panel.frame["I"] == 1]
    X = np.column_stack([np.ones(len(f)), f["A"]])
    ols = np.linalg.lstsq(X, f["Y"].to_numpy(), rcond=None)[0]
    np.testing.assert_allclose(fit.beta_hat, ols, atol=1e-12)
    assert fit.n_subjects == 30


def test_conditional_fit_no_available_rows():
    rng = np.random.default_rng(4)
    with pytest.raises(EmptyCell):
        availability_conditional_fit(random_panel(rng, p_avail=0.0), conditional_model())


def influence(fit, design):
    phi = estimating_function(design, fit.beta_hat, fit.link)
    return -phi @ np.linalg.inv(fit.B_hat).T


def test_conditional_effect_and_dilution():
    panel = simulate_panel(SimScenario(n=5000, T=10, seed=12))
    cond = availability_conditional_fit(panel, conditional_model())
    assert abs(cond.beta_hat[1] - ALPHA[3]) < 3 * cond.se()[1]
    marg = fit_ipw(panel, saturated_model(1), 1)
    # the single-step regime contrast is the conditional effect diluted by P[I = 1]
    # subject-level influence functions give the SE of the difference
    tab1 = expand_panel(panel, enumerate_regimes(1))
    d_m = build_design(tab1, saturated_model(1))
    keep = np.repeat(panel.frame["I"].to_numpy() == 1, 2)
    d_c = build_design(tab1, conditional_model()).subset(keep)
    I = panel.frame["I"].to_numpy().reshape(panel.n_subjects, -1)
    p_hat = I.mean()
    if_p = I.mean(1) - p_hat
    if_m = influence(marg, d_m)[:, 1]
    if_c = influence(cond, d_c)[:, 1]
    diff = marg.beta_hat[1] - cond.beta_hat[1] * p_hat
    if_diff = if_m - p_hat * if_c - cond.beta_hat[1] * if_p
    se = if_diff.std() / np.sqrt(panel.n_subjects)
    assert abs(diff) < 3 * se, (diff, se)
    assert abs(marg.beta_hat[1] - 0.25) < 3 * marg.se()[1]
