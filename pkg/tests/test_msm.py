import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hrmsm import (
    Feature,
    HSpec,
    WorkingModel,
    build_design,
    dose_model,
    enumerate_regimes,
    expand_panel,
    mean_and_gradient,
    saturated_model,
)
from hrmsm.errors import InvalidModel, UnknownModifier
from hrmsm.msm import ClampWarning, LINKS

from conftest import random_panel


def table_for(gamma, rng=None, **kw):
    rng = rng or np.random.default_rng(0)
    return expand_panel(random_panel(rng, n=3, T=gamma + 2), enumerate_regimes(gamma, **kw))


def test_saturated_row_for_always_treat():
    tab = table_for(2)
    d = build_design(tab, saturated_model(2))
    assert d.names == ["(Intercept)", "J[t-1]", "J[t]", "J[t-1]:J[t]"]
    rows = d.X[tab.frame["regime"].astype(str) == "11"]
    np.testing.assert_array_equal(rows, np.ones_like(rows))
    rows = d.X[tab.frame["regime"].astype(str) == "10"]
    np.testing.assert_array_equal(rows[0], [1, 1, 0, 0])


def test_dose_model_row():
    tab = table_for(5)
    model = dose_model(5, max_dose=3)
    d = build_design(tab, model)
    assert d.names == ["(Intercept)", "dose==1", "dose==2", "dose==3"]
    dose2 = (tab.frame["dose"] == 2).to_numpy()
    np.testing.assert_array_equal(d.X[dose2][0], [1, 0, 1, 0])


def test_intercept_only():
    tab = table_for(2)
    d = build_design(tab, WorkingModel((Feature("intercept"),)))
    assert d.X.shape == (len(tab), 1) and np.all(d.X == 1)


def test_saturated_full_rank():
    for gamma in (1, 2, 3):
        tab = table_for(gamma)
        d = build_design(tab, saturated_model(gamma))
        assert d.X.shape[1] == 2**gamma
        assert np.linalg.matrix_rank(d.X) == 2**gamma


def test_design_weights_combine_h():
    tab = table_for(2)
    model = WorkingModel(saturated_model(2).features, h=HSpec("open_loop", p=0.25))
    d = build_design(tab, model)
    J = tab.frame[["J1", "J2"]].to_numpy()
    h = np.prod(np.where(J == 1, 0.25, 0.75), axis=1)
    np.testing.assert_allclose(d.w, h * tab.frame["weight"], rtol=1e-15)
    assert np.all(d.w >= 0)


def test_h_table_lookup():
    tab = table_for(2)
    h = HSpec("table", table=[("*", "11", 2.0), ("3", "00", 0.5)], default=1.0)
    vals = h.evaluate(tab)
    reg = tab.frame["regime"].astype(str).to_numpy()
    t = tab.frame["t"].to_numpy()
    expected = np.where(reg == "11", 2.0, np.where((reg == "00") & (t == 3), 0.5, 1.0))
    np.testing.assert_array_equal(vals, expected)
    with pytest.raises(InvalidModel):
        HSpec("table", table=[("*", "11", -1.0)])


def test_modifier_and_time_features(rng):
    p = random_panel(rng, n=3, T=5)
    tab = expand_panel(p, enumerate_regimes(2), ["V"])
    m = saturated_model(2, modifiers=["V"])
    assert m.names[4:] == ["V", "J[t-1]:V", "J[t]:V", "J[t-1]:J[t]:V"]
    d = build_design(tab, m)
    np.testing.assert_array_equal(d.X[:, 4], tab.frame["V"])
    np.testing.assert_array_equal(d.X[:, 6], tab.frame["J2"] * tab.frame["V"])
    tm = WorkingModel((Feature("intercept"), Feature("time"), Feature("dose")))
    d = build_design(tab, tm)
    np.testing.assert_array_equal(d.X[:, 1], tab.frame["t"])
    np.testing.assert_array_equal(d.X[:, 2], tab.frame["dose"])
    with pytest.raises(UnknownModifier):
        build_design(expand_panel(p, enumerate_regimes(2)), m)


def test_model_validation():
    with pytest.raises(InvalidModel):
        WorkingModel(())
    with pytest.raises(InvalidModel):
        WorkingModel((Feature("intercept"), Feature("intercept")))
    with pytest.raises(InvalidModel):
        WorkingModel((Feature("interaction", operands=("J[t]", "J[t-1]")), Feature("position", lag=0)))
    with pytest.raises(InvalidModel):
        WorkingModel((Feature("intercept"),), link="probit")
    with pytest.raises(InvalidModel):
        Feature("position")


def test_model_document_roundtrip():
    m = WorkingModel(saturated_model(2, "logit", ["V"]).features, "logit", HSpec("open_loop", p=0.5))
    assert WorkingModel.from_json(m.to_json()) == m
    doc = {"link": "identity", "features": [{"type": "intercept"}, {"type": "position", "lag": 0}]}
    assert WorkingModel.from_dict(json.loads(json.dumps(doc))).names == ["(Intercept)", "J[t]"]


def test_mean_and_gradient_examples():
    m, M = mean_and_gradient("identity", np.array([1.0, 1.0]), np.array([0.5, 0.25]))
    assert m == 0.75 and list(M) == [1, 1]
    x = np.array([1.0, -2.0])
    m, M = mean_and_gradient("logit", x, np.zeros(2))
    assert m == 0.5 and np.allclose(M, 0.25 * x)
    m, M = mean_and_gradient("log", x, np.zeros(2))
    assert m == 1 and np.allclose(M, x)


@pytest.mark.parametrize("link", LINKS)
def test_gradient_matches_finite_differences(link):
    rng = np.random.default_rng(7)
    for _ in range(100):
        q = rng.integers(1, 5)
        x = rng.normal(size=q)
        beta = rng.normal(size=q) * 0.5
        _, M = mean_and_gradient(link, x, beta)
        fd = np.empty(q)
        for k in range(q):
            h = 1e-6 * max(1.0, abs(beta[k]))
            up, dn = beta.copy(), beta.copy()
            up[k] += h
            dn[k] -= h
            fd[k] = (mean_and_gradient(link, x, up)[0] - mean_and_gradient(link, x, dn)[0]) / (2 * h)
        np.testing.assert_allclose(M, fd, rtol=1e-6, atol=1e-9)


def test_clamp_warns():
    with pytest.warns(ClampWarning):
        m, M = mean_and_gradient("log", np.array([1.0]), np.array([100.0]))
    assert np.isfinite(m) and m == pytest.approx(np.exp(30))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mean_and_gradient("logit", np.array([1.0]), np.array([29.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 4))
def test_design_is_pure_function_of_descriptors(gamma, seed):
    tab = table_for(gamma, np.random.default_rng(seed))
    d = build_design(tab, saturated_model(gamma))
    key = tab.frame[tab.position_columns].astype(str).agg("".join, axis=1)
    for _, idx in key.groupby(key).groups.items():
        rows = d.X[np.asarray(idx)]
        assert np.all(rows == rows[0])
