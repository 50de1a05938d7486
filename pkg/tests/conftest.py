import numpy as np
import pandas as pd
import pytest

from hrmsm import Panel


def make_panel(rows, covariates=None, baseline=None, epsilon=0.01):
    """rows: iterable of (subject, t, I, A, Y, pi)."""
    frame = pd.DataFrame(list(rows), columns=["subject", "t", "I", "A", "Y", "pi"])
    for name, values in (covariates or {}).items():
        frame[name] = values
    return Panel(frame, baseline=baseline, epsilon=epsilon)


def random_panel(rng, n=20, T=6, p_avail=0.7, pi_avail=None, covariate=True, epsilon=0.01):
    """Panel with random availability and treatment drawn from the stated propensity."""
    I = (rng.random((n, T)) < p_avail).astype(int)
    if pi_avail is None:
        pi_avail = rng.uniform(0.2, 0.8, size=(n, T))
    pi = np.where(I == 1, pi_avail, 0.0)
    A = (rng.random((n, T)) < pi).astype(int)
    Y = rng.normal(size=(n, T)) + A
    frame = pd.DataFrame(
        {
            "subject": np.repeat(np.arange(n), T),
            "t": np.tile(np.arange(1, T + 1), n),
            "I": I.ravel(),
            "A": A.ravel(),
            "Y": Y.ravel(),
            "pi": np.broadcast_to(pi, (n, T)).ravel(),
        }
    )
    if covariate:
        frame["V"] = rng.normal(size=n * T)
    return Panel(frame, epsilon=epsilon)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
