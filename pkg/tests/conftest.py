import numpy as np
import pytest

from ivrt.compliance import InstrumentJoint


def rand_pd(rng, L, scale=1.0):
    a = rng.normal(size=(L, L))
    return scale * (a @ a.T + 0.1 * L * np.eye(L))


def rand_simplex(rng, L):
    x = rng.exponential(size=L)
    return x / x.sum()


def common_factor_joint(rng, L, levels=3):
    """Instruments conditionally independent given a common ordered factor,
    with success probabilities nondecreasing in the factor."""
    pg = rng.dirichlet(np.ones(levels))
    q = np.sort(rng.uniform(0.05, 0.95, size=(levels, L)), axis=0)  # rows ordered in g
    probs = np.zeros(2 ** L)
    for idx in range(2 ** L):
        bits = (idx >> np.arange(L)) & 1
        lik = np.where(bits, q, 1.0 - q).prod(axis=1)
        probs[idx] = float(pg @ lik)
    return InstrumentJoint(probs)


def monotone_propensity(rng, L):
    """Coordinatewise-nondecreasing propensity map over {0,1}^L."""
    base = rng.uniform(0.05, 0.25)
    slopes = rng.uniform(0.05, 0.6 / L, size=L)
    idx = np.arange(2 ** L)
    bits = ((idx[:, None] >> np.arange(L)) & 1).astype(float)
    p = base + bits @ slopes
    return np.clip(p, 0.01, 0.99)


# The negatively dependent two-instrument example: Z1 Z2 = 0 almost surely.
NEG_DEP_JOINT = InstrumentJoint(np.array([1 / 3, 1 / 3, 1 / 3, 0.0]))
NEG_DEP_PROPENSITY = np.array([0.1, 0.5, 0.4, 0.8])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "CHECKLIST", None) if mod else None
    if lines:
        terminalreporter.section("acceptance checklist")
        for line in lines:
            terminalreporter.write_line(line)
