import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_problem(rng, n, p, K, active=None, noise=0.5, scale=1.0):
    """Random regression data following the hybrid model."""
    Phi = rng.normal(size=(n, p))
    Gamma = rng.normal(size=(n, K))
    theta = rng.normal(size=p)
    z = np.zeros(K)
    idx = np.arange(K) if active is None else np.asarray(active)
    z[idx] = scale * rng.normal(size=len(idx))
    y = Phi @ theta + Gamma @ z + noise * rng.normal(size=n)
    return Phi, Gamma, y, theta, z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance criteria report: one PASS/FAIL line per criterion in the summary

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``criterion(name, passed, detail)`` records an acceptance result and
    asserts it."""

    def record(name: str, passed: bool, detail: str = "") -> None:
        passed = bool(passed)
        _ACCEPTANCE[name] = (passed, detail)
        print(f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'} {detail}")
        assert passed, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
