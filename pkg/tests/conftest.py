import math

import numpy as np
import pytest

from raresim.expfam import BetaBlock, Family, GaussianBlock, ParamPoint
from raresim.scenario import load_default


def beta_family(lo=0.0, hi=1.0, bounds=(1.5, 7.0)):
    return Family([BetaBlock(np.array([lo]), np.array([hi]), bounds, name="u")])


def beta_theta(a, b):
    return ParamPoint((np.array([[a], [b]], dtype=float),))


def gauss_family(d=1, box=math.inf, sigma=None):
    sigma = np.eye(d) if sigma is None else np.asarray(sigma, float)
    return Family([GaussianBlock.from_covariance(np.zeros(d), sigma, box=box)])


def gauss_theta(mu):
    return ParamPoint((np.atleast_1d(np.asarray(mu, dtype=float)),))


@pytest.fixture(scope="session")
def default_spec():
    return load_default()


# Verdict lines from test_acceptance.py, repeated at the end of the run.
ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
