import math
import warnings

import numpy as np
import pytest

from nngls.covariance import CovarianceParams, cov_matrix

EXP_THETA = CovarianceParams(1.0, 3 / math.sqrt(2), 0.5, 0.01)


@pytest.fixture
def exp_theta():
    return EXP_THETA


def uniform_sites(n, seed=0, side=10.0):
    return np.random.default_rng(seed).uniform(0, side, size=(n, 2))


def gp_draw(S, theta, seed=0):
    L = np.linalg.cholesky(cov_matrix(S, S, theta))
    return L @ np.random.default_rng(seed).standard_normal(S.shape[0])


@pytest.fixture(autouse=True)
def _quiet_theta_warnings():
    from nngls.trainer import ThetaNotImprovedWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ThetaNotImprovedWarning)
        yield


# one line per acceptance criterion, filled by test_acceptance and shown after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
