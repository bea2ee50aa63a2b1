import numpy as np
import pytest

from cohort_sbi.model import ParameterVector
from cohort_sbi.priors import build_prior

REF_THETA = ParameterVector(
    mu_s=18.0, sigma_s=3.0, delta_r=4.0, sigma_r=3.0, mu_d=2.5, sigma_d=1.5,
    mu_b=30.0, sigma_b=12.0, kappa=0.1, beta1=0.5, beta2=0.3,
)


@pytest.fixture
def theta():
    return REF_THETA


@pytest.fixture(scope="session")
def prior1():
    return build_prior(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# criterion number -> one summary line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
