import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eftwrbm.model import FactorModel

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def random_model(rng, I, J, K, F, scale=1.0, unit_sigma=False):
    """Dense random model (not the small training initialization)."""
    def sig(n):
        return np.ones(n) if unit_sigma else rng.uniform(0.5, 2.0, n)

    return FactorModel(
        wx_factor=scale * rng.standard_normal((I, F)),
        wy_factor=scale * rng.standard_normal((J, F)),
        wh_factor=scale * rng.standard_normal((K, F)),
        bias_x=rng.standard_normal(I),
        bias_y=rng.standard_normal(J),
        bias_h=rng.standard_normal(K),
        sigma_x=sig(I),
        sigma_y=sig(J),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
