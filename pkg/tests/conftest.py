import numpy as np
import pytest

from flmarket.market import MapTypeProfile, MuProfile, PricingParams


def random_profiles(rng, n, d_range=(500.0, 2000.0)):
    out = []
    for j in range(n):
        d = float(rng.uniform(*d_range))
        out.append(MuProfile(id=j, d_total=d, d_local_cap=d * float(rng.uniform(0.1, 0.6)),
                             eps_priv=float(rng.uniform(0.1, 1.0))))
    return out


def default_profiles():
    """The ten-user roster used by the default-scale checks."""
    rng = np.random.default_rng(0)
    out = []
    for n in range(10):
        d = float(rng.uniform(2e4, 6e4))
        out.append(MuProfile(id=n, d_total=d, d_local_cap=d * rng.uniform(0.2, 0.5),
                             eps_priv=float(rng.uniform(0.1, 1))))
    return out


@pytest.fixture
def pricing():
    return PricingParams()


@pytest.fixture
def types10():
    return MapTypeProfile.uniform(range(1, 11), 5e5)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
