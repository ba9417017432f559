"""Shared pytest fixtures. Lives at the repo root so the flat modules import from tests/."""
import pytest

from cellfree import Scenario, case1_scenario, case2_scenario
from numkernel import RngStream


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-sized simulation (still runs by default)")


@pytest.fixture
def rng():
    return RngStream(seed=20240611)


@pytest.fixture
def case1():
    return case1_scenario(noise_power=1.0)


@pytest.fixture
def case2():
    return case2_scenario(noise_power=1.0)


@pytest.fixture
def small_multicast():
    """2 stations x 2 antennas, 4 users in 2 groups: small enough for finite differences."""
    return Scenario(num_stations=2, antennas_per_station=2, num_users=4, group_assignment=[0, 1, 0, 1],
                    noise_power=0.5, power_budget_per_station=1.0)
