import numpy as np
import pytest

from nfloc.channel import UserChannelParams
from nfloc.frontend import UplinkScenario, random_beamformer, sigma2_for_snr, synthesize_received
from nfloc.geometry import ArrayGeometry
from nfloc.partition import make_partition


@pytest.fixture
def small_geometry():
    return ArrayGeometry(15, 15, 0.025, 0.05)


@pytest.fixture
def small_spec(small_geometry):
    return make_partition(small_geometry, 3)


@pytest.fixture
def desk_geometry():
    return ArrayGeometry(21, 21, 0.025, 0.05)


@pytest.fixture
def desk_spec(desk_geometry):
    return make_partition(desk_geometry, 3)


def make_scenario(g, positions):
    users = tuple(UserChannelParams.with_default_gain(p, g.wavelength_m) for p in positions)
    return UplinkScenario(g, users)


@pytest.fixture
def two_user_data(small_geometry):
    """Scenario, beamformer, noise power and received vector at 10 dB."""
    sc = make_scenario(small_geometry, [[1.0, 2.0, 7.0], [-2.0, 1.0, 5.0]])
    W = random_beamformer(32, small_geometry.n_antennas, 1).weights
    s2 = sigma2_for_snr(sc, W, 10.0)
    y = synthesize_received(sc, W, s2, 3).y
    return sc, W, s2, y


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b)))


ACCEPTANCE_LINES = []


def report(name, passed, detail):
    """Record one acceptance verdict line and fail the calling test if it did not pass."""
    line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
