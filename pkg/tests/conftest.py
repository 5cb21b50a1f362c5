import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mrpalloc import OutlierSpec, gen_calibration, gen_model  # noqa: E402

# Heterogeneous six-block model used by several qualitative checks: block 1
# is outlier-free, the others carry 5-25 % of weights scaled up 5x.
HETERO_FRACTIONS = (0.10, 0.0, 0.20, 0.05, 0.15, 0.25)
HETERO_SCALE = 5.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def hetero_model():
    return gen_model(0, 6, 64, OutlierSpec(HETERO_FRACTIONS, (HETERO_SCALE,) * 6))


@pytest.fixture(scope="session")
def calib64():
    return gen_calibration(1, 128, 64)


@pytest.fixture(scope="session")
def small_model():
    return gen_model(7, 3, 16, OutlierSpec((0.05, 0.0, 0.1), (8.0, 1.0, 8.0)))


@pytest.fixture(scope="session")
def small_calib():
    return gen_calibration(8, 32, 16)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k.split()[0][1:])):
        terminalreporter.write_line(RESULTS[key])
