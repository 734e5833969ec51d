import numpy as np
import pytest

from ppcreg.contour import canny3d
from ppcreg.geometry import carm_geometry
from ppcreg.volume import make_phantom, vertebra_stack_spec


@pytest.fixture(scope="session")
def vertebra():
    return make_phantom(vertebra_stack_spec())


@pytest.fixture(scope="session")
def vertebra_contours(vertebra):
    return canny3d(vertebra)


@pytest.fixture(scope="session")
def geom():
    return carm_geometry()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
