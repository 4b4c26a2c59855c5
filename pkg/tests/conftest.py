import numpy as np
import pytest
from hypothesis import settings

from qscar.domain import Grid, Wavefunction, normalize

settings.register_profile("qscar", deadline=None, max_examples=40)
settings.load_profile("qscar")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return Grid.square(32, 6.0)


def random_state(grid, rng):
    a = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    return normalize(Wavefunction(grid, a))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
