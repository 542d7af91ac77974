"""Shared fixtures.

The quartic-oscillator basis is the expensive object everything leans on,
so it is solved once per session at the accuracy the slow tests need.
"""

import numpy as np
import pytest

from qpkam.kam import TrigPerturbation
from qpkam.matrices import TorusFunction
from qpkam.potential import PotentialSpec
from qpkam.spectrum import Grid, solve_spectrum

GOLDEN = 0.5 * (1.0 + np.sqrt(5.0))


@pytest.fixture(scope="session")
def quartic_spec():
    return PotentialSpec(ell=2.0, c0=1.0, R0=0.5)


@pytest.fixture(scope="session")
def fine_grid():
    return Grid(L=9.0, n_pts=64001)


@pytest.fixture(scope="session")
def quartic_basis(quartic_spec, fine_grid):
    return solve_spectrum(quartic_spec, fine_grid, 60)


@pytest.fixture(scope="session")
def w_standard():
    """sin(nu x) cos(phi): the smallest odd-in-x trig perturbation."""
    cos_phi = TorusFunction(n_freq=1, K_phi=8, coeffs={(1,): 0.5, (-1,): 0.5})
    return TrigPerturbation(n_freq=1, K_phi=8, sins={1: cos_phi})


# One line per acceptance check, echoed after the run so the verdicts are
# visible without scraping individual test logs.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance summary")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
