import pytest

from regulib.closed_loop import simulate
from regulib.scenarios import canonical_harmonic


@pytest.fixture(scope="session")
def harmonic():
    return canonical_harmonic()


@pytest.fixture(scope="session")
def harmonic_run(harmonic):
    return simulate(harmonic)
