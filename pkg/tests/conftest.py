import numpy as np
import pytest

from lrscat.model import HamiltonianModel, reference_model
from lrscat.scatmap import ScatteringPhase


@pytest.fixture(scope="session")
def ref():
    return reference_model()


@pytest.fixture(scope="session")
def free():
    return HamiltonianModel(potential_family="zero", coupling=0.0, cutoff_radius=1.0)


@pytest.fixture(scope="session")
def ref_phase(ref):
    return ScatteringPhase(ref)


@pytest.fixture(scope="session")
def free_phase(free):
    return ScatteringPhase(free)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
