import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hamlearn.dataset import generate_dataset
from hamlearn.lattice import CouplingMatrix

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_couplings(n, rng, lo=0.1, hi=10.0):
    j = np.triu(rng.uniform(lo, hi, (n, n)), 1)
    return CouplingMatrix.from_array(j + j.T)


@pytest.fixture(scope="session")
def small_case3():
    """A handful of exact case-3 graphs on small lattices."""
    return generate_dataset([(2, 2), (2, 3), (3, 3)], 4, case=3, master_seed=5)


@pytest.fixture(scope="session")
def small_case6():
    return generate_dataset([(2, 2), (2, 3)], 3, case=6, master_seed=6)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Recorder for one pass/fail line per acceptance criterion."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  ({detail})"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE, key=str):
            terminalreporter.write_line(_ACCEPTANCE[number])
