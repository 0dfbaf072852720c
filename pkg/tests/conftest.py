import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from persfall.dataset import SynthSpec, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_ds():
    """Three subjects, enough records for 3-fold protocols."""
    return generate_synthetic(SynthSpec(subjects=3, adl_per_subject=12, falls_per_subject=4, seed=3))


@pytest.fixture(scope="session")
def full_ds():
    """Desk-scale 9 x (200 + 24) dataset; generation takes a few seconds."""
    return generate_synthetic(SynthSpec(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
