import numpy as np
import pytest

from mpvad.models import load_segment_arrays
from mpvad.simulator import SimConfig, generate_corpus

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """20 matched-condition segments shared by the module tests."""
    return generate_corpus(SimConfig(), 20, tmp_path_factory.mktemp("corpus"), seed=101)


@pytest.fixture(scope="session")
def small_arrays(small_corpus):
    return load_segment_arrays(small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
