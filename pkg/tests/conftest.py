from pathlib import Path

import pytest

from gblobkit.metrics import sweep_from_csv

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def published_sweep():
    """Distance cut-off curve of the two published models; a = global, b = GBlobs."""
    return sweep_from_csv((FIXTURES / "distance_sweep.csv").read_text())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
