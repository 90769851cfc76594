import math
import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

from sparsefdk.core import Geometry  # noqa: E402


@pytest.fixture
def tiny_geom():
    """8^3 volume, 8 views, 8x8 detector: the instance for exact adjoint and gradient checks."""
    return Geometry(8, 2 * math.pi, 20.0, 40.0, (8, 8), (2.0, 2.0), (8, 8, 8), (1.0, 1.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture
def record_criterion():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(line: str) -> None:
        print(line)
        _CRITERIA.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
