import numpy as np
import pytest
from hypothesis import settings

from boidp.domain import DiscObstacle, GoalRegion, RectObstacle, WorldMap

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def empty_world():
    return WorldMap([-50.0, -50.0], [50.0, 50.0], GoalRegion((40.0, 40.0), 3.0))


@pytest.fixture
def box_world():
    """A 20x20 box with one wall in the middle and a disc."""
    return WorldMap(
        [0.0, 0.0], [20.0, 20.0], GoalRegion((17.0, 17.0), 2.0),
        obstacles=(RectObstacle((9.0, 0.0), (11.0, 12.0)), DiscObstacle((5.0, 15.0), 1.5)),
        start=[3.0, 3.0],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, collected by tests/test_acceptance.py.
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
