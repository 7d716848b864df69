import numpy as np
import pytest

from traqpoint.geometry import Intrinsics, Pose
from traqpoint.scenegen import PlanarScene, procedural_texture, render_view


def camera_at(center, rotation=None):
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    return Pose(r, -r @ np.asarray(center, dtype=np.float64))


@pytest.fixture(scope="session")
def texture():
    return procedural_texture(0, 256)


@pytest.fixture(scope="session")
def plane(texture):
    # plane z = 4, texture spans about 7.7 units
    return PlanarScene(texture, distance=4.0, texture_scale=0.03)


@pytest.fixture(scope="session")
def intr64():
    return Intrinsics(64.0, 64.0, 31.5, 31.5)


@pytest.fixture(scope="session")
def render(plane, intr64):
    def _render(center=(0.0, 0.0, 0.0), rotation=None, scene=None, size=(64, 64), intrinsics=None):
        return render_view(scene if scene is not None else plane, intrinsics or intr64,
                           camera_at(center, rotation), size)
    return _render


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
