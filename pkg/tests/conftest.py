import numpy as np
import pytest

from confsplat.geometry import CameraModel, GaussianSet
from confsplat.synth import random_quaternions


def random_scene(rng, n=5, size=16, spread=0.4):
    """A few random Gaussians in front of a look-at camera."""
    gs = GaussianSet.from_arrays(
        centers=rng.uniform(-spread, spread, (n, 3)),
        scales=np.exp(rng.uniform(np.log(0.08), np.log(0.3), (n, 3))),
        quats=random_quaternions(rng, n),
        opacities=rng.uniform(0.2, 0.9, n),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    )
    cam = CameraModel.look_at(np.array([0.3, -2.5, 0.6]), np.zeros(3), 1.2 * size, size, size)
    return gs, cam


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
