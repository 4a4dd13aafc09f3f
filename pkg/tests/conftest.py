import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splatlift.datagen import gen_scene  # noqa: E402
from splatlift.render import GaussianScene  # noqa: E402


@pytest.fixture(scope="session")
def occluder_scene():
    return gen_scene("wall+occluder", 3)


@pytest.fixture
def empty_scene():
    return GaussianScene(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 1, 3)))


@pytest.fixture
def gaussian_wall():
    """A dense grid of opaque Gaussians on the plane Z = 4."""
    xs = np.linspace(-3, 3, 31)
    means = np.array([[x, y, 4.0] for x in xs for y in xs])
    n = len(means)
    return GaussianScene(means, np.full(n, 0.95), np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.15),
                         np.full((n, 1, 3), 0.5))


def pytest_terminal_summary(terminalreporter):
    from tests_support import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
