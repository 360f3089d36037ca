import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT))

from canvas import BrushConfig, blank_canvas  # noqa: E402
from policy_net import NetworkSpec, init_params  # noqa: E402


@pytest.fixture
def brush_config():
    """Desk geometry: 36x36 window, reach 10px, widest dab 3px."""
    return BrushConfig(window_h=36, window_w=36, l_max=10.0, w_max=3.0)


@pytest.fixture
def blank():
    return blank_canvas(32, 32, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_spec():
    return NetworkSpec.for_preset("desk", 2, 36, 36)


@pytest.fixture
def desk_params(desk_spec):
    return init_params(desk_spec, np.random.default_rng(7))


def disk_reference(size=32, center=(16.0, 16.0), radius=6.0):
    rows, cols = np.mgrid[0:size, 0:size]
    inside = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2
    reference = np.ones((size, size, 1))
    reference[inside] = 0.0
    return reference
