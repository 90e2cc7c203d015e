import numpy as np
import pytest

from sscdesk.nn import ParamBuilder
from sscdesk.rng import make_rng


@pytest.fixture
def pb64():
    return ParamBuilder(make_rng(1234), dtype=np.float64)


def randomize(params, rng, scale=0.5, names=None):
    """Overwrite (some) parameters with random values, e.g. to move off zero init."""
    for k, t in params.items():
        if names is None or any(k.endswith(n) for n in names):
            t.data = rng.normal(scale=scale, size=t.shape).astype(t.dtype)
    return params


def small_camera(H=4, W=4, bins=6):
    from sscdesk.geometry import CameraModel

    return CameraModel.looking_along_x((-0.6, 0.0, 1.4), 12.0, (H, W), 70.0, bins, 0.5, 8.0)


def small_grid(dims=(4, 4, 2)):
    from sscdesk.geometry import VoxelGridSpec

    X, Y, Z = dims
    size = 6.4 / X
    return VoxelGridSpec((0.0, -Y * size / 2, 0.0), size, dims)
