import numpy as np
import pytest

from voxssc import networks, scene
from voxssc.geometry import VoxelGrid


@pytest.fixture(scope="session")
def samples2():
    """Two rendered rooms on the default 64x32x64 grid."""
    return scene.make_dataset(seed=3, count=2)


@pytest.fixture(scope="session")
def coarse_grid():
    # same world volume as the default grid, 4x coarser voxels
    return VoxelGrid(origin=(-1.92, -1.60, 0.30), voxel_size=0.24, dims=(16, 8, 16))


@pytest.fixture(scope="session")
def coarse_samples(coarse_grid):
    return scene.make_dataset(seed=5, count=2, grid=coarse_grid)


@pytest.fixture
def tiny_cfg():
    return networks.NetConfig(dims=(16, 8, 16), width_mult=0.25)
