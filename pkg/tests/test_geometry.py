"""Camera model, projection round trips and voxel visibility classification."""

import numpy as np
import pytest

from voxssc import geometry, reference
from voxssc.geometry import (
    OCCLUDED,
    OUTSIDE_FRUSTUM,
    VISIBLE_FREE,
    VISIBLE_SURFACE,
    CameraIntrinsics,
    DepthMap,
    GeometryError,
    Pose,
    VoxelGrid,
)

INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=40.0, width=100, height=80)


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(GeometryError):
        CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


def test_depthmap_rejects_invalid_valid_pixels():
    depth = np.zeros((4, 4))
    valid = np.ones((4, 4), dtype=bool)
    with pytest.raises(GeometryError, match="valid pixels"):
        DepthMap(depth=depth, valid=valid)


def test_pose_rejects_nonorthonormal():
    with pytest.raises(GeometryError, match="orthonormal"):
        Pose(rotation=np.eye(3) * 2.0)


def test_pose_inverse_apply_roundtrip():
    rng = np.random.default_rng(1)
    theta = 0.3
    R = np.array([[np.cos(theta), 0, np.sin(theta)],
                  [0, 1, 0],
                  [-np.sin(theta), 0, np.cos(theta)]])
    pose = Pose(rotation=R, translation=np.array([0.1, -0.5, 2.0]))
    pts = rng.standard_normal((10, 3))
    np.testing.assert_allclose(pose.inverse_apply(pose.apply(pts)), pts, atol=1e-12)


def test_backproject_principal_ray():
    """The pixel under the principal point lifts straight down the optical axis."""
    depth = np.zeros((INTR.height, INTR.width))
    valid = np.zeros_like(depth, dtype=bool)
    depth[40, 50] = 1.5
    valid[40, 50] = True
    pts, pix = geometry.backproject(DepthMap(depth=depth, valid=valid), INTR, Pose())
    assert pts.shape == (1, 3)
    np.testing.assert_allclose(pts[0], [0.0, 0.0, 1.5], atol=1e-12)
    assert pix[0] == 40 * INTR.width + 50


def test_backproject_off_axis_pixel():
    # pixel a quarter focal length right of the principal point: x = z/4
    depth = np.zeros((INTR.height, INTR.width))
    valid = np.zeros_like(depth, dtype=bool)
    u = int(INTR.cx + INTR.fx / 4)
    depth[40, u] = 2.0
    valid[40, u] = True
    pts, _ = geometry.backproject(DepthMap(depth=depth, valid=valid), INTR, Pose())
    np.testing.assert_allclose(pts[0], [0.5, 0.0, 2.0], atol=1e-12)


def test_project_backproject_consistency():
    rng = np.random.default_rng(7)
    depth = rng.uniform(0.5, 5.0, (INTR.height, INTR.width))
    dm = DepthMap(depth=depth, valid=np.ones_like(depth, dtype=bool))
    theta = np.deg2rad(10)
    R = np.array([[1, 0, 0],
                  [0, np.cos(theta), -np.sin(theta)],
                  [0, np.sin(theta), np.cos(theta)]])
    pose = Pose(rotation=R, translation=np.array([0.2, -1.0, 0.1]))
    pts, pix = geometry.backproject(dm, INTR, pose)
    u, v, z = geometry.project(pts, INTR, pose)
    np.testing.assert_allclose(u, pix % INTR.width, atol=1e-9)
    np.testing.assert_allclose(v, pix // INTR.width, atol=1e-9)
    np.testing.assert_allclose(z, depth.reshape(-1), atol=1e-9)


def test_world_to_voxel_floor_convention():
    grid = VoxelGrid(origin=(0.0, 0.0, 0.0), voxel_size=0.5, dims=(4, 4, 4))
    assert geometry.world_to_voxel((0.0, 0.0, 0.0), grid) == (0, 0, 0)
    # exactly on a voxel boundary belongs to the higher cell
    assert geometry.world_to_voxel((0.5, 0.0, 0.0), grid) == (0, 0, 1)
    assert geometry.world_to_voxel((0.49, 0.99, 1.5), grid) == (3, 1, 0)
    assert geometry.world_to_voxel((-0.01, 0.0, 0.0), grid) is None
    assert geometry.world_to_voxel((2.0, 0.0, 0.0), grid) is None


def test_voxel_to_world_center():
    grid = VoxelGrid(origin=(1.0, 2.0, 3.0), voxel_size=0.1, dims=(4, 4, 4))
    np.testing.assert_allclose(geometry.voxel_to_world((0, 0, 0), grid),
                               [1.05, 2.05, 3.05])
    # and back again
    assert geometry.world_to_voxel(geometry.voxel_to_world((2, 1, 3), grid),
                                   grid) == (2, 1, 3)


def test_voxel_centers_layout():
    grid = VoxelGrid(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=(2, 3, 4))
    c = grid.voxel_centers()
    assert c.shape == (2, 3, 4, 3)
    np.testing.assert_allclose(c[0, 0, 0], [0.5, 0.5, 0.5])
    np.testing.assert_allclose(c[1, 2, 3], [3.5, 2.5, 1.5])  # (x, y, z) order


# ---------------------------------------------------------------------------
# visibility


def _flat_wall_depthmap(z=2.0):
    depth = np.full((INTR.height, INTR.width), z)
    return DepthMap(depth=depth, valid=np.ones_like(depth, dtype=bool))


def test_classify_visibility_flat_wall():
    grid = VoxelGrid(origin=(-0.5, -0.4, 0.5), voxel_size=0.1, dims=(30, 8, 10))
    vis = geometry.classify_visibility(_flat_wall_depthmap(2.0), INTR, Pose(), grid)
    # depth axis: z < 2 - band free, |z - 2| <= band surface, z > 2 + band occluded
    centers_z = 0.5 + (np.arange(30) + 0.5) * 0.1
    for iz, z in enumerate(centers_z):
        col = vis[iz, 4, 5]
        if z < 2.0 - 0.1:
            assert col == VISIBLE_FREE
        elif z > 2.0 + 0.1:
            assert col == OCCLUDED
        else:
            assert col == VISIBLE_SURFACE


def test_classify_visibility_matches_naive(coarse_grid):
    rng = np.random.default_rng(9)
    from voxssc import scene
    room = scene.random_room(rng)
    depth, _ = scene.render_view(room, scene.default_intrinsics(),
                                 scene.default_pose())
    got = geometry.classify_visibility(depth, scene.default_intrinsics(),
                                       scene.default_pose(), coarse_grid)
    want = reference.classify_visibility_naive(depth, scene.default_intrinsics(),
                                               scene.default_pose(), coarse_grid)
    np.testing.assert_array_equal(got, want)


def test_voxels_behind_camera_outside_frustum():
    grid = VoxelGrid(origin=(-0.5, -0.5, -2.0), voxel_size=0.5, dims=(2, 2, 2))
    vis = geometry.classify_visibility(_flat_wall_depthmap(), INTR, Pose(), grid)
    assert np.all(vis == OUTSIDE_FRUSTUM)


def test_invalid_pixels_outside_frustum():
    depth = np.zeros((INTR.height, INTR.width))
    dm = DepthMap(depth=depth, valid=np.zeros_like(depth, dtype=bool))
    grid = VoxelGrid(origin=(-0.2, -0.2, 1.0), voxel_size=0.1, dims=(4, 4, 4))
    vis = geometry.classify_visibility(dm, INTR, Pose(), grid)
    assert np.all(vis == OUTSIDE_FRUSTUM)
