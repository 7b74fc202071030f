"""Camera model, depth back-projection and world/voxel coordinate mapping.

World frame convention: x right, y down, z forward (a camera with identity
pose looks along +z with image v increasing toward +y). Volumes are indexed
(D, H, W) = (z, y, x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# per-voxel visibility codes
VISIBLE_FREE = 0
VISIBLE_SURFACE = 1
OCCLUDED = 2
OUTSIDE_FRUSTUM = 3

VISIBILITY_NAMES = ("VisibleFree", "VisibleSurface", "Occluded", "OutsideFrustum")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")


@dataclass
class DepthMap:
    """Per-pixel depth in meters along the optical axis; invalid = no reading."""

    depth: np.ndarray  # (height, width) float
    valid: np.ndarray  # (height, width) bool
    max_range: float = 10.0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise GeometryError("depth and validity shapes differ")
        bad = self.valid & ((self.depth <= 0) | (self.depth >= self.max_range))
        if bad.any():
            raise GeometryError(
                f"{int(bad.sum())} valid pixels violate 0 < depth < max_range"
            )

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3) or t.shape != (3,):
            raise GeometryError("pose needs a 3x3 rotation and 3-vector translation")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise GeometryError("rotation not orthonormal within 1e-6")

    def apply(self, pts):
        return pts @ self.rotation.T + self.translation

    def inverse_apply(self, pts):
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class VoxelGrid:
    """World-anchored regular lattice; origin is the corner of voxel (0,0,0)."""

    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]  # (D, H, W) counts along (z, y, x)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise GeometryError("voxel_size must be positive")
        if min(self.dims) < 1:
            raise GeometryError("grid dims must be >= 1")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))

    def voxel_centers(self):
        """World coordinates of every voxel center, shape (D, H, W, 3)."""
        D, H, W = self.dims
        iz, iy, ix = np.meshgrid(
            np.arange(D), np.arange(H), np.arange(W), indexing="ij"
        )
        ox, oy, oz = self.origin
        vs = self.voxel_size
        return np.stack(
            [ox + (ix + 0.5) * vs, oy + (iy + 0.5) * vs, oz + (iz + 0.5) * vs],
            axis=-1,
        )


def backproject(depth: DepthMap, intr: CameraIntrinsics, pose: Pose):
    """Lift valid depth pixels to world-frame 3D points.

    Returns (points (N,3), pixel_index (N,) linear v*width+u), invalid
    pixels filtered out.
    """
    v, u = np.nonzero(depth.valid)
    z = depth.depth[v, u]
    pts_cam = np.stack(
        [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=-1
    )
    return pose.apply(pts_cam), v * depth.width + u


def project(points_world, intr: CameraIntrinsics, pose: Pose):
    """Pinhole forward projection. Returns (u, v, z_cam) arrays."""
    pts = pose.inverse_apply(np.asarray(points_world, dtype=np.float64))
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pts[..., 0] / z + intr.cx
        v = intr.fy * pts[..., 1] / z + intr.cy
    return u, v, z


def world_to_voxel(p, grid: VoxelGrid):
    """Floor-convention voxel index (iz, iy, ix), or None when outside the grid."""
    p = np.asarray(p, dtype=np.float64)
    rel = (p - np.array(grid.origin)) / grid.voxel_size
    ix, iy, iz = (int(np.floor(c)) for c in rel)
    D, H, W = grid.dims
    if not (0 <= iz < D and 0 <= iy < H and 0 <= ix < W):
        return None
    return (iz, iy, ix)


def voxel_to_world(idx, grid: VoxelGrid):
    """World coordinates of the voxel center."""
    iz, iy, ix = idx
    ox, oy, oz = grid.origin
    vs = grid.voxel_size
    return np.array([ox + (ix + 0.5) * vs, oy + (iy + 0.5) * vs, oz + (iz + 0.5) * vs])


def classify_visibility(depth: DepthMap, intr: CameraIntrinsics, pose: Pose,
                        grid: VoxelGrid, surface_band: float | None = None):
    """Partition grid voxels into the four visibility classes.

    Each voxel center is projected into the image and its camera-space depth
    compared with the measurement at that pixel: in front -> VisibleFree,
    within the surface band (default +-1 voxel) -> VisibleSurface, behind ->
    Occluded. Centers that fall outside the image, behind the camera, or on
    invalid pixels -> OutsideFrustum. Returns a uint8 (D,H,W) volume.
    """
    if surface_band is None:
        surface_band = grid.voxel_size
    centers = grid.voxel_centers().reshape(-1, 3)
    u, v, z = project(centers, intr, pose)
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    inside = (
        (z > 0)
        & (ui >= 0) & (ui < intr.width)
        & (vi >= 0) & (vi < intr.height)
    )
    out = np.full(centers.shape[0], OUTSIDE_FRUSTUM, dtype=np.uint8)
    ui_c = np.clip(ui, 0, intr.width - 1)
    vi_c = np.clip(vi, 0, intr.height - 1)
    measured_valid = depth.valid[vi_c, ui_c] & inside
    measured = depth.depth[vi_c, ui_c]
    diff = z - measured
    out[measured_valid & (diff < -surface_band)] = VISIBLE_FREE
    out[measured_valid & (np.abs(diff) <= surface_band)] = VISIBLE_SURFACE
    out[measured_valid & (diff > surface_band)] = OCCLUDED
    return out.reshape(grid.dims)
