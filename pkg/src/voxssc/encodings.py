"""Network input volumes: the fTSDF geometry channel and the RGB surface volume.

The fTSDF ("flipped" TSDF) peaks at the surface and decays linearly to zero
at the truncation distance; its sign marks visible (+) vs occluded (-)
space, with out-of-frustum voxels treated as occluded. The colour volume
holds normalised [0,1] RGB on visible-surface voxels and -1 elsewhere.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from . import geometry
from .geometry import (
    OCCLUDED,
    OUTSIDE_FRUSTUM,
    VISIBLE_SURFACE,
    CameraIntrinsics,
    DepthMap,
    Pose,
    VoxelGrid,
)
from .ops import ShapeError

log = logging.getLogger(__name__)

# brute force above this voxel count would be quadratic in grid size;
# the distance-transform path matches it exactly (verified in tests)
_BRUTE_FORCE_LIMIT = 32 ** 3


def surface_distances_brute(surface_mask: np.ndarray) -> np.ndarray:
    """All-pairs Euclidean distance (voxel units) to the nearest surface voxel."""
    D, H, W = surface_mask.shape
    coords = np.argwhere(surface_mask).astype(np.float64)
    if coords.size == 0:
        return np.full((D, H, W), np.inf)
    iz, iy, ix = np.meshgrid(
        np.arange(D), np.arange(H), np.arange(W), indexing="ij"
    )
    pts = np.stack([iz, iy, ix], axis=-1).reshape(-1, 1, 3).astype(np.float64)
    d2 = ((pts - coords[None]) ** 2).sum(-1)
    return np.sqrt(d2.min(axis=1)).reshape(D, H, W)


def surface_distances(surface_mask: np.ndarray) -> np.ndarray:
    """Nearest-surface distance field; exact distance-transform fast path."""
    if not surface_mask.any():
        return np.full(surface_mask.shape, np.inf)
    if surface_mask.size <= _BRUTE_FORCE_LIMIT:
        return surface_distances_brute(surface_mask)
    return ndimage.distance_transform_edt(~surface_mask)


def ftsdf_encode(visibility: np.ndarray, surface_mask: np.ndarray,
                 grid: VoxelGrid, truncation: float = 4.0,
                 dtype=np.float32) -> np.ndarray:
    """Encode visibility + surface set as a (1,D,H,W) fTSDF volume.

    magnitude = max(0, 1 - dist/truncation) with dist in voxel units; sign
    +1 on VisibleFree/VisibleSurface, -1 on Occluded/OutsideFrustum. An
    empty surface set yields the all-zero volume (degenerate case).
    """
    if visibility.shape != tuple(grid.dims) or surface_mask.shape != tuple(grid.dims):
        raise ShapeError(
            f"visibility {visibility.shape} / surface {surface_mask.shape} "
            f"must match grid dims {grid.dims}"
        )
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    if not surface_mask.any():
        log.warning("ftsdf_encode: empty surface set, returning zero volume")
        return np.zeros((1, *grid.dims), dtype=dtype)
    dist = surface_distances(surface_mask.astype(bool))
    magnitude = np.maximum(0.0, 1.0 - dist / truncation)
    sign = np.where(
        (visibility == OCCLUDED) | (visibility == OUTSIDE_FRUSTUM), -1.0, 1.0
    )
    return (sign * magnitude)[None].astype(dtype)


def colour_encode(rgb: np.ndarray, depth: DepthMap, intr: CameraIntrinsics,
                  pose: Pose, grid: VoxelGrid, visibility: np.ndarray) -> np.ndarray:
    """Splat normalised RGB onto visible-surface voxels; (3,D,H,W).

    Each VisibleSurface voxel gets the mean over all valid pixels whose
    back-projected points land in it (fixed summation order over sorted
    pixel indices); every other voxel, and any surface voxel no pixel
    reaches, is (-1,-1,-1). Returns the volume; unfed surface voxels are
    counted and logged as a warning.
    """
    rgb = np.asarray(rgb)
    if rgb.shape[:2] != (depth.height, depth.width) or rgb.shape[2:] != (3,):
        raise ShapeError(
            f"rgb shape {rgb.shape} does not match depth {depth.height}x{depth.width}"
        )
    if visibility.shape != tuple(grid.dims):
        raise ShapeError(f"visibility {visibility.shape} != grid dims {grid.dims}")

    volume = np.full((3, *grid.dims), -1.0, dtype=np.float32)
    points, pixel_idx = geometry.backproject(depth, intr, pose)
    order = np.argsort(pixel_idx, kind="stable")
    points, pixel_idx = points[order], pixel_idx[order]

    rel = (points - np.array(grid.origin)) / grid.voxel_size
    idx = np.floor(rel).astype(np.int64)  # (N,3) as (ix,iy,iz)
    D, H, W = grid.dims
    ok = (
        (idx[:, 0] >= 0) & (idx[:, 0] < W)
        & (idx[:, 1] >= 0) & (idx[:, 1] < H)
        & (idx[:, 2] >= 0) & (idx[:, 2] < D)
    )
    idx, pixel_idx = idx[ok], pixel_idx[ok]
    lin = (idx[:, 2] * H + idx[:, 1]) * W + idx[:, 0]

    colours = rgb.reshape(-1, 3)[pixel_idx].astype(np.float64) / 255.0
    sums = np.zeros((D * H * W, 3))
    counts = np.zeros(D * H * W, dtype=np.int64)
    np.add.at(sums, lin, colours)
    np.add.at(counts, lin, 1)

    surface = (visibility == VISIBLE_SURFACE).reshape(-1)
    fed = surface & (counts > 0)
    mean = np.full((D * H * W, 3), -1.0)
    mean[fed] = sums[fed] / counts[fed, None]
    unfed = int((surface & (counts == 0)).sum())
    if unfed:
        log.warning("colour_encode: %d visible-surface voxels got no pixel", unfed)
    volume[:] = mean.T.reshape(3, D, H, W).astype(np.float32)
    return volume


def early_fusion_input(ftsdf: np.ndarray, colour: np.ndarray) -> np.ndarray:
    """Concatenate the fTSDF channel and the three colour channels: (4,D,H,W)."""
    if ftsdf.shape[0] != 1 or colour.shape[0] != 3:
        raise ShapeError(
            f"expected 1-channel fTSDF and 3-channel colour, got {ftsdf.shape} / {colour.shape}"
        )
    if ftsdf.shape[1:] != colour.shape[1:]:
        raise ShapeError(
            f"grid mismatch: fTSDF {ftsdf.shape[1:]} vs colour {colour.shape[1:]}"
        )
    return np.concatenate([ftsdf, colour], axis=0)
