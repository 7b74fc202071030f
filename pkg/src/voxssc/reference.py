"""Slow, independent reference implementations used for verification.

Everything here is written as plain scalar loops, deliberately sharing no
code with the production kernels, so the two paths can be checked against
each other (see :mod:`voxssc.verify` and the test suite).
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import (
    OCCLUDED,
    OUTSIDE_FRUSTUM,
    VISIBLE_FREE,
    VISIBLE_SURFACE,
)


def conv3d_naive(x, w, b, spec):
    """Six-nested-loop 3D convolution; the oracle for conv3d_forward."""
    C_out = spec.out_channels
    kz, ky, kx = spec.kernel_size
    sz, sy, sx = spec.stride
    pz, py, px = spec.pad
    dz, dy, dx = spec.dilation
    C_in, D, H, W = x.shape
    oD, oH, oW = spec.out_extent((D, H, W))
    out = np.zeros((C_out, oD, oH, oW), dtype=np.float64)
    for c in range(C_out):
        for z in range(oD):
            for y in range(oH):
                for xx in range(oW):
                    acc = float(b[c])
                    for ci in range(C_in):
                        for i in range(kz):
                            for j in range(ky):
                                for l in range(kx):
                                    zi = z * sz - pz + i * dz
                                    yi = y * sy - py + j * dy
                                    xi = xx * sx - px + l * dx
                                    if 0 <= zi < D and 0 <= yi < H and 0 <= xi < W:
                                        acc += float(w[c, ci, i, j, l]) * float(x[ci, zi, yi, xi])
                    out[c, z, y, xx] = acc
    return out.astype(x.dtype)


def maxpool3d_naive(x, window, stride):
    """Per-window scalar max with lowest-linear-index tie breaking."""
    wz, wy, wx = window
    sz, sy, sx = stride
    C, D, H, W = x.shape
    oD = (D - wz) // sz + 1
    oH = (H - wy) // sy + 1
    oW = (W - wx) // sx + 1
    out = np.empty((C, oD, oH, oW), dtype=x.dtype)
    arg = np.empty((C, oD, oH, oW), dtype=np.int64)
    for c in range(C):
        for z in range(oD):
            for y in range(oH):
                for xx in range(oW):
                    best, best_idx = -math.inf, -1
                    for i in range(wz):
                        for j in range(wy):
                            for l in range(wx):
                                zi, yi, xi = z * sz + i, y * sy + j, xx * sx + l
                                v = float(x[c, zi, yi, xi])
                                lin = (zi * H + yi) * W + xi
                                if v > best:
                                    best, best_idx = v, lin
                    out[c, z, y, xx] = best
                    arg[c, z, y, xx] = best_idx
    return out, arg


def nearest_surface_distances_naive(surface_mask):
    """All-pairs scalar nearest-surface distance in voxel units."""
    coords = [tuple(c) for c in np.argwhere(surface_mask)]
    D, H, W = surface_mask.shape
    dist = np.full((D, H, W), np.inf)
    for z in range(D):
        for y in range(H):
            for x in range(W):
                best = math.inf
                for (sz, sy, sx) in coords:
                    d = math.sqrt((z - sz) ** 2 + (y - sy) ** 2 + (x - sx) ** 2)
                    if d < best:
                        best = d
                dist[z, y, x] = best
    return dist


def ftsdf_naive(visibility, surface_mask, truncation):
    """Brute-force fTSDF: linear decay from the nearest surface voxel."""
    if not surface_mask.any():
        return np.zeros((1, *visibility.shape))
    dist = nearest_surface_distances_naive(surface_mask)
    out = np.zeros(visibility.shape)
    D, H, W = visibility.shape
    for z in range(D):
        for y in range(H):
            for x in range(W):
                m = max(0.0, 1.0 - dist[z, y, x] / truncation)
                s = -1.0 if visibility[z, y, x] in (OCCLUDED, OUTSIDE_FRUSTUM) else 1.0
                out[z, y, x] = s * m
    return out[None]


def classify_visibility_naive(depth, intr, pose, grid, surface_band=None):
    """Per-voxel scalar march along the pixel ray against the measured depth."""
    if surface_band is None:
        surface_band = grid.voxel_size
    D, H, W = grid.dims
    out = np.empty((D, H, W), dtype=np.uint8)
    Rinv = pose.rotation.T
    ox, oy, oz = grid.origin
    vs = grid.voxel_size
    for iz in range(D):
        for iy in range(H):
            for ix in range(W):
                p = np.array([ox + (ix + 0.5) * vs, oy + (iy + 0.5) * vs,
                              oz + (iz + 0.5) * vs])
                pc = Rinv @ (p - pose.translation)
                if pc[2] <= 0:
                    out[iz, iy, ix] = OUTSIDE_FRUSTUM
                    continue
                u = intr.fx * pc[0] / pc[2] + intr.cx
                v = intr.fy * pc[1] / pc[2] + intr.cy
                ui, vi = int(round(u)), int(round(v))
                if not (0 <= ui < intr.width and 0 <= vi < intr.height):
                    out[iz, iy, ix] = OUTSIDE_FRUSTUM
                    continue
                if not depth.valid[vi, ui]:
                    out[iz, iy, ix] = OUTSIDE_FRUSTUM
                    continue
                d = depth.depth[vi, ui]
                if pc[2] < d - surface_band:
                    out[iz, iy, ix] = VISIBLE_FREE
                elif pc[2] > d + surface_band:
                    out[iz, iy, ix] = OCCLUDED
                else:
                    out[iz, iy, ix] = VISIBLE_SURFACE
    return out


def ray_box_slab_naive(origin, direction, lo, hi):
    """Scalar slab test; returns the hit parameter t or None."""
    t_enter, t_exit = -math.inf, math.inf
    for ax in range(3):
        o, d = origin[ax], direction[ax]
        if d == 0.0:
            if not (lo[ax] <= o <= hi[ax]):
                return None
            continue
        t1, t2 = (lo[ax] - o) / d, (hi[ax] - o) / d
        t_enter = max(t_enter, min(t1, t2))
        t_exit = min(t_exit, max(t1, t2))
    if t_exit < t_enter or t_exit <= 0:
        return None
    return t_enter if t_enter > 0 else t_exit


def iou_counts_naive(pred, gt, mask, n_classes):
    """Exhaustive per-voxel counting for both IoU metrics.

    Returns (per-class {c: (inter, union)} for c >= 1 over masked voxels,
    (comp_inter, comp_union) over the same mask treated as occluded set).
    """
    per_class = {c: [0, 0] for c in range(1, n_classes)}
    comp = [0, 0]
    it = np.nditer(mask, flags=["multi_index"])
    for m in it:
        if not m:
            continue
        p = int(pred[it.multi_index])
        g = int(gt[it.multi_index])
        for c in range(1, n_classes):
            if p == c and g == c:
                per_class[c][0] += 1
            if p == c or g == c:
                per_class[c][1] += 1
        if p != 0 and g != 0:
            comp[0] += 1
        if p != 0 or g != 0:
            comp[1] += 1
    return per_class, tuple(comp)


def argmax_labels_naive(scores):
    """Scalar per-voxel argmax with lowest-index tie breaking."""
    n_cls, D, H, W = scores.shape
    out = np.zeros((D, H, W), dtype=np.int32)
    for z in range(D):
        for y in range(H):
            for x in range(W):
                best_c, best = 0, float(scores[0, z, y, x])
                for c in range(1, n_cls):
                    v = float(scores[c, z, y, x])
                    if v > best:
                        best, best_c = v, c
                out[z, y, x] = best_c
    return out
