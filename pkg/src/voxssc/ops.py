"""Differentiable numerical kernels for volumetric networks.

All tensors are plain numpy arrays in channels-first volume layout
(C, D, H, W), float32 for training/inference and float64 when gradient
checking. Every op is a pure function: the backward pass takes whatever
forward state it needs as explicit arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


class ShapeError(ValueError):
    """Operand shapes inconsistent with an op's contract."""


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected scalar or 3-tuple, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """3D convolution hyperparameters; scalars are isotropic shorthand."""

    in_channels: int
    out_channels: int
    kernel_size: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    pad: tuple[int, int, int] = (0, 0, 0)
    dilation: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel_size", _triple(self.kernel_size))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "pad", _triple(self.pad))
        object.__setattr__(self, "dilation", _triple(self.dilation))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        for name in ("kernel_size", "stride", "dilation"):
            if min(getattr(self, name)) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.pad) < 0:
            raise ShapeError(f"pad must be non-negative, got {self.pad}")

    def out_extent(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        """Output spatial dims for a given input extent; rejects empty outputs."""
        out = []
        for ax, (n, k, s, p, d) in enumerate(
            zip(spatial, self.kernel_size, self.stride, self.pad, self.dilation)
        ):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ShapeError(
                    f"axis {ax}: input extent {n} too small for "
                    f"kernel {k}, stride {s}, pad {p}, dilation {d}"
                )
            out.append(o)
        return tuple(out)

    def param_shapes(self) -> tuple[tuple, tuple]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels, *k), (self.out_channels,)


def _check_conv_operands(x, w, b, spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"input must be 4D (C,D,H,W), got {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"channel axis: input has {x.shape[0]} channels, spec expects {spec.in_channels}"
        )
    wshape, bshape = spec.param_shapes()
    if w.shape != wshape:
        raise ShapeError(f"weight shape {w.shape} != {wshape} required by spec")
    if b.shape != bshape:
        raise ShapeError(f"bias shape {b.shape} != {bshape} required by spec")


def _pad_volume(x, pad):
    pz, py, px = pad
    if pz == py == px == 0:
        return x
    return np.pad(x, ((0, 0), (pz, pz), (py, py), (px, px)))


def _offset_slice(i, j, l, spec, out_sp):
    """Slices into the padded input selecting the (i,j,l) kernel tap."""
    dz, dy, dx = spec.dilation
    sz, sy, sx = spec.stride
    oD, oH, oW = out_sp
    return (
        slice(None),
        slice(i * dz, i * dz + sz * (oD - 1) + 1, sz),
        slice(j * dy, j * dy + sy * (oH - 1) + 1, sy),
        slice(l * dx, l * dx + sx * (oW - 1) + 1, sx),
    )


def conv3d_forward(x, w, b, spec: ConvSpec):
    """Dense 3D convolution with zero padding, stride and dilation.

    out[c,z,y,x] = bias[c] + sum over (c',i,j,l) of
    w[c,c',i,j,l] * in[c', z*s - p + i*d, y*s - p + j*d, x*s - p + l*d],
    with out-of-range input terms contributing zero.
    """
    _check_conv_operands(x, w, b, spec)
    out_sp = spec.out_extent(x.shape[1:])
    xp = _pad_volume(x, spec.pad)
    out = np.zeros((spec.out_channels, *out_sp), dtype=x.dtype)
    kz, ky, kx = spec.kernel_size
    for i, j, l in product(range(kz), range(ky), range(kx)):
        tap = xp[_offset_slice(i, j, l, spec, out_sp)]
        out += np.tensordot(w[:, :, i, j, l], tap, axes=(1, 0))
    out += b[:, None, None, None].astype(x.dtype, copy=False)
    return out


def conv3d_backward(x, w, spec: ConvSpec, grad_out):
    """Gradients of ``conv3d_forward`` w.r.t. input, weights and bias."""
    _check_conv_operands(x, w, np.zeros(spec.out_channels, dtype=x.dtype), spec)
    out_sp = spec.out_extent(x.shape[1:])
    if grad_out.shape != (spec.out_channels, *out_sp):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(spec.out_channels, *out_sp)}"
        )
    xp = _pad_volume(x, spec.pad)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    grad_w = np.zeros_like(w)
    grad_xp = np.zeros_like(xp)
    kz, ky, kx = spec.kernel_size
    for i, j, l in product(range(kz), range(ky), range(kx)):
        sl = _offset_slice(i, j, l, spec, out_sp)
        grad_w[:, :, i, j, l] = np.tensordot(
            grad_out, xp[sl], axes=([1, 2, 3], [1, 2, 3])
        )
        grad_xp[sl] += np.tensordot(w[:, :, i, j, l], grad_out, axes=(0, 0))
    pz, py, px = spec.pad
    _, D, H, W = x.shape
    grad_x = grad_xp[:, pz : pz + D, py : py + H, px : px + W]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Subgradient at exactly 0 is taken as 0 (grad passes only where x > 0)."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool3d(x, window, stride=None):
    """Max pooling over (C,D,H,W); returns (output, argmax).

    argmax holds, per output element, the linear index into the flattened
    spatial input (D*H*W) of the selected maximum. Ties resolve to the
    lowest linear index. Backward routes gradient to exactly these indices.
    """
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if x.ndim != 4:
        raise ShapeError(f"input must be 4D (C,D,H,W), got {x.shape}")
    C, D, H, W = x.shape
    for ax, (n, wn) in enumerate(zip((D, H, W), window)):
        if wn > n:
            raise ShapeError(f"axis {ax}: window {wn} exceeds input extent {n}")
    wz, wy, wx = window
    sz, sy, sx = stride
    oD = (D - wz) // sz + 1
    oH = (H - wy) // sy + 1
    oW = (W - wx) // sx + 1
    taps = np.empty((wz * wy * wx, C, oD, oH, oW), dtype=x.dtype)
    for n, (i, j, l) in enumerate(product(range(wz), range(wy), range(wx))):
        taps[n] = x[
            :,
            i : i + sz * (oD - 1) + 1 : sz,
            j : j + sy * (oH - 1) + 1 : sy,
            l : l + sx * (oW - 1) + 1 : sx,
        ]
    # row-major tap order is monotone in linear input index within each
    # window, so argmax's first-occurrence rule gives the lowest index
    arg_tap = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg_tap[None], axis=0)[0]
    oz, oy, ox = np.meshgrid(
        np.arange(oD) * sz, np.arange(oH) * sy, np.arange(oW) * sx, indexing="ij"
    )
    ti, tj, tl = np.unravel_index(arg_tap, window)
    argmax = ((oz + ti) * H + (oy + tj)) * W + (ox + tl)
    return out, argmax


def maxpool3d_backward(x_shape, argmax, grad_out):
    """Scatter grad_out back to the argmax positions of the forward pass."""
    C, D, H, W = x_shape
    if argmax.shape != grad_out.shape or argmax.shape[0] != C:
        raise ShapeError(
            f"argmax {argmax.shape} / grad_out {grad_out.shape} inconsistent with input {x_shape}"
        )
    grad_x = np.zeros((C, D * H * W), dtype=grad_out.dtype)
    ch = np.repeat(np.arange(C), argmax[0].size)
    np.add.at(grad_x, (ch, argmax.reshape(C, -1).ravel()), grad_out.reshape(C, -1).ravel())
    return grad_x.reshape(C, D, H, W)


def concat_channels(inputs):
    """Stack volumes along the channel axis; spatial dims must agree."""
    if not inputs:
        raise ShapeError("concat requires at least one input")
    spatial = inputs[0].shape[1:]
    for n, t in enumerate(inputs):
        if t.ndim != 4:
            raise ShapeError(f"input {n}: expected 4D volume, got {t.shape}")
        if t.shape[1:] != spatial:
            raise ShapeError(
                f"input {n}: spatial dims {t.shape[1:]} != {spatial} of input 0"
            )
    return np.concatenate(inputs, axis=0)


def concat_channels_backward(grad_out, channel_counts):
    """Slice the concatenated gradient back per input."""
    if sum(channel_counts) != grad_out.shape[0]:
        raise ShapeError(
            f"channel counts {channel_counts} do not sum to {grad_out.shape[0]}"
        )
    grads, lo = [], 0
    for c in channel_counts:
        grads.append(grad_out[lo : lo + c])
        lo += c
    return grads


def softmax_cross_entropy(scores, labels, mask, class_weights=None):
    """Per-class-averaged masked cross-entropy over a score volume.

    scores: (N_cls, D, H, W); labels: (D, H, W) int; mask: (D, H, W) bool.
    loss = sum_c w_c * mean over masked voxels of class c of (-log p_c).
    A class with no masked voxels contributes 0. Returns (loss, grad_scores);
    voxels outside the mask get exactly zero gradient.
    """
    n_cls = scores.shape[0]
    if labels.shape != scores.shape[1:] or mask.shape != scores.shape[1:]:
        raise ShapeError(
            f"labels {labels.shape} / mask {mask.shape} must match score volume {scores.shape[1:]}"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_cls:
        raise ShapeError(f"labels outside [0, {n_cls})")
    if class_weights is None:
        class_weights = np.ones(n_cls, dtype=scores.dtype)
    class_weights = np.asarray(class_weights, dtype=scores.dtype)
    if class_weights.shape != (n_cls,):
        raise ShapeError(f"class_weights shape {class_weights.shape} != ({n_cls},)")

    flat_scores = scores.reshape(n_cls, -1)
    flat_labels = labels.reshape(-1)
    flat_mask = mask.reshape(-1).astype(bool)
    grad = np.zeros_like(flat_scores)
    if not flat_mask.any():
        return scores.dtype.type(0.0), grad.reshape(scores.shape)

    idx = np.nonzero(flat_mask)[0]
    s = flat_scores[:, idx]
    lab = flat_labels[idx]
    s = s - s.max(axis=0, keepdims=True)
    logZ = np.log(np.exp(s).sum(axis=0, keepdims=True))
    logp = s - logZ
    p = np.exp(logp)

    counts = np.bincount(lab, minlength=n_cls)
    # per-voxel scale w_c / count_c for the voxel's own class
    safe = np.where(counts > 0, counts, 1)
    scale = (class_weights / safe)[lab]
    loss = -(scale * logp[lab, np.arange(lab.size)]).sum()

    g = p * scale[None, :]
    g[lab, np.arange(lab.size)] -= scale
    grad[:, idx] = g
    return scores.dtype.type(loss), grad.reshape(scores.shape)


def sgd_step(param, grad, velocity, lr, momentum=0.0, lr_ratio=1.0):
    """Momentum SGD: v <- momentum*v - lr*ratio*g; p <- p + v. Pure."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} must agree"
        )
    v = momentum * velocity - (lr * lr_ratio) * grad
    return param + v, v


def numeric_gradient(fun, x, step=1e-4):
    """Central finite differences of a scalar function, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fun(x)
        flat[i] = orig - step
        fm = fun(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def max_relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    err = np.abs(a - n) / denom
    if not np.all(np.isfinite(err)):
        return np.inf
    return float(err.max()) if err.size else 0.0


def grad_check(fun, x, analytic_grad, step=1e-4):
    """Max relative error between an analytic gradient and central differences.

    ``fun`` maps a float64 array of x's shape to a scalar. Non-finite values
    anywhere surface as an infinite error (reported failure).
    """
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if not np.all(np.isfinite(analytic)):
        return np.inf
    numeric = numeric_gradient(fun, x, step=step)
    return max_relative_error(analytic, numeric)
