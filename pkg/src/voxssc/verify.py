"""Self-verification: gradient checks and oracle-equivalence suites.

Backs the ``verify`` CLI command. All checks resolve the production
kernels through the :mod:`voxssc.ops` module object at call time, so an
injected fault (e.g. a patched backward) is caught rather than bypassed.
"""

from __future__ import annotations

import numpy as np

from . import encodings, evaluation, ops, reference

GRAD_TOL = 1e-5
CONV_TOL = 1e-6
FD_STEP = 1e-4


def _rand_conv_case(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k * dilation))
    spatial = tuple(
        int(rng.integers(max(1, dilation * (k - 1) + 1), 9)) for _ in range(3)
    )
    spec = ops.ConvSpec(c_in, c_out, k, stride=stride, pad=pad, dilation=dilation)
    try:
        spec.out_extent(spatial)
    except ops.ShapeError:
        return None
    x = rng.standard_normal((c_in, *spatial))
    w = rng.standard_normal(spec.param_shapes()[0])
    b = rng.standard_normal(spec.param_shapes()[1])
    return x, w, b, spec


def check_conv_forward_oracle(n_cases=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_cases:
        case = _rand_conv_case(rng)
        if case is None:
            continue
        x, w, b, spec = case
        got = ops.conv3d_forward(x, w, b, spec)
        want = reference.conv3d_naive(x, w, b, spec)
        worst = max(worst, float(np.abs(got - want).max()))
        done += 1
    return worst < CONV_TOL, f"max |delta| = {worst:.3g} over {done} cases"


def check_conv_gradients(seed=1):
    rng = np.random.default_rng(seed)
    spec = ops.ConvSpec(2, 3, 3, stride=2, pad=1, dilation=2)
    x = rng.standard_normal((2, 6, 6, 6))
    w = rng.standard_normal(spec.param_shapes()[0])
    b = rng.standard_normal(spec.param_shapes()[1])
    g_out = rng.standard_normal(ops.conv3d_forward(x, w, b, spec).shape)
    gx, gw, gb = ops.conv3d_backward(x, w, spec, g_out)
    errs = [
        ops.grad_check(lambda t: float((ops.conv3d_forward(t, w, b, spec) * g_out).sum()),
                       x, gx, step=FD_STEP),
        ops.grad_check(lambda t: float((ops.conv3d_forward(x, t, b, spec) * g_out).sum()),
                       w, gw, step=FD_STEP),
        ops.grad_check(lambda t: float((ops.conv3d_forward(x, w, t, spec) * g_out).sum()),
                       b, gb, step=FD_STEP),
    ]
    worst = max(errs)
    return worst < GRAD_TOL, f"max relative error = {worst:.3g}"


def check_relu_gradient(seed=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4, 4))
    x[np.abs(x) < 10 * FD_STEP] = 0.5  # keep probes away from the kink
    g_out = rng.standard_normal(x.shape)
    g = ops.relu_backward(x, g_out)
    err = ops.grad_check(lambda t: float((ops.relu(t) * g_out).sum()), x, g, step=FD_STEP)
    return err < GRAD_TOL, f"max relative error = {err:.3g}"


def check_maxpool(seed=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4, 4))
    out, arg = ops.maxpool3d(x, 2, 2)
    out_ref, arg_ref = reference.maxpool3d_naive(x, (2, 2, 2), (2, 2, 2))
    if not (np.array_equal(out, out_ref) and np.array_equal(arg, arg_ref)):
        return False, "forward disagrees with naive-loop oracle"
    g_out = rng.standard_normal(out.shape)
    g = ops.maxpool3d_backward(x.shape, arg, g_out)
    err = ops.grad_check(lambda t: float((ops.maxpool3d(t, 2, 2)[0] * g_out).sum()),
                         x, g, step=FD_STEP)
    return err < GRAD_TOL, f"max relative error = {err:.3g}"


def check_softmax_gradient(seed=4):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((3, 4, 4, 4))
    labels = rng.integers(0, 3, (4, 4, 4)).astype(np.int32)
    mask = rng.random((4, 4, 4)) < 0.7
    weights = rng.uniform(0.5, 2.0, 3)
    loss, grad = ops.softmax_cross_entropy(scores, labels, mask, weights)
    err = ops.grad_check(
        lambda t: float(ops.softmax_cross_entropy(t, labels, mask, weights)[0]),
        scores, grad, step=FD_STEP)
    shifted, _ = ops.softmax_cross_entropy(scores + 5.0, labels, mask, weights)
    shift_ok = abs(float(shifted) - float(loss)) < 1e-9
    return err < GRAD_TOL and shift_ok, (
        f"max relative error = {err:.3g}, shift delta = {abs(float(shifted) - float(loss)):.3g}"
    )


def check_composite_gradient(seed=5):
    """conv -> relu -> conv chain, checked end to end."""
    rng = np.random.default_rng(seed)
    s1 = ops.ConvSpec(2, 3, 3, pad=1)
    s2 = ops.ConvSpec(3, 2, 1)
    x = rng.standard_normal((2, 4, 4, 4))
    w1 = rng.standard_normal(s1.param_shapes()[0])
    b1 = rng.standard_normal(s1.param_shapes()[1])
    w2 = rng.standard_normal(s2.param_shapes()[0])
    b2 = rng.standard_normal(s2.param_shapes()[1])

    def fwd(xx, ww1, ww2):
        h = ops.conv3d_forward(xx, ww1, b1, s1)
        return ops.conv3d_forward(ops.relu(h), ww2, b2, s2)

    g_out = rng.standard_normal(fwd(x, w1, w2).shape)
    h = ops.conv3d_forward(x, w1, b1, s1)
    a = ops.relu(h)
    _, gw2, _ = ops.conv3d_backward(a, w2, s2, g_out)
    ga, _, _ = ops.conv3d_backward(a, w2, s2, g_out)
    gh = ops.relu_backward(h, ga)
    gx, gw1, _ = ops.conv3d_backward(x, w1, s1, gh)
    errs = [
        ops.grad_check(lambda t: float((fwd(t, w1, w2) * g_out).sum()), x, gx, step=FD_STEP),
        ops.grad_check(lambda t: float((fwd(x, t, w2) * g_out).sum()), w1, gw1, step=FD_STEP),
        ops.grad_check(lambda t: float((fwd(x, w1, t) * g_out).sum()), w2, gw2, step=FD_STEP),
    ]
    worst = max(errs)
    return worst < GRAD_TOL, f"max relative error = {worst:.3g}"


def check_ftsdf_oracle(n_cases=5, seed=6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        vis = rng.integers(0, 4, (8, 8, 8)).astype(np.uint8)
        surface = rng.random((8, 8, 8)) < 0.05
        from .geometry import VoxelGrid
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=0.06, dims=(8, 8, 8))
        got = encodings.ftsdf_encode(vis, surface, grid, truncation=3.0,
                                     dtype=np.float64)
        want = reference.ftsdf_naive(vis, surface, 3.0)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-9, f"max |delta| = {worst:.3g}"


def check_iou_oracle(n_cases=10, seed=7):
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        pred = rng.integers(0, 4, (6, 6, 6)).astype(np.int32)
        gt = rng.integers(0, 4, (6, 6, 6)).astype(np.int32)
        mask = rng.random((6, 6, 6)) < 0.8
        per_class, comp = reference.iou_counts_naive(pred, gt, mask, 4)
        sem = evaluation.iou_semantic(pred, gt, mask, 4)
        for c, (i, u) in per_class.items():
            if u == 0:
                if c in sem.per_class:
                    return False, f"class {c} should be absent"
            elif abs(sem.per_class[c] - i / u) > 0:
                return False, f"class {c}: {sem.per_class[c]} != {i}/{u}"
        got = evaluation.iou_completion(pred, gt, mask)
        want = None if comp[1] == 0 else comp[0] / comp[1]
        if (got is None) != (want is None) or (got is not None and got != want):
            return False, f"completion {got} != {want}"
    return True, f"{n_cases} randomized cases exact"


ALL_CHECKS = [
    ("conv3d forward vs naive-loop oracle", check_conv_forward_oracle),
    ("conv3d gradients vs finite differences", check_conv_gradients),
    ("relu gradient vs finite differences", check_relu_gradient),
    ("maxpool3d vs oracle + gradient", check_maxpool),
    ("softmax cross-entropy gradient + shift invariance", check_softmax_gradient),
    ("composite conv-relu-conv gradient", check_composite_gradient),
    ("fTSDF vs brute-force nearest-surface oracle", check_ftsdf_oracle),
    ("IoU metrics vs counting oracle", check_iou_oracle),
]


def run_all(report=print) -> bool:
    ok = True
    for name, fn in ALL_CHECKS:
        passed, detail = fn()
        ok &= passed
        report(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return ok
