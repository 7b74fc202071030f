"""SSCNet-style 3D CNN variants as explicit layer DAGs.

Four builders share one trunk vocabulary: a depth-only baseline, early
fusion (4-channel input), mid-level fusion (separate depth/colour branches
concatenated before the shared head) and colour-only. Forward/backward are
orchestrated here on top of the kernels in :mod:`voxssc.ops`; the exact
layer schedule is the "lite" configuration frozen in ``NetConfig``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops, vxt
from .ops import ConvSpec, ShapeError

VARIANTS = ("depth", "early", "mid", "colour")

MODEL_MAGIC = b"SSCM1"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Architecture configuration; dims are the input grid (D, H, W)."""

    dims: tuple[int, int, int] = (64, 32, 64)
    n_classes: int = 12
    width_mult: float = 1.0
    residual: bool = True
    # base widths of the lite trunk before the multiplier
    base_stem: int = 8
    base_trunk: int = 16
    base_head: int = 32

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d % 4 != 0 for d in self.dims):
            raise ShapeError(f"grid dims {self.dims} must be divisible by 4")
        if self.width_mult <= 0:
            raise ShapeError("width multiplier must be positive")
        if self.n_classes < 2:
            raise ShapeError("need at least 2 classes (free space + 1)")

    def width(self, base: int) -> int:
        return max(1, round(base * self.width_mult))

    @property
    def out_dims(self) -> tuple[int, int, int]:
        return tuple(d // 4 for d in self.dims)


@dataclass
class LayerSpec:
    name: str
    kind: str  # input | conv | relu | pool | concat | add
    inputs: list[str] = field(default_factory=list)
    conv: ConvSpec | None = None
    pool_window: tuple[int, int, int] | None = None
    pool_stride: tuple[int, int, int] | None = None
    channel_range: tuple[int, int] | None = None  # input layers: slice of the net input
    trainable: bool = True
    lr_ratio: float = 1.0

    @property
    def is_dilated(self) -> bool:
        return self.kind == "conv" and max(self.conv.dilation) > 1


@dataclass
class NetworkGraph:
    variant: str
    cfg: NetConfig
    layers: list[LayerSpec]
    params: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self._by_name = {l.name: l for l in self.layers}
        if len(self._by_name) != len(self.layers):
            raise ShapeError("duplicate layer names")
        seen = set()
        for l in self.layers:
            for src in l.inputs:
                if src not in seen:
                    raise ShapeError(
                        f"layer {l.name!r}: input {src!r} not defined earlier (cycle or typo)"
                    )
            seen.add(l.name)

    def layer(self, name: str) -> LayerSpec:
        return self._by_name[name]

    @property
    def output_layer(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def input_channels(self) -> int:
        return {"depth": 1, "early": 4, "mid": 4, "colour": 3}[self.variant]

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def param_count(self) -> int:
        return sum(p["w"].size + p["b"].size for p in self.params.values())


def init_params(net: NetworkGraph, rng: np.random.Generator,
                dtype=np.float32) -> None:
    """Fan-in-scaled uniform weights (He), zero biases, for every conv block."""
    for l in net.conv_layers:
        wshape, bshape = l.conv.param_shapes()
        fan_in = l.conv.in_channels * int(np.prod(l.conv.kernel_size))
        limit = np.sqrt(6.0 / fan_in)
        net.params[l.name] = {
            "w": rng.uniform(-limit, limit, wshape).astype(dtype),
            "b": np.zeros(bshape, dtype=dtype),
        }


def _random_conv_weights(spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
    fan_in = spec.in_channels * int(np.prod(spec.kernel_size))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, spec.param_shapes()[0]).astype(dtype)


# ---------------------------------------------------------------------------
# builders


def _depth_trunk(cfg: NetConfig, in_channels: int, input_name: str,
                 channel_range: tuple[int, int]) -> tuple[list[LayerSpec], list[str]]:
    """SSCNet-lite trunk: strided stem, pool, plain + dilated blocks.

    Returns (layers, tap names); the five taps all live at 1/4 resolution
    and feed the multi-scale aggregation concat.
    """
    w1, w2 = cfg.width(cfg.base_stem), cfg.width(cfg.base_trunk)
    L = [
        LayerSpec(input_name, "input", channel_range=channel_range),
        LayerSpec("conv_in", "conv", [input_name],
                  conv=ConvSpec(in_channels, w1, 3, stride=2, pad=1)),
        LayerSpec("conv_in_relu", "relu", ["conv_in"]),
        LayerSpec("red1", "conv", ["conv_in_relu"], conv=ConvSpec(w1, w2, 3, pad=1)),
        LayerSpec("red1_relu", "relu", ["red1"]),
        LayerSpec("pool", "pool", ["red1_relu"], pool_window=(2, 2, 2),
                  pool_stride=(2, 2, 2)),
        LayerSpec("c1", "conv", ["pool"], conv=ConvSpec(w2, w2, 3, pad=1)),
        LayerSpec("c1_relu", "relu", ["c1"]),
        LayerSpec("c2", "conv", ["c1_relu"], conv=ConvSpec(w2, w2, 3, pad=1)),
        LayerSpec("c2_relu", "relu", ["c2"]),
    ]
    if cfg.residual:
        L.append(LayerSpec("a1", "add", ["c2_relu", "c1_relu"]))
        plain_out = "a1"
    else:
        plain_out = "c2_relu"
    L += [
        LayerSpec("d1", "conv", [plain_out],
                  conv=ConvSpec(w2, w2, 3, pad=2, dilation=2)),
        LayerSpec("d1_relu", "relu", ["d1"]),
        LayerSpec("d2", "conv", ["d1_relu"],
                  conv=ConvSpec(w2, w2, 3, pad=2, dilation=2)),
        LayerSpec("d2_relu", "relu", ["d2"]),
    ]
    if cfg.residual:
        L.append(LayerSpec("a2", "add", ["d2_relu", "d1_relu"]))
        dil_out = "a2"
    else:
        dil_out = "d2_relu"
    taps = ["pool", "c1_relu", plain_out, "d1_relu", dil_out]
    return L, taps


def _colour_trunk(cfg: NetConfig, channel_range: tuple[int, int]):
    """Reduced 3-channel branch: keeps both dilated convs, drops plain ones."""
    w1, w2 = cfg.width(cfg.base_stem), cfg.width(cfg.base_trunk)
    L = [
        LayerSpec("input_colour", "input", channel_range=channel_range),
        LayerSpec("cconv_in", "conv", ["input_colour"],
                  conv=ConvSpec(3, w1, 3, stride=2, pad=1)),
        LayerSpec("cconv_in_relu", "relu", ["cconv_in"]),
        LayerSpec("cpool", "pool", ["cconv_in_relu"], pool_window=(2, 2, 2),
                  pool_stride=(2, 2, 2)),
        LayerSpec("cd1", "conv", ["cpool"],
                  conv=ConvSpec(w1, w2, 3, pad=2, dilation=2)),
        LayerSpec("cd1_relu", "relu", ["cd1"]),
        LayerSpec("cd2", "conv", ["cd1_relu"],
                  conv=ConvSpec(w2, w2, 3, pad=2, dilation=2)),
        LayerSpec("cd2_relu", "relu", ["cd2"]),
    ]
    taps = ["cpool", "cd1_relu", "cd2_relu"]
    return L, taps


def _tap_channels(cfg: NetConfig, layers: list[LayerSpec], taps: list[str]) -> int:
    by_name = {l.name: l for l in layers}

    def out_ch(name):
        l = by_name[name]
        if l.kind == "conv":
            return l.conv.out_channels
        if l.kind == "concat":
            return sum(out_ch(s) for s in l.inputs)
        return out_ch(l.inputs[0])

    return sum(out_ch(t) for t in taps)


def _head(cfg: NetConfig, agg_channels: int) -> list[LayerSpec]:
    w3 = cfg.width(cfg.base_head)
    return [
        LayerSpec("h1", "conv", ["agg"], conv=ConvSpec(agg_channels, w3, 1)),
        LayerSpec("h1_relu", "relu", ["h1"]),
        LayerSpec("h2", "conv", ["h1_relu"], conv=ConvSpec(w3, w3, 1)),
        LayerSpec("h2_relu", "relu", ["h2"]),
        LayerSpec("h3", "conv", ["h2_relu"], conv=ConvSpec(w3, cfg.n_classes, 1)),
    ]


def _finish(variant, cfg, layers, taps, seed=None) -> NetworkGraph:
    layers = layers + [LayerSpec("agg", "concat", taps)]
    layers += _head(cfg, _tap_channels(cfg, layers, taps))
    net = NetworkGraph(variant=variant, cfg=cfg, layers=layers)
    if seed is not None:
        init_params(net, np.random.default_rng(seed))
    return net


def build_depth_net(cfg: NetConfig, seed: int | None = None) -> NetworkGraph:
    L, taps = _depth_trunk(cfg, 1, "input_depth", (0, 1))
    return _finish("depth", cfg, L, taps, seed)


def build_early_fusion(cfg: NetConfig, seed: int | None = None) -> NetworkGraph:
    """Same graph as the depth net; only the first conv reads 4 channels."""
    L, taps = _depth_trunk(cfg, 4, "input_early", (0, 4))
    return _finish("early", cfg, L, taps, seed)


def build_mid_fusion(cfg: NetConfig, seed: int | None = None) -> NetworkGraph:
    """Depth trunk + reduced colour trunk, fused at the aggregation concat."""
    Ld, taps_d = _depth_trunk(cfg, 1, "input_depth", (0, 1))
    Lc, taps_c = _colour_trunk(cfg, (1, 4))
    return _finish("mid", cfg, Ld + Lc, taps_d + taps_c, seed)


def build_colour_only(cfg: NetConfig, seed: int | None = None) -> NetworkGraph:
    L, taps = _colour_trunk(cfg, (0, 3))
    return _finish("colour", cfg, L, taps, seed)


BUILDERS = {
    "depth": build_depth_net,
    "early": build_early_fusion,
    "mid": build_mid_fusion,
    "colour": build_colour_only,
}


# ---------------------------------------------------------------------------
# execution


def forward(net: NetworkGraph, x: np.ndarray, cache: dict | None = None):
    """Topological forward pass; pass ``cache={}`` to keep state for backward."""
    if x.ndim != 4 or x.shape[0] != net.input_channels:
        raise ShapeError(
            f"{net.variant} net expects ({net.input_channels},D,H,W) input, got {x.shape}"
        )
    if x.shape[1:] != net.cfg.dims:
        raise ShapeError(f"input spatial dims {x.shape[1:]} != configured {net.cfg.dims}")
    acts: dict[str, np.ndarray] = {}
    pool_arg: dict[str, np.ndarray] = {}
    for l in net.layers:
        if l.kind == "input":
            lo, hi = l.channel_range
            acts[l.name] = x[lo:hi]
        elif l.kind == "conv":
            p = net.params[l.name]
            acts[l.name] = ops.conv3d_forward(acts[l.inputs[0]], p["w"], p["b"], l.conv)
        elif l.kind == "relu":
            acts[l.name] = ops.relu(acts[l.inputs[0]])
        elif l.kind == "pool":
            out, arg = ops.maxpool3d(acts[l.inputs[0]], l.pool_window, l.pool_stride)
            acts[l.name] = out
            pool_arg[l.name] = arg
        elif l.kind == "concat":
            acts[l.name] = ops.concat_channels([acts[s] for s in l.inputs])
        elif l.kind == "add":
            acts[l.name] = acts[l.inputs[0]] + acts[l.inputs[1]]
        else:
            raise ShapeError(f"unknown layer kind {l.kind!r}")
    if cache is not None:
        cache["acts"] = acts
        cache["pool_arg"] = pool_arg
        cache["input"] = x
    return acts[net.output_layer.name]


def backward(net: NetworkGraph, cache: dict, grad_scores: np.ndarray):
    """Reverse pass; returns (param grads {name: (gw, gb)}, grad w.r.t. input).

    Gradients accumulate across fan-out: a layer consumed by several
    downstream layers receives the sum of their upstream gradients.
    """
    acts, pool_arg, x = cache["acts"], cache["pool_arg"], cache["input"]
    grads: dict[str, np.ndarray] = {net.output_layer.name: grad_scores}
    param_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    grad_input = np.zeros_like(x)

    def push(name, g):
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    for l in reversed(net.layers):
        g = grads.get(l.name)
        if g is None:
            continue
        if l.kind == "input":
            lo, hi = l.channel_range
            grad_input[lo:hi] += g
        elif l.kind == "conv":
            p = net.params[l.name]
            gx, gw, gb = ops.conv3d_backward(acts[l.inputs[0]], p["w"], l.conv, g)
            param_grads[l.name] = (gw, gb)
            push(l.inputs[0], gx)
        elif l.kind == "relu":
            push(l.inputs[0], ops.relu_backward(acts[l.inputs[0]], g))
        elif l.kind == "pool":
            push(l.inputs[0], ops.maxpool3d_backward(
                acts[l.inputs[0]].shape, pool_arg[l.name], g))
        elif l.kind == "concat":
            counts = [acts[s].shape[0] for s in l.inputs]
            for src, gs in zip(l.inputs, ops.concat_channels_backward(g, counts)):
                push(src, gs)
        elif l.kind == "add":
            push(l.inputs[0], g)
            push(l.inputs[1], g)
    return param_grads, grad_input


def surgery_init(net: NetworkGraph, donor: NetworkGraph, seed: int) -> NetworkGraph:
    """Splice pretrained depth weights into an early-fusion net.

    The first conv's kernel slice for input channel 0 is copied from the
    donor's first layer; the three colour-channel slices are freshly
    random; every deeper parameter block is copied verbatim.
    """
    if net.variant != "early":
        raise ShapeError("surgery initialization applies to early-fusion nets only")
    if donor.variant != "depth":
        raise ShapeError("surgery donor must be a depth-only net")
    rng = np.random.default_rng(seed)
    dw = donor.params["conv_in"]["w"]
    spec = net.layer("conv_in").conv
    if dw.shape != (spec.out_channels, 1, *spec.kernel_size):
        raise ShapeError(
            f"donor first-layer shape {dw.shape} incompatible with {spec.param_shapes()[0]}"
        )
    for l in net.conv_layers:
        if l.name == "conv_in":
            w = _random_conv_weights(spec, rng, dtype=dw.dtype)
            w[:, 0:1] = dw
            net.params[l.name] = {"w": w, "b": donor.params["conv_in"]["b"].copy()}
        else:
            dp = donor.params[l.name]
            if dp["w"].shape != l.conv.param_shapes()[0]:
                raise ShapeError(
                    f"donor block {l.name!r} shape {dp['w'].shape} != {l.conv.param_shapes()[0]}"
                )
            net.params[l.name] = {"w": dp["w"].copy(), "b": dp["b"].copy()}
    return net


# ---------------------------------------------------------------------------
# receptive fields


def receptive_field(net: NetworkGraph, out_voxel: tuple[int, int, int]):
    """Input bounding box (inclusive (lo, hi) per axis) feeding one output voxel.

    Composes per-layer interval maps backwards through the DAG and clips to
    the input extent.
    """
    oD, oH, oW = net.cfg.out_dims
    if not all(0 <= v < n for v, n in zip(out_voxel, (oD, oH, oW))):
        raise ShapeError(f"output voxel {out_voxel} outside {net.cfg.out_dims}")
    boxes: dict[str, list[list[int]]] = {
        net.output_layer.name: [[v, v] for v in out_voxel]
    }
    input_box = None
    for l in reversed(net.layers):
        box = boxes.get(l.name)
        if box is None:
            continue
        if l.kind == "input":
            if input_box is None:
                input_box = [list(b) for b in box]
            else:
                input_box = [
                    [min(a[0], b[0]), max(a[1], b[1])]
                    for a, b in zip(input_box, box)
                ]
            continue
        if l.kind == "conv":
            s, p, d, k = l.conv.stride, l.conv.pad, l.conv.dilation, l.conv.kernel_size
            src_box = [
                [lo * s[ax] - p[ax], hi * s[ax] - p[ax] + d[ax] * (k[ax] - 1)]
                for ax, (lo, hi) in enumerate(box)
            ]
            srcs = [l.inputs[0]]
        elif l.kind == "pool":
            s, w = l.pool_stride, l.pool_window
            src_box = [
                [lo * s[ax], hi * s[ax] + w[ax] - 1]
                for ax, (lo, hi) in enumerate(box)
            ]
            srcs = [l.inputs[0]]
        else:  # relu / add / concat: spatial identity
            src_box = box
            srcs = l.inputs
        for src in srcs:
            if src in boxes:
                boxes[src] = [
                    [min(a[0], b[0]), max(a[1], b[1])]
                    for a, b in zip(boxes[src], src_box)
                ]
            else:
                boxes[src] = [list(b) for b in src_box]
    return tuple(
        (max(0, lo), min(n - 1, hi))
        for (lo, hi), n in zip(input_box, net.cfg.dims)
    )


# ---------------------------------------------------------------------------
# model files (SSCM1)


def _layer_to_json(l: LayerSpec) -> dict:
    d = {
        "name": l.name, "kind": l.kind, "inputs": list(l.inputs),
        "trainable": l.trainable, "lr_ratio": l.lr_ratio,
    }
    if l.conv is not None:
        d["conv"] = asdict(l.conv)
    if l.pool_window is not None:
        d["pool_window"] = list(l.pool_window)
        d["pool_stride"] = list(l.pool_stride)
    if l.channel_range is not None:
        d["channel_range"] = list(l.channel_range)
    return d


def _layer_from_json(d: dict) -> LayerSpec:
    conv = None
    if "conv" in d:
        c = d["conv"]
        conv = ConvSpec(c["in_channels"], c["out_channels"], tuple(c["kernel_size"]),
                        tuple(c["stride"]), tuple(c["pad"]), tuple(c["dilation"]))
    return LayerSpec(
        name=d["name"], kind=d["kind"], inputs=list(d["inputs"]), conv=conv,
        pool_window=tuple(d["pool_window"]) if "pool_window" in d else None,
        pool_stride=tuple(d["pool_stride"]) if "pool_stride" in d else None,
        channel_range=tuple(d["channel_range"]) if "channel_range" in d else None,
        trainable=d["trainable"], lr_ratio=d["lr_ratio"],
    )


def save_model(net: NetworkGraph, path) -> None:
    config = {
        "variant": net.variant,
        "cfg": {
            "dims": list(net.cfg.dims), "n_classes": net.cfg.n_classes,
            "width_mult": net.cfg.width_mult, "residual": net.cfg.residual,
            "base_stem": net.cfg.base_stem, "base_trunk": net.cfg.base_trunk,
            "base_head": net.cfg.base_head,
        },
        "layers": [_layer_to_json(l) for l in net.layers],
    }
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    blocks = []
    for name in sorted(net.params):
        for part in ("w", "b"):
            blob = vxt.tensor_to_bytes(net.params[name][part])
            bname = f"{name}.{part}".encode()
            blocks.append(struct.pack("<H", len(bname)) + bname
                          + struct.pack("<I", len(blob)) + blob)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC + struct.pack("<BI", MODEL_VERSION, len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(blocks)))
        for b in blocks:
            f.write(b)


def load_model(path) -> NetworkGraph:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] != MODEL_MAGIC:
        raise ModelFormatError("bad magic; not an SSCM1 model file")
    version, cfg_len = struct.unpack_from("<BI", buf, 5)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = 10
    config = json.loads(buf[off : off + cfg_len].decode())
    off += cfg_len
    (n_blocks,) = struct.unpack_from("<I", buf, off)
    off += 4
    c = config["cfg"]
    cfg = NetConfig(dims=tuple(c["dims"]), n_classes=c["n_classes"],
                    width_mult=c["width_mult"], residual=c["residual"],
                    base_stem=c["base_stem"], base_trunk=c["base_trunk"],
                    base_head=c["base_head"])
    net = NetworkGraph(variant=config["variant"], cfg=cfg,
                       layers=[_layer_from_json(d) for d in config["layers"]])
    for _ in range(n_blocks):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        bname = buf[off : off + nlen].decode()
        off += nlen
        (blen,) = struct.unpack_from("<I", buf, off)
        off += 4
        arr, end = vxt.tensor_from_bytes(buf, off)
        if end != off + blen:
            raise ModelFormatError(f"block {bname!r}: length mismatch")
        off += blen
        layer, part = bname.rsplit(".", 1)
        net.params.setdefault(layer, {})[part] = arr
    if off != len(buf):
        raise ModelFormatError("trailing bytes after parameter blocks")
    for l in net.conv_layers:
        if l.name not in net.params or set(net.params[l.name]) != {"w", "b"}:
            raise ModelFormatError(f"missing parameter block for layer {l.name!r}")
    return net
