"""Command-line surface: synth, encode, train, eval, predict, verify.

Configuration is a plain-text ``key=value`` file; command-line flags win
over file values. Every command logs its resolved configuration and is
deterministic given flags + seed. Exit codes: 0 ok, 1 usage, 2 data
error, 3 numerical failure.

``SSC_THREADS`` caps internal parallelism (0 or unset = automatic); it is
applied to the BLAS thread pools before numpy spins them up.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _apply_thread_cap():
    threads = os.environ.get("SSC_THREADS", "0")
    try:
        n = int(threads)
    except ValueError:
        n = 0
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


_apply_thread_cap()

import numpy as np  # noqa: E402  (after the thread cap on purpose)

from . import encodings, evaluation, networks, scene, training, verify, vxt  # noqa: E402
from .geometry import CameraIntrinsics, Pose, VoxelGrid  # noqa: E402


class CliError(Exception):
    def __init__(self, message, code=EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def load_config(path) -> dict[str, str]:
    """Plain-text key=value file; '#' starts a comment."""
    cfg: dict[str, str] = {}
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    for ln in p.read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise CliError(f"malformed config line: {ln!r}")
        k, v = ln.split("=", 1)
        cfg[k.strip()] = v.strip()
    return cfg


def resolve(cfg: dict[str, str], args, keys: dict[str, type]) -> dict:
    """Merge config-file values with flags; flags win. Prints the result."""
    out = {}
    for key, typ in keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in cfg:
            try:
                out[key] = typ(cfg[key]) if typ is not bool else cfg[key] == "true"
            except ValueError as e:
                raise CliError(f"config key {key}: {e}") from e
    for key in sorted(out):
        print(f"config: {key}={out[key]}")
    return out


def _grid_from(cfg: dict[str, str]) -> VoxelGrid:
    if "grid_dims" in cfg:
        dims = tuple(int(v) for v in cfg["grid_dims"].split(","))
        origin = tuple(float(v) for v in cfg.get("grid_origin", "-1.92,-1.6,0.3").split(","))
        return VoxelGrid(origin=origin, voxel_size=float(cfg.get("voxel_size", "0.06")),
                         dims=dims)
    return scene.default_grid()


def _intrinsics_from(cfg: dict[str, str], required=False) -> CameraIntrinsics:
    keys = ("fx", "fy", "cx", "cy", "width", "height")
    if all(k in cfg for k in keys):
        return CameraIntrinsics(fx=float(cfg["fx"]), fy=float(cfg["fy"]),
                                cx=float(cfg["cx"]), cy=float(cfg["cy"]),
                                width=int(cfg["width"]), height=int(cfg["height"]))
    if required:
        missing = [k for k in keys if k not in cfg]
        raise CliError(f"intrinsics missing from config: {', '.join(missing)}")
    return scene.default_intrinsics()


def _pose_from(cfg: dict[str, str]) -> Pose:
    if "pose_rotation" in cfg:
        R = np.array([float(v) for v in cfg["pose_rotation"].split(",")]).reshape(3, 3)
        t = np.array([float(v) for v in cfg.get("pose_translation", "0,0,0").split(",")])
        return Pose(rotation=R, translation=t)
    return scene.default_pose()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    opts = resolve(cfg, args, {"seed": int, "count": int})
    seed = opts.get("seed", 7)
    count = opts.get("count", 4)
    if count < 1:
        raise CliError("count must be >= 1")
    grid = _grid_from(cfg)
    intr = _intrinsics_from(cfg)
    samples = scene.make_dataset(seed, count, grid, intr)
    scene.save_dataset(args.out, samples, seed=seed)
    print(f"wrote {count} samples to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    samples, _ = _load_dataset(args.dataset)
    out = Path(args.out or args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        ftsdf = encodings.ftsdf_encode(
            s.visibility, s.visibility == 1, s.grid, truncation=args.truncation)
        colour = encodings.colour_encode(s.rgb, s.depth, s.intr, s.pose,
                                         s.grid, s.visibility)
        vxt.save_tensor(out / f"{s.name}_ftsdf.vxt", ftsdf)
        vxt.save_tensor(out / f"{s.name}_colour.vxt", colour)
    print(f"encoded {len(samples)} samples into {out}")
    return EXIT_OK


def _load_dataset(path):
    try:
        return scene.load_dataset(path)
    except (FileNotFoundError, KeyError, ValueError) as e:
        raise CliError(f"cannot load dataset {path}: {e}") from e


def cmd_train(args) -> int:
    if args.variant not in networks.VARIANTS:
        raise CliError(f"unknown variant {args.variant!r}", EXIT_USAGE)
    if args.strategy not in training.STRATEGIES:
        raise CliError(f"unknown strategy {args.strategy!r}", EXIT_USAGE)
    if args.strategy == "surgery" and args.variant != "early":
        raise CliError("surgery requires --variant early "
                       "(first-layer splicing only applies to early fusion)")
    donor = None
    if args.strategy != "random":
        if not args.donor:
            raise CliError(f"strategy {args.strategy!r} requires --donor")
        donor = _load_model(args.donor)

    cfg_file = load_config(args.config)
    opts = resolve(cfg_file, args, {
        "lr": float, "momentum": float, "iterations": int, "seed": int,
        "width_mult": float, "mask_policy": str, "checkpoint_every": int,
    })
    samples, label_set = _load_dataset(args.dataset)
    net_cfg = networks.NetConfig(dims=samples[0].grid.dims,
                                 n_classes=len(label_set),
                                 width_mult=opts.get("width_mult", 1.0))
    try:
        hp = training.HyperParams(
            lr=opts.get("lr", 0.002), momentum=opts.get("momentum", 0.9),
            iterations=opts.get("iterations", 500), seed=opts.get("seed", 0),
            mask_policy=opts.get("mask_policy", "surface+occluded"),
            checkpoint_every=opts.get("checkpoint_every", 0),
        )
    except training.StrategyError as e:
        raise CliError(str(e)) from e

    net = networks.BUILDERS[args.variant](net_cfg)
    try:
        training.apply_strategy(net, args.strategy, donor, seed=hp.seed)
    except (training.StrategyError, networks.ShapeError) as e:
        raise CliError(str(e)) from e
    dataset = training.encode_dataset(samples, args.variant, net_cfg.n_classes)
    try:
        history = training.train(net, dataset, hp,
                                 checkpoint_dir=Path(args.out).parent)
    except training.TrainingDiverged as e:
        raise CliError(str(e), EXIT_NUMERIC) from e
    networks.save_model(net, args.out)
    history_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    training.write_history_csv(history_path, history)
    print(f"model: {args.out}")
    print(f"history: {history_path} ({len(history)} rows)")
    print(f"final loss: {history[-1].loss:.6g}")
    return EXIT_OK


def _load_model(path):
    p = Path(path)
    if not p.exists():
        raise CliError(f"model file not found: {p}")
    try:
        return networks.load_model(p)
    except networks.ModelFormatError as e:
        raise CliError(f"cannot load model {p}: {e}") from e


def cmd_eval(args) -> int:
    net = _load_model(args.model)
    samples, label_set = _load_dataset(args.dataset)
    if len(label_set) != net.cfg.n_classes:
        raise CliError(
            f"dataset has {len(label_set)} labels, model expects {net.cfg.n_classes}")
    dataset = training.encode_dataset(samples, net.variant, net.cfg.n_classes)
    report = evaluation.evaluate_dataset(net, dataset, label_set.names,
                                         full_volume=args.full_volume)
    print(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"report csv: {args.csv}")
    if report.has_nan():
        raise CliError("evaluation produced a non-finite metric", EXIT_NUMERIC)
    return EXIT_OK


_PALETTE_SEED = 1234


def class_palette(n_classes: int) -> np.ndarray:
    """One fixed colour per class, deterministic across runs."""
    rng = np.random.default_rng(_PALETTE_SEED)
    return rng.integers(40, 256, (n_classes, 3)).astype(np.uint8)


def write_ply(path, labels_lowres: np.ndarray, grid: VoxelGrid,
              n_classes: int) -> int:
    """ASCII PLY with one coloured vertex per occupied voxel; returns count."""
    palette = class_palette(n_classes)
    factor = grid.dims[0] // labels_lowres.shape[0]
    vs = grid.voxel_size * factor
    occupied = np.argwhere(labels_lowres != 0)
    ox, oy, oz = grid.origin
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(occupied)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for iz, iy, ix in occupied:
        c = palette[labels_lowres[iz, iy, ix]]
        x = ox + (ix + 0.5) * vs
        y = oy + (iy + 0.5) * vs
        z = oz + (iz + 0.5) * vs
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")
    return len(occupied)


def cmd_predict(args) -> int:
    net = _load_model(args.model)
    cfg = load_config(args.config)
    intr = _intrinsics_from(cfg, required=True)
    pose = _pose_from(cfg)
    grid = _grid_from(cfg)
    if grid.dims != net.cfg.dims:
        raise CliError(f"grid dims {grid.dims} != model input dims {net.cfg.dims}")

    depth = scene.load_depth_png(args.depth, max_range=float(cfg.get("max_range", "10")))
    from . import geometry
    visibility = geometry.classify_visibility(depth, intr, pose, grid)
    surface = visibility == geometry.VISIBLE_SURFACE
    ftsdf = encodings.ftsdf_encode(visibility, surface, grid)
    if net.variant == "depth":
        enc = ftsdf
    else:
        if not args.rgb:
            raise CliError(f"variant {net.variant!r} requires --rgb")
        from PIL import Image
        rgb = np.asarray(Image.open(args.rgb).convert("RGB"))
        colour = encodings.colour_encode(rgb, depth, intr, pose, grid, visibility)
        enc = colour if net.variant == "colour" else encodings.early_fusion_input(ftsdf, colour)

    labels = training.predict(net, enc)
    vxt.save_tensor(args.out, labels.astype(np.float32))
    print(f"label volume: {args.out} ({int((labels != 0).sum())} occupied voxels)")
    if args.ply:
        n = write_ply(args.ply, labels, grid, net.cfg.n_classes)
        print(f"ply: {args.ply} ({n} vertices)")
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = verify.run_all(report=print)
    if not ok:
        raise CliError("verification failed", EXIT_NUMERIC)
    print("all verification suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="voxssc",
                description="semantic scene completion on synthetic RGB-D scenes")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("encode", help="write fTSDF/colour volumes for a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out")
    sp.add_argument("--truncation", type=float, default=4.0)
    sp.set_defaults(fn=cmd_encode)

    sp = sub.add_parser("train", help="train a network variant")
    sp.add_argument("--variant", required=True)
    sp.add_argument("--strategy", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--donor")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--history")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--width-mult", dest="width_mult", type=float)
    sp.add_argument("--mask-policy", dest="mask_policy")
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a model on a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--full-volume", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("predict", help="predict a label volume from RGB + depth")
    sp.add_argument("--model", required=True)
    sp.add_argument("--depth", required=True)
    sp.add_argument("--rgb")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ply")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("verify", help="run gradient and oracle suites")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
