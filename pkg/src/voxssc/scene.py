"""Synthetic desk-scale supervision: box scenes, voxelization, ray-cast views.

Scenes are lists of axis-aligned boxes with a class label and an RGB
albedo. Voxelization fills surface and interior voxels alike (space-carving
semantics) by a voxel-center membership test; rendering is per-pixel
ray/AABB slab intersection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry, vxt
from .geometry import CameraIntrinsics, DepthMap, Pose, VoxelGrid

log = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


# SSCNet-style label set: 7 object categories plus window/wall/floor/ceiling
# and free space at index 0 (12 labels total)
DEFAULT_LABELS = (
    "free", "ceiling", "floor", "wall", "window",
    "chair", "bed", "sofa", "table", "tvs", "furniture", "objects",
)

FURNITURE_CLASSES = ("chair", "bed", "sofa", "table", "tvs", "furniture", "objects")


@dataclass(frozen=True)
class LabelSet:
    names: tuple[str, ...] = DEFAULT_LABELS

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise SceneError("label names must be unique")
        if self.names[0] != "free":
            raise SceneError("index 0 is reserved for free space")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int
    albedo: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if not all(h > l for l, h in zip(lo, hi)):
            raise SceneError(f"box must have positive extent: {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "albedo", tuple(int(c) for c in self.albedo))


@dataclass
class SceneSpec:
    boxes: list[Box] = field(default_factory=list)
    labels: LabelSet = field(default_factory=LabelSet)

    def add_box(self, lo, hi, label_name: str, albedo) -> None:
        self.boxes.append(Box(lo, hi, self.labels.index(label_name), albedo))


def voxelize_scene(scene: SceneSpec, grid: VoxelGrid) -> np.ndarray:
    """Label every voxel whose center lies inside or on a box (interior fill).

    Overlaps resolve later-primitive-wins; everything else is free space.
    Returns an int32 (D,H,W) volume.
    """
    labels = np.zeros(grid.dims, dtype=np.int32)
    centers = grid.voxel_centers()  # (D,H,W,3) world xyz
    for box in scene.boxes:
        lo = np.array(box.lo)
        hi = np.array(box.hi)
        inside = np.all((centers >= lo) & (centers <= hi), axis=-1)
        labels[inside] = box.label
    return labels


def _ray_box_hits(origins, dirs, lo, hi):
    """Vectorized slab test. Returns entry parameter t (inf where missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # parallel rays: slab degenerates, inside iff origin between planes
    par = dirs == 0
    inside_slab = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    hit = (t_exit >= t_enter) & (t_exit > 0)
    t = np.where(t_enter > 0, t_enter, t_exit)  # t_enter <= 0: camera inside
    return np.where(hit, t, np.inf)


def render_view(scene: SceneSpec, intr: CameraIntrinsics, pose: Pose,
                max_range: float = 10.0):
    """Ray-cast the scene: returns (DepthMap, uint8 RGB image (H,W,3)).

    Depth is the distance along the optical axis to the nearest box; pixels
    with no hit within max_range get an invalid depth and a black pixel.
    """
    H, W = intr.height, intr.width
    u, v = np.meshgrid(np.arange(W), np.arange(H))
    dirs_cam = np.stack(
        [(u + 0.0 - intr.cx) / intr.fx, (v + 0.0 - intr.cy) / intr.fy,
         np.ones_like(u, dtype=np.float64)],
        axis=-1,
    )
    dirs = dirs_cam @ pose.rotation.T  # z_cam of a hit at parameter t is t
    origins = np.broadcast_to(pose.translation, dirs.shape)

    best_t = np.full((H, W), np.inf)
    best_box = np.full((H, W), -1, dtype=np.int64)
    inside_any = False
    for n, box in enumerate(scene.boxes):
        lo, hi = np.array(box.lo), np.array(box.hi)
        if np.all((pose.translation >= lo) & (pose.translation <= hi)):
            inside_any = True
        t = _ray_box_hits(origins, dirs, lo, hi)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_box = np.where(closer, n, best_box)
    if inside_any:
        log.warning("render_view: camera is inside a solid")

    valid = np.isfinite(best_t) & (best_t < max_range) & (best_t > 0)
    depth = np.where(valid, best_t, 0.0)
    rgb = np.zeros((H, W, 3), dtype=np.uint8)
    for n, box in enumerate(scene.boxes):
        rgb[valid & (best_box == n)] = box.albedo
    return DepthMap(depth=depth, valid=valid, max_range=max_range), rgb


# ---------------------------------------------------------------------------
# randomized room generator


def default_grid() -> VoxelGrid:
    # desk scale: 64x32x64 voxels at 6 cm => 3.84 x 1.92 x 3.84 m
    return VoxelGrid(origin=(-1.92, -1.60, 0.30), voxel_size=0.06, dims=(64, 32, 64))


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=80.0, fy=80.0, cx=40.0, cy=30.0, width=80, height=60)


def default_pose() -> Pose:
    # 1 m above the floor looking into the room, pitched slightly down
    # (world y points down, so "down" tilt rotates +z toward +y)
    theta = np.deg2rad(12.0)
    rot_x = np.array(
        [[1.0, 0.0, 0.0],
         [0.0, np.cos(theta), -np.sin(theta)],
         [0.0, np.sin(theta), np.cos(theta)]]
    )
    return Pose(rotation=rot_x, translation=np.array([0.0, -0.8, 0.0]))


def random_room(rng: np.random.Generator, labels: LabelSet | None = None) -> SceneSpec:
    """A floor, two walls and 1-4 furniture boxes with random classes/colours."""
    labels = labels or LabelSet()
    scene = SceneSpec(labels=labels)
    # floor spans 3 voxel rows of the default grid so 4x majority votes
    # cannot tie between floor and free space
    floor_y = 0.14
    far_z = float(rng.uniform(3.2, 4.0))
    side_x = float(rng.uniform(1.4, 1.85))
    scene.add_box((-2.0, floor_y, 0.0), (2.0, floor_y + 0.18, 4.2),
                  "floor", tuple(rng.integers(90, 170, 3)))
    scene.add_box((-2.0, -1.7, far_z), (2.0, floor_y, far_z + 0.2),
                  "wall", tuple(rng.integers(140, 220, 3)))
    scene.add_box((side_x, -1.7, 0.0), (side_x + 0.15, floor_y, 4.2),
                  "wall", tuple(rng.integers(140, 220, 3)))
    pose = default_pose()
    intr = default_intrinsics()
    for _ in range(int(rng.integers(1, 5))):
        cls = FURNITURE_CLASSES[int(rng.integers(len(FURNITURE_CLASSES)))]
        albedo = tuple(rng.integers(30, 256, 3))
        # resample until the box top centre projects into the view; a box the
        # camera cannot see at all would make the labels unlearnable
        for _ in range(50):
            sx, sy, sz = rng.uniform(0.3, 0.9, 3)
            cx = rng.uniform(-1.3, side_x - sx - 0.1)
            cz = rng.uniform(0.9, far_z - sz - 0.1)
            top_centre = (cx + sx / 2, floor_y - sy, cz + sz / 2)
            u, v, z = geometry.project(np.array(top_centre), intr, pose)
            if z > 0 and 4 <= u < intr.width - 4 and 4 <= v < intr.height - 4:
                break
        scene.add_box((cx, floor_y - sy, cz), (cx + sx, floor_y, cz + sz),
                      cls, albedo)
    return scene


@dataclass
class Sample:
    name: str
    rgb: np.ndarray  # (H,W,3) uint8
    depth: DepthMap
    labels: np.ndarray  # (D,H,W) int32
    visibility: np.ndarray  # (D,H,W) uint8
    grid: VoxelGrid
    intr: CameraIntrinsics
    pose: Pose


def make_dataset(seed: int, count: int, grid: VoxelGrid | None = None,
                 intr: CameraIntrinsics | None = None,
                 label_set: LabelSet | None = None,
                 max_range: float = 10.0) -> list[Sample]:
    """Deterministic-in-seed list of rendered, voxelized room samples."""
    if count < 1:
        raise SceneError("count must be >= 1")
    grid = grid or default_grid()
    intr = intr or default_intrinsics()
    label_set = label_set or LabelSet()
    rng = np.random.default_rng(seed)
    pose = default_pose()
    samples = []
    for n in range(count):
        scene = random_room(rng, label_set)
        depth, rgb = render_view(scene, intr, pose, max_range=max_range)
        labels = voxelize_scene(scene, grid)
        visibility = geometry.classify_visibility(depth, intr, pose, grid)
        samples.append(Sample(
            name=f"sample_{n:04d}", rgb=rgb, depth=depth, labels=labels,
            visibility=visibility, grid=grid, intr=intr, pose=pose,
        ))
    return samples


# ---------------------------------------------------------------------------
# on-disk formats


def save_scene(path, scene: SceneSpec) -> None:
    """One primitive per line: class min_xyz max_xyz rgb."""
    lines = ["# class xmin ymin zmin xmax ymax zmax r g b"]
    for b in scene.boxes:
        name = scene.labels.names[b.label]
        lines.append(" ".join(
            [name] + [f"{v:.6g}" for v in (*b.lo, *b.hi)] + [str(c) for c in b.albedo]
        ))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path, labels: LabelSet | None = None) -> SceneSpec:
    labels = labels or LabelSet()
    scene = SceneSpec(labels=labels)
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 10:
            raise SceneError(f"malformed scene line: {ln!r}")
        name, nums = parts[0], [float(x) for x in parts[1:7]]
        scene.add_box(nums[0:3], nums[3:6], name, [int(x) for x in parts[7:10]])
    return scene


def _write_depth_png(path, depth: DepthMap) -> None:
    mm = np.where(depth.valid, np.round(depth.depth * 1000.0), 0).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path, max_range: float = 10.0) -> DepthMap:
    """16-bit single-channel PNG in millimeters; 0 = invalid."""
    mm = np.asarray(Image.open(path), dtype=np.uint16)
    depth = mm.astype(np.float64) / 1000.0
    valid = (mm > 0) & (depth < max_range)
    return DepthMap(depth=np.where(valid, depth, 0.0), valid=valid, max_range=max_range)


def save_dataset(out_dir, samples: list[Sample], label_set: LabelSet | None = None,
                 seed: int | None = None) -> None:
    """PNG + VXT1 files per sample plus a JSON manifest."""
    if not samples:
        raise SceneError("dataset must contain at least one sample")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label_set = label_set or LabelSet()
    manifest = {
        "format": "voxssc-dataset-v1",
        "seed": seed,
        "labels": list(label_set.names),
        "samples": [],
    }
    for s in samples:
        Image.fromarray(s.rgb).save(out / f"{s.name}_rgb.png")
        _write_depth_png(out / f"{s.name}_depth.png", s.depth)
        vxt.save_tensor(out / f"{s.name}_labels.vxt", s.labels.astype(np.float32))
        vxt.save_tensor(out / f"{s.name}_visibility.vxt",
                        s.visibility.astype(np.float32))
        manifest["samples"].append(s.name)
        first = s
    g, i, p = first.grid, first.intr, first.pose
    manifest["grid"] = {"origin": list(g.origin), "voxel_size": g.voxel_size,
                        "dims": list(g.dims)}
    manifest["intrinsics"] = {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
                              "width": i.width, "height": i.height}
    manifest["pose"] = {"rotation": p.rotation.tolist(),
                        "translation": p.translation.tolist()}
    manifest["max_range"] = first.depth.max_range
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(in_dir) -> tuple[list[Sample], LabelSet]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    label_set = LabelSet(tuple(manifest["labels"]))
    g = manifest["grid"]
    grid = VoxelGrid(origin=tuple(g["origin"]), voxel_size=g["voxel_size"],
                     dims=tuple(g["dims"]))
    i = manifest["intrinsics"]
    intr = CameraIntrinsics(**i)
    p = manifest["pose"]
    pose = Pose(rotation=np.array(p["rotation"]),
                translation=np.array(p["translation"]))
    max_range = manifest.get("max_range", 10.0)
    samples = []
    for name in manifest["samples"]:
        rgb = np.asarray(Image.open(src / f"{name}_rgb.png"))
        depth = load_depth_png(src / f"{name}_depth.png", max_range=max_range)
        labels = vxt.load_tensor(src / f"{name}_labels.vxt").astype(np.int32)
        visibility = vxt.load_tensor(src / f"{name}_visibility.vxt").astype(np.uint8)
        samples.append(Sample(name=name, rgb=rgb, depth=depth, labels=labels,
                              visibility=visibility, grid=grid, intr=intr, pose=pose))
    return samples, label_set
