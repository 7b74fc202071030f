"""IoU metrics: scene completion and per-class semantic completion.

Completion IoU binarizes both volumes (occupied = any non-free class) and
scores only occluded voxels. Semantic IoU is computed per class with
dataset-level count accumulation (counts summed across samples before the
division), then averaged over classes present in either volume.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import OCCLUDED, OUTSIDE_FRUSTUM, VISIBLE_SURFACE
from .ops import ShapeError

FREE_SPACE = 0


@dataclass
class SemanticIoU:
    per_class: dict[int, float]  # class index -> IoU, classes with empty union omitted
    mean_iou: float


@dataclass
class IoUCounts:
    """Accumulable intersection/union counts for both metrics."""

    n_classes: int
    inter: np.ndarray = None
    union: np.ndarray = None
    comp_inter: int = 0
    comp_union: int = 0

    def __post_init__(self):
        if self.inter is None:
            self.inter = np.zeros(self.n_classes, dtype=np.int64)
            self.union = np.zeros(self.n_classes, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
            occluded: np.ndarray) -> None:
        if pred.shape != gt.shape or pred.shape != mask.shape:
            raise ShapeError(
                f"pred {pred.shape}, gt {gt.shape}, mask {mask.shape} must share a grid"
            )
        pm, gm = pred[mask], gt[mask]
        for c in range(1, self.n_classes):
            p, g = pm == c, gm == c
            self.inter[c] += int((p & g).sum())
            self.union[c] += int((p | g).sum())
        po = pred[occluded] != FREE_SPACE
        go = gt[occluded] != FREE_SPACE
        self.comp_inter += int((po & go).sum())
        self.comp_union += int((po | go).sum())

    def semantic(self) -> SemanticIoU:
        per_class = {
            c: self.inter[c] / self.union[c]
            for c in range(1, self.n_classes)
            if self.union[c] > 0
        }
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return SemanticIoU(per_class=per_class, mean_iou=mean)

    def completion(self) -> float | None:
        if self.comp_union == 0 and self.comp_inter == 0:
            return None  # undefined: nothing occupied under the occluded mask
        return self.comp_inter / self.comp_union


def iou_semantic(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                 n_classes: int) -> SemanticIoU:
    """Per-class IoU over masked voxels (free space excluded from classes)."""
    counts = IoUCounts(n_classes)
    counts.add(pred, gt, mask, occluded=np.zeros_like(mask, dtype=bool))
    return counts.semantic()


def iou_completion(pred: np.ndarray, gt: np.ndarray,
                   occluded: np.ndarray) -> float | None:
    """Binary-occupancy IoU over occluded voxels; None when undefined."""
    if pred.shape != gt.shape or pred.shape != occluded.shape:
        raise ShapeError(
            f"pred {pred.shape}, gt {gt.shape}, occluded {occluded.shape} must share a grid"
        )
    if not occluded.any():
        return None
    counts = IoUCounts(2)
    counts.add((pred != FREE_SPACE).astype(np.int32),
               (gt != FREE_SPACE).astype(np.int32),
               np.zeros_like(occluded, dtype=bool), occluded)
    return counts.completion()


def evaluation_masks(visibility_lowres: np.ndarray, gt_lowres: np.ndarray,
                     full_volume: bool = False):
    """(semantic mask, occluded mask) for one sample.

    Default semantic mask restricts to occluded space plus ground-truth
    occupied voxels plus the visible surface; full_volume scores every
    voxel instead.
    """
    occluded = (visibility_lowres == OCCLUDED) | (visibility_lowres == OUTSIDE_FRUSTUM)
    if full_volume:
        sem = np.ones_like(occluded, dtype=bool)
    else:
        sem = occluded | (gt_lowres != FREE_SPACE) | (visibility_lowres == VISIBLE_SURFACE)
    return sem, occluded


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    completion_iou: float | None
    per_class: dict[int, float]
    mean_semantic_iou: float
    per_sample: list[tuple[str, float, float]] = field(default_factory=list)

    def has_nan(self) -> bool:
        vals = [self.mean_semantic_iou, *self.per_class.values()]
        if self.completion_iou is not None:
            vals.append(self.completion_iou)
        return any(not np.isfinite(v) for v in vals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "value"])
        w.writerow(["completion_iou",
                    "undefined" if self.completion_iou is None
                    else f"{self.completion_iou:.6g}"])
        for c, name in enumerate(self.class_names):
            if c == FREE_SPACE:
                continue
            val = self.per_class.get(c)
            w.writerow([f"iou_{name}", "absent" if val is None else f"{val:.6g}"])
        w.writerow(["mean_semantic_iou", f"{self.mean_semantic_iou:.6g}"])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'metric':<24} value"]
        comp = ("undefined" if self.completion_iou is None
                else f"{self.completion_iou:.4f}")
        lines.append(f"{'completion IoU':<24} {comp}")
        for c, name in enumerate(self.class_names):
            if c == FREE_SPACE:
                continue
            val = self.per_class.get(c)
            lines.append(f"{'IoU ' + name:<24} "
                         + ("absent" if val is None else f"{val:.4f}"))
        lines.append(f"{'mean semantic IoU':<24} {self.mean_semantic_iou:.4f}")
        return "\n".join(lines)


def evaluate_dataset(net, dataset, class_names, full_volume: bool = False) -> EvalReport:
    """Accumulate counts over encoded samples, then compute both metrics."""
    from . import networks  # local import to avoid a cycle

    n_cls = net.cfg.n_classes
    counts = IoUCounts(n_cls)
    per_sample = []
    for enc in dataset:
        scores = networks.forward(net, enc.inputs[net.variant])
        pred = scores.argmax(axis=0).astype(np.int32)
        sem_mask, occ_mask = evaluation_masks(enc.visibility_lowres,
                                              enc.labels_lowres, full_volume)
        counts.add(pred, enc.labels_lowres, sem_mask, occ_mask)
        one = IoUCounts(n_cls)
        one.add(pred, enc.labels_lowres, sem_mask, occ_mask)
        comp = one.completion()
        per_sample.append((enc.name,
                           float("nan") if comp is None else comp,
                           one.semantic().mean_iou))
    sem = counts.semantic()
    return EvalReport(class_names=tuple(class_names),
                      completion_iou=counts.completion(),
                      per_class=sem.per_class,
                      mean_semantic_iou=sem.mean_iou,
                      per_sample=per_sample)
