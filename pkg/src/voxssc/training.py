"""Training strategies, the SGD loop and voxel-label prediction.

Strategies: random initialization, feature learning (donor blocks frozen),
fine tuning (donor blocks at a 0.2 learning-rate ratio) and surgery
(spliced first layer, then fine-tuning flags). Loss is computed at the
network's 1/4 output resolution against majority-vote-downsampled ground
truth, under a configurable visibility mask.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encodings, evaluation, networks, ops
from .geometry import OCCLUDED, OUTSIDE_FRUSTUM, VISIBLE_SURFACE
from .networks import NetworkGraph
from .scene import Sample

log = logging.getLogger(__name__)

STRATEGIES = ("random", "feature", "finetune", "surgery")
FINE_TUNE_RATIO = 0.2  # donor-block learning-rate ratio relative to new layers

MASK_POLICIES = ("surface+occluded", "surface+occluded+free")


class StrategyError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, sample: str):
        super().__init__(f"non-finite loss at iteration {iteration} on sample {sample!r}")
        self.iteration = iteration
        self.sample = sample


@dataclass
class HyperParams:
    # defaults found stable for the desk-scale synthetic scenes; the
    # per-class-averaged loss gives rare classes large per-voxel gradients,
    # which blows up round-robin momentum SGD at higher rates
    lr: float = 0.002
    momentum: float = 0.9
    iterations: int = 500
    batch_size: int = 1
    seed: int = 0
    mask_policy: str = "surface+occluded"
    class_weights: np.ndarray | None = None
    checkpoint_every: int = 0  # 0 = no periodic checkpoints
    truncation: float = 4.0

    def __post_init__(self):
        if self.lr <= 0:
            raise StrategyError("learning rate must be positive")
        if self.iterations < 1:
            raise StrategyError("iterations must be >= 1")
        if self.batch_size < 1:
            raise StrategyError("batch size must be >= 1")
        if self.mask_policy not in MASK_POLICIES:
            raise StrategyError(f"unknown mask policy {self.mask_policy!r}")


# ---------------------------------------------------------------------------
# label / mask downsampling (network output lives at 1/4 resolution)


def downsample_majority(volume: np.ndarray, factor: int = 4,
                        n_values: int | None = None) -> np.ndarray:
    """Majority vote over factor^3 blocks; ties go to the lowest value."""
    D, H, W = volume.shape
    if any(d % factor for d in (D, H, W)):
        raise ops.ShapeError(f"dims {volume.shape} not divisible by {factor}")
    n_values = n_values or int(volume.max()) + 1
    blocks = volume.reshape(D // factor, factor, H // factor, factor,
                            W // factor, factor)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(-1, factor ** 3)
    counts = np.zeros((blocks.shape[0], n_values), dtype=np.int64)
    rows = np.repeat(np.arange(blocks.shape[0]), factor ** 3)
    np.add.at(counts, (rows, blocks.ravel()), 1)
    # argmax first-occurrence = lowest value on ties
    return counts.argmax(axis=1).astype(volume.dtype).reshape(
        D // factor, H // factor, W // factor)


def loss_mask(visibility: np.ndarray, policy: str, factor: int = 4) -> np.ndarray:
    """Which low-resolution voxels contribute to the loss.

    Default is occluded space (including out-of-frustum, treated as
    occluded) plus the visible surface; the +free policy also scores
    observed free space. The full-resolution mask is reduced by block-any,
    so a block containing any contributing voxel is supervised.
    """
    m = (
        (visibility == OCCLUDED)
        | (visibility == OUTSIDE_FRUSTUM)
        | (visibility == VISIBLE_SURFACE)
    )
    if policy == "surface+occluded+free":
        m = np.ones_like(m, dtype=bool)
    D, H, W = m.shape
    return (
        m.reshape(D // factor, factor, H // factor, factor, W // factor, factor)
        .any(axis=(1, 3, 5))
    )


@dataclass
class EncodedSample:
    """A dataset sample with its network input and low-res supervision."""

    name: str
    inputs: dict[str, np.ndarray] = field(default_factory=dict)  # variant -> tensor
    labels_lowres: np.ndarray = None
    visibility_lowres: np.ndarray = None
    visibility_full: np.ndarray = None


def encode_sample(sample: Sample, variant: str, truncation: float = 4.0) -> np.ndarray:
    """Build the network input volume for one variant from a raw sample."""
    surface = sample.visibility == VISIBLE_SURFACE
    ftsdf = encodings.ftsdf_encode(sample.visibility, surface, sample.grid,
                                   truncation=truncation)
    if variant == "depth":
        return ftsdf
    colour = encodings.colour_encode(sample.rgb, sample.depth, sample.intr,
                                     sample.pose, sample.grid, sample.visibility)
    if variant == "colour":
        return colour
    return encodings.early_fusion_input(ftsdf, colour)


def encode_dataset(samples: list[Sample], variant: str, n_classes: int,
                   truncation: float = 4.0) -> list[EncodedSample]:
    out = []
    for s in samples:
        enc = EncodedSample(name=s.name)
        enc.inputs[variant] = encode_sample(s, variant, truncation)
        enc.labels_lowres = downsample_majority(s.labels, 4, n_values=n_classes)
        enc.visibility_lowres = downsample_majority(s.visibility, 4, n_values=4)
        enc.visibility_full = s.visibility
        out.append(enc)
    return out


# ---------------------------------------------------------------------------
# strategies


def apply_strategy(net: NetworkGraph, strategy: str,
                   donor: NetworkGraph | None = None,
                   seed: int = 0) -> NetworkGraph:
    """Set parameters, trainability flags and per-block lr ratios in place.

    Donor-matched blocks are those whose name and shape both exist in the
    donor; everything else counts as a new layer (ratio 1, random init).
    """
    if strategy not in STRATEGIES:
        raise StrategyError(f"unknown strategy {strategy!r}")
    if strategy != "random" and donor is None:
        raise StrategyError(f"strategy {strategy!r} requires a donor model")
    if strategy == "surgery" and net.variant != "early":
        raise StrategyError("surgery is only valid for early-fusion nets")

    rng = np.random.default_rng(seed)
    networks.init_params(net, rng)
    for l in net.layers:
        l.trainable = True
        l.lr_ratio = 1.0
    if strategy == "random":
        return net

    if strategy == "surgery":
        networks.surgery_init(net, donor, seed)
        for l in net.conv_layers:
            if l.name != "conv_in":
                l.lr_ratio = FINE_TUNE_RATIO
        return net

    for l in net.conv_layers:
        dp = donor.params.get(l.name)
        if dp is None or dp["w"].shape != l.conv.param_shapes()[0]:
            continue  # new layer: fresh random init, ratio 1
        net.params[l.name] = {"w": dp["w"].copy(), "b": dp["b"].copy()}
        if strategy == "feature":
            l.trainable = False
        else:  # finetune
            l.lr_ratio = FINE_TUNE_RATIO
    return net


# ---------------------------------------------------------------------------
# the loop


@dataclass
class HistoryRow:
    iteration: int
    loss: float
    completion_iou: float
    semantic_iou: float


def write_history_csv(path, history: list[HistoryRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "completion_iou", "mean_semantic_iou"])
        for row in history:
            w.writerow([row.iteration, f"{row.loss:.8g}",
                        f"{row.completion_iou:.6g}", f"{row.semantic_iou:.6g}"])


def train(net: NetworkGraph, dataset: list[EncodedSample], hp: HyperParams,
          checkpoint_dir=None) -> list[HistoryRow]:
    """Momentum SGD over the dataset in round-robin order; deterministic.

    Returns per-iteration history (loss plus train completion / mean
    semantic IoU of the current sample). Aborts with TrainingDiverged on a
    non-finite loss.
    """
    if not dataset:
        raise StrategyError("dataset must not be empty")
    n_cls = net.cfg.n_classes
    velocity = {
        name: {k: np.zeros_like(v) for k, v in p.items()}
        for name, p in net.params.items()
    }
    trainable = {l.name: (l.trainable, l.lr_ratio) for l in net.conv_layers}
    history: list[HistoryRow] = []
    acc_grads = None
    for it in range(hp.iterations):
        sample = dataset[it % len(dataset)]
        x = sample.inputs[net.variant]
        mask = loss_mask(sample.visibility_full, hp.mask_policy)
        cache: dict = {}
        scores = networks.forward(net, x, cache)
        loss, grad_scores = ops.softmax_cross_entropy(
            scores, sample.labels_lowres, mask, hp.class_weights)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, sample.name)
        param_grads, _ = networks.backward(net, cache, grad_scores)

        if hp.batch_size > 1:
            if acc_grads is None:
                acc_grads = {k: [gw.copy(), gb.copy()] for k, (gw, gb) in param_grads.items()}
            else:
                for k, (gw, gb) in param_grads.items():
                    acc_grads[k][0] += gw
                    acc_grads[k][1] += gb
            if (it + 1) % hp.batch_size == 0:
                _sgd_update(net, velocity, acc_grads, trainable, hp, scale=1.0 / hp.batch_size)
                acc_grads = None
        else:
            _sgd_update(net, velocity, param_grads, trainable, hp)

        pred = scores.argmax(axis=0).astype(np.int32)
        comp = evaluation.iou_completion(
            pred, sample.labels_lowres,
            (sample.visibility_lowres == OCCLUDED)
            | (sample.visibility_lowres == OUTSIDE_FRUSTUM))
        sem = evaluation.iou_semantic(pred, sample.labels_lowres, mask, n_cls).mean_iou
        history.append(HistoryRow(it, float(loss),
                                  float("nan") if comp is None else comp, sem))

        if checkpoint_dir and hp.checkpoint_every and (it + 1) % hp.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"checkpoint_{it + 1:06d}.sscm"
            networks.save_model(net, path)
            log.info("checkpoint written: %s", path)
    return history


def _sgd_update(net, velocity, param_grads, trainable, hp: HyperParams, scale=1.0):
    for name, (gw, gb) in param_grads.items():
        is_trainable, ratio = trainable[name]
        if not is_trainable:
            continue
        p, v = net.params[name], velocity[name]
        p["w"], v["w"] = ops.sgd_step(p["w"], gw * scale, v["w"], hp.lr,
                                      hp.momentum, ratio)
        p["b"], v["b"] = ops.sgd_step(p["b"], gb * scale, v["b"], hp.lr,
                                      hp.momentum, ratio)


def predict(net: NetworkGraph, encoded_input: np.ndarray) -> np.ndarray:
    """Per-voxel argmax label volume at the network's output resolution.

    Softmax is monotone, so the argmax is taken on raw scores; ties go to
    the lowest class index (numpy argmax first-occurrence rule).
    """
    scores = networks.forward(net, encoded_input)
    return scores.argmax(axis=0).astype(np.int32)
