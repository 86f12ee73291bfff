"""Multi-branch losses, hard negative mining, preprocessing and the training loop."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from rich.console import Console

from mbfcn_cli.anchors import (
    POSITIVE,
    AnchorSet,
    Box,
    MatchResult,
    anchors_for_maps,
    flatten_cls,
    flatten_reg,
    match,
    unflatten_cls,
    unflatten_reg,
)
from mbfcn_cli.constants import (
    DEFAULT_BASE_LR,
    DEFAULT_BATCH_PER_BRANCH,
    DEFAULT_CHECKPOINT_EVERY,
    DEFAULT_FLIP_PROB,
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
    DEFAULT_LOG_EVERY,
    DEFAULT_LR_DECAY_EVERY,
    DEFAULT_LR_DECAY_FACTOR,
    DEFAULT_MAX_ITERS,
    DEFAULT_MAX_SIDE,
    DEFAULT_MOMENTUM,
    DEFAULT_NEG_IOU,
    DEFAULT_POS_IOU,
    DEFAULT_SEED,
    DEFAULT_WEIGHT_DECAY,
    PAD_MULTIPLE,
    PIXEL_MEAN,
    PIXEL_STD,
    POSITIVE_FRACTION,
    PROB_CLAMP,
    SEED_OFFSET_FLIP,
    SEED_OFFSET_INIT,
    SEED_OFFSET_OHEM,
    SEED_OFFSET_SAMPLING,
)
from mbfcn_cli.errors import InputError, NumericError
from mbfcn_cli.model import ModelConfig, ModelParams, build_model, forward
from mbfcn_cli.tensor import Tape, Tensor, _record, sgd_step, softmax_pair
from mbfcn_cli.utils import derive_rng
from mbfcn_cli.validators import validate_train_config

console = Console(stderr=True)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and sampling hyper-parameters; ``lambdas``/``gammas`` hold one value or one per branch."""

    base_lr: float = DEFAULT_BASE_LR
    lr_decay_every: int = DEFAULT_LR_DECAY_EVERY
    lr_decay_factor: float = DEFAULT_LR_DECAY_FACTOR
    max_iters: int = DEFAULT_MAX_ITERS
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_per_branch: int = DEFAULT_BATCH_PER_BRANCH
    pos_iou: float = DEFAULT_POS_IOU
    neg_iou: float = DEFAULT_NEG_IOU
    flip_prob: float = DEFAULT_FLIP_PROB
    max_side: int = DEFAULT_MAX_SIDE
    lambdas: Tuple[float, ...] = (DEFAULT_LAMBDA,)
    gammas: Tuple[float, ...] = (DEFAULT_GAMMA,)
    seed: int = DEFAULT_SEED
    log_every: int = DEFAULT_LOG_EVERY
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY

    def lambda_for(self, branch: int) -> float:
        return self.lambdas[branch] if len(self.lambdas) > 1 else self.lambdas[0]

    def gamma_for(self, branch: int) -> float:
        return self.gammas[branch] if len(self.gammas) > 1 else self.gammas[0]


@dataclass
class BranchSample:
    """Anchors chosen for one branch with their labels, targets and current predictions."""

    indices: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    probs: np.ndarray
    preds: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def num_pos(self) -> int:
        return int((self.labels == POSITIVE).sum())

    @property
    def num_neg(self) -> int:
        return len(self) - self.num_pos

    @classmethod
    def empty(cls) -> "BranchSample":
        return cls(
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int8),
            np.zeros((0, 4)),
            np.zeros(0),
            np.zeros((0, 4)),
        )


@dataclass
class LossReport:
    """Per-branch normalized losses and sample counts, plus the weighted total."""

    cls: List[float] = field(default_factory=list)
    reg: List[float] = field(default_factory=list)
    num_pos: List[int] = field(default_factory=list)
    num_neg: List[int] = field(default_factory=list)
    total: float = 0.0


@dataclass
class Preprocessed:
    """Network-ready pixels, boxes in network space, the applied scale and flip."""

    pixels: np.ndarray
    gts: List[Box]
    scale: float
    flipped: bool


@dataclass
class TrainResult:
    params: ModelParams
    log: List[Tuple[float, ...]]
    losses: List[float]


def _clamp(prob):
    return np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)


def cls_loss(prob_face, label):
    """
    Negative log-likelihood of the face probability.

    Works elementwise on arrays. Probabilities are clamped to [1e-7, 1 - 1e-7].
    """
    p = _clamp(np.asarray(prob_face, dtype=np.float64))
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(loss) if loss.ndim == 0 else loss


def smooth_l1(x):
    """0.5 x^2 when |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    value = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(value) if value.ndim == 0 else value


def reg_loss(pred, target):
    """Smooth-L1 summed over the 4 deltas; rows are summed independently for (n, 4) input."""
    diff = np.asarray(target, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    value = smooth_l1(diff).sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def _branch_terms(sample: BranchSample) -> Tuple[float, float]:
    n = len(sample)
    if n == 0:
        return 0.0, 0.0
    is_pos = sample.labels == POSITIVE
    cls_sum = float(np.sum(cls_loss(sample.probs, is_pos)))
    reg_sum = float(np.sum(reg_loss(sample.preds[is_pos], sample.targets[is_pos]))) if is_pos.any() else 0.0
    return cls_sum / n, reg_sum / n


def total_loss(samples: Sequence[BranchSample], cfg: TrainConfig) -> LossReport:
    """
    Weighted multi-branch multi-task loss.

    L = sum_k gamma_k (cls_k + lambda_k reg_k), where both terms of branch k are
    sums over its sampled anchors divided by that branch's sample count and the
    regression term only covers positives. An empty branch contributes 0.
    """
    report = LossReport()
    for k, sample in enumerate(samples):
        if len(sample) == 0:
            console.print(f"⚠️  Branch {k + 1} has no sampled anchors; it contributes 0 to the loss")
        cls_k, reg_k = _branch_terms(sample)
        report.cls.append(cls_k)
        report.reg.append(reg_k)
        report.num_pos.append(sample.num_pos)
        report.num_neg.append(sample.num_neg)
        report.total += cfg.gamma_for(k) * (cls_k + cfg.lambda_for(k) * reg_k)
    return report


def multibranch_loss(
    probs: Sequence[Tensor],
    regs: Sequence[Tensor],
    samples: Sequence[BranchSample],
    anchor_sets: Sequence[AnchorSet],
    cfg: TrainConfig,
) -> Tuple[Tensor, LossReport]:
    """
    Record the total loss on the active tape.

    ``probs`` are softmax_pair outputs and ``regs`` raw regression maps, one of
    each per branch. The sample's ``probs``/``preds`` are refreshed from the maps
    before the loss is computed.

    Returns:
        (scalar (1, 1, 1, 1) tensor, LossReport)
    """
    for prob_map, reg_map, sample, anchors in zip(probs, regs, samples, anchor_sets):
        sample.probs = flatten_cls(prob_map.data, anchors.num_slots)[sample.indices].astype(np.float64)
        sample.preds = flatten_reg(reg_map.data, anchors.num_slots)[sample.indices].astype(np.float64)
    report = total_loss(samples, cfg)
    dtype = probs[0].dtype if probs else np.float64

    def adjoint(grad: np.ndarray):
        upstream = float(grad.reshape(()))
        grads = []
        for k, (prob_map, reg_map, sample, anchors) in enumerate(zip(probs, regs, samples, anchor_sets)):
            count = len(anchors)
            face_grad = np.zeros(count, dtype=np.float64)
            delta_grad = np.zeros((count, 4), dtype=np.float64)
            n = len(sample)
            if n:
                scale = upstream * cfg.gamma_for(k) / n
                is_pos = sample.labels == POSITIVE
                p = sample.probs
                inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
                d_prob = np.where(is_pos, -1.0 / np.maximum(p, PROB_CLAMP), 1.0 / np.maximum(1.0 - p, PROB_CLAMP))
                face_grad[sample.indices] = scale * np.where(inside, d_prob, 0.0)
                residual = np.clip(sample.preds - sample.targets, -1.0, 1.0)
                delta_grad[sample.indices[is_pos]] = scale * cfg.lambda_for(k) * residual[is_pos]
            _, _, map_h, map_w = prob_map.shape
            grads.append(unflatten_cls(face_grad, anchors.num_slots, map_h, map_w).astype(prob_map.dtype))
            grads.append(unflatten_reg(delta_grad, anchors.num_slots, map_h, map_w).astype(reg_map.dtype))
        return grads

    inputs = [t for pair in zip(probs, regs) for t in pair]
    out = Tensor(np.full((1, 1, 1, 1), report.total, dtype=dtype))
    return _record("multibranch_loss", inputs, out, adjoint), report


def ohem_sample(
    match_result: MatchResult,
    losses: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Choose the anchors of one branch's mini-batch.

    Positives are kept up to a quarter of ``batch_per_branch`` (random subset
    beyond that, returned sorted); the rest of the batch is filled with the
    highest-loss negatives. Ignored anchors are never chosen.

    Args:
        match_result: Labels from ``match``
        losses: Per-anchor classification loss under the current network
        cfg: Training configuration
        rng: Generator for positive subsampling

    Returns:
        Anchor indices, positives first
    """
    positives = match_result.positives
    cap = int(cfg.batch_per_branch * POSITIVE_FRACTION)
    if len(positives) > cap:
        positives = np.sort(rng.choice(positives, size=cap, replace=False))
    negatives = match_result.negatives
    room = cfg.batch_per_branch - len(positives)
    order = np.argsort(-np.asarray(losses)[negatives], kind="stable")
    hardest = negatives[order[:room]]
    return np.concatenate([positives, hardest]).astype(np.int64)


def sample_branch(
    match_result: MatchResult,
    prob_map: np.ndarray,
    reg_map: np.ndarray,
    anchors: AnchorSet,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> BranchSample:
    """Mine one branch's mini-batch from its current maps and wrap it as a BranchSample."""
    face = flatten_cls(prob_map, anchors.num_slots)
    losses = cls_loss(face, match_result.labels == POSITIVE)
    indices = ohem_sample(match_result, losses, cfg, rng)
    return BranchSample(
        indices=indices,
        labels=match_result.labels[indices],
        targets=match_result.targets[indices],
        probs=face[indices].astype(np.float64),
        preds=flatten_reg(reg_map, anchors.num_slots)[indices].astype(np.float64),
    )


def resize_image(pixels: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resize of a (1, c, h, w) array by ``scale`` (per channel, via Pillow float images)."""
    if scale == 1.0:
        return pixels
    _, channels, height, width = pixels.shape
    size = (max(1, int(round(width * scale))), max(1, int(round(height * scale))))
    resized = [
        np.asarray(Image.fromarray(pixels[0, c].astype(np.float32)).resize(size, Image.Resampling.BILINEAR))
        for c in range(channels)
    ]
    return np.stack(resized)[None].astype(pixels.dtype)


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Center [0, 1] pixels on PIXEL_MEAN and divide by PIXEL_STD (float32)."""
    return ((pixels - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


def pad_to_multiple(pixels: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Zero-pad right and bottom so height and width are multiples of ``multiple``."""
    _, _, height, width = pixels.shape
    pad_h = -height % multiple
    pad_w = -width % multiple
    if not pad_h and not pad_w:
        return pixels
    return np.pad(pixels, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))


def flip_boxes(gts: Sequence[Box], width: int) -> List[Box]:
    return [Box(width - b.x - b.w, b.y, b.w, b.h) for b in gts]


def preprocess(
    pixels: np.ndarray,
    gts: Sequence[Box],
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    multiple: int = PAD_MULTIPLE,
) -> Preprocessed:
    """
    Resize so the longer side is ``cfg.max_side``, normalize, randomly mirror, and zero-pad.

    Normalization happens before padding, so the padded border equals the
    pixel mean.

    Args:
        pixels: (1, 3, h, w) image in [0, 1]
        gts: Boxes in original pixels
        cfg: Training configuration (max_side, flip_prob)
        rng: Generator deciding the flip; no flip when None
        multiple: Spatial multiple of the padded output

    Returns:
        Preprocessed
    """
    _, _, height, width = pixels.shape
    scale = cfg.max_side / max(height, width)
    resized = normalize_pixels(resize_image(pixels, scale))
    boxes = [b.scaled(scale) for b in gts]
    flipped = rng is not None and cfg.flip_prob > 0 and rng.random() < cfg.flip_prob
    if flipped:
        resized = resized[..., ::-1]
        boxes = flip_boxes(boxes, resized.shape[3])
    return Preprocessed(np.ascontiguousarray(pad_to_multiple(resized, multiple)), boxes, scale, flipped)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule: base_lr * decay_factor ** (iteration // decay_every)."""
    return cfg.base_lr * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


def _format_row(row: Tuple[float, ...]) -> str:
    iteration, lr, *losses = row
    return "\t".join([str(int(iteration)), f"{lr:.6g}"] + [f"{v:.6f}" for v in losses])


def train_step(
    pixels: np.ndarray,
    gts: Sequence[Box],
    model_cfg: ModelConfig,
    params: ModelParams,
    cfg: TrainConfig,
    ohem_rng: np.random.Generator,
) -> Tuple[LossReport, Tape]:
    """
    Forward, match, mine and record the loss for one preprocessed image.

    Returns the report and the tape holding the loss as its last entry.
    """
    image = Tensor(pixels.astype(np.float32, copy=False))
    with Tape() as tape:
        outputs = forward(image, model_cfg, params)
        probs = [softmax_pair(cls_map) for cls_map, _ in outputs]
        regs = [reg_map for _, reg_map in outputs]
        anchor_sets = anchors_for_maps(model_cfg.branches, [p.shape[2:] for p in probs])
        samples = []
        for prob_map, reg_map, anchors in zip(probs, regs, anchor_sets):
            matched = match(anchors, gts, cfg.pos_iou, cfg.neg_iou)
            samples.append(sample_branch(matched, prob_map.data, reg_map.data, anchors, cfg, ohem_rng))
        _, report = multibranch_loss(probs, regs, samples, anchor_sets, cfg)
    return report, tape


def train(
    dataset: Sequence,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log_path: Optional[Path] = None,
    on_checkpoint: Optional[Callable[[ModelParams, int], None]] = None,
) -> TrainResult:
    """
    Train a model from scratch with one image per iteration.

    Args:
        dataset: AnnotatedImage items (``pixels`` and ``gts``)
        model_cfg: Detector configuration
        cfg: Training configuration
        log_path: Tab-separated log destination (iter, lr, cls/reg per branch)
        on_checkpoint: Called with (params, iteration) every
            ``checkpoint_every`` iterations and once at the end

    Returns:
        TrainResult with the trained parameters, the log rows and every total loss

    Raises:
        InputError: empty dataset
        NumericError: non-finite loss, naming iteration and branch
    """
    validate_train_config(cfg, len(model_cfg.branches))
    if not dataset:
        raise InputError("training dataset is empty")

    params = build_model(model_cfg, cfg.seed + SEED_OFFSET_INIT)
    trainable = params.trainable()
    velocity = [Tensor.zeros(p.shape, dtype=p.dtype) for p in trainable]
    sampling_rng = derive_rng(cfg.seed + SEED_OFFSET_SAMPLING)
    flip_rng = derive_rng(cfg.seed + SEED_OFFSET_FLIP)
    ohem_rng = derive_rng(cfg.seed + SEED_OFFSET_OHEM)

    log_rows: List[Tuple[float, ...]] = []
    losses: List[float] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for iteration in range(cfg.max_iters):
            item = dataset[int(sampling_rng.integers(len(dataset)))]
            prepared = preprocess(item.pixels, item.gts, cfg, flip_rng, model_cfg.pad_multiple)

            params.zero_grad()
            report, tape = train_step(prepared.pixels, prepared.gts, model_cfg, params, cfg, ohem_rng)
            for k, branch in enumerate(model_cfg.branches):
                if not (math.isfinite(report.cls[k]) and math.isfinite(report.reg[k])):
                    raise NumericError(f"non-finite loss at iteration {iteration} in branch {k + 1} ({branch.tag})")
            tape.backward()
            lr = lr_at(iteration, cfg)
            sgd_step(trainable, velocity, lr, cfg.momentum, cfg.weight_decay)
            losses.append(report.total)

            if iteration % cfg.log_every == 0 or iteration == cfg.max_iters - 1:
                row = (iteration, lr) + tuple(v for pair in zip(report.cls, report.reg) for v in pair)
                log_rows.append(row)
                line = _format_row(row)
                if log_file:
                    log_file.write(line + "\n")
                    log_file.flush()
                console.print(f"🏋️  {line}")

            done = iteration + 1
            if on_checkpoint and done % cfg.checkpoint_every == 0 and done != cfg.max_iters:
                on_checkpoint(params, done)
    finally:
        if log_file:
            log_file.close()

    if on_checkpoint:
        on_checkpoint(params, cfg.max_iters)
    return TrainResult(params, log_rows, losses)


def split_holdout(items: Sequence, fraction: float) -> Tuple[List, List]:
    """Split off the last ``fraction`` of ``items`` (at least one item when there are two or more)."""
    items = list(items)
    held = int(round(len(items) * fraction))
    if len(items) > 1:
        held = min(max(held, 1), len(items) - 1)
    else:
        held = 0
    cut = len(items) - held
    return items[:cut], items[cut:]
