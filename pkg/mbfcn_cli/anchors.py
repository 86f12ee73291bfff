"""Anchor grids, box geometry, regression targets and anchor assignment."""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

from mbfcn_cli.constants import DEFAULT_NEG_IOU, DEFAULT_POS_IOU, DELTA_CLAMP
from mbfcn_cli.errors import ConfigError, InputError

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: left-top corner (x, y), width and height in pixels."""

    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    @property
    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0

    def scaled(self, factor: float) -> "Box":
        return Box(self.x * factor, self.y * factor, self.w * factor, self.h * factor)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box":
        x, y, w, h = (float(v) for v in values)
        return cls(x, y, w, h)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """(N, 4) array of (x, y, w, h)."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class AnchorSet:
    """
    Anchors of one branch in index order ((gy * map_w) + gx) * A + slot.

    ``boxes`` is (N, 4) in (x, y, w, h); provenance arrays have length N.
    """

    boxes: np.ndarray
    grid_y: np.ndarray
    grid_x: np.ndarray
    slot: np.ndarray
    stride: int
    map_h: int
    map_w: int
    num_slots: int

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def box(self, index: int) -> Box:
        return Box.from_array(self.boxes[index])


@dataclass
class MatchResult:
    """Per-anchor label (1/0/-1), assigned GT index (-1 if none) and regression target."""

    labels: np.ndarray
    gt_index: np.ndarray
    targets: np.ndarray
    max_iou: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


@lru_cache(maxsize=64)
def _anchor_grid(map_h: int, map_w: int, stride: int, sizes: Tuple[float, ...], ratios: Tuple[float, ...]) -> AnchorSet:
    shapes = np.array([(s * math.sqrt(r), s / math.sqrt(r)) for s in sizes for r in ratios], dtype=np.float64)
    num_slots = len(shapes)
    grid_y, grid_x, slot = (
        a.ravel() for a in np.meshgrid(np.arange(map_h), np.arange(map_w), np.arange(num_slots), indexing="ij")
    )
    widths = shapes[slot, 0]
    heights = shapes[slot, 1]
    centers_x = (grid_x + 0.5) * stride
    centers_y = (grid_y + 0.5) * stride
    boxes = np.stack([centers_x - widths / 2, centers_y - heights / 2, widths, heights], axis=1)
    for array in (boxes, grid_y, grid_x, slot):
        array.setflags(write=False)
    return AnchorSet(boxes, grid_y, grid_x, slot, stride, map_h, map_w, num_slots)


def generate_anchors(
    map_h: int,
    map_w: int,
    stride: int,
    sizes: Sequence[float],
    ratios: Sequence[float],
) -> AnchorSet:
    """
    Lay anchors over a feature map.

    For every cell and every (size s, ratio r): w = s * sqrt(r), h = s / sqrt(r),
    centered at ((gx + 0.5) * stride, (gy + 0.5) * stride).

    Args:
        map_h: Feature map height
        map_w: Feature map width
        stride: Feature map stride in pixels
        sizes: Anchor side lengths
        ratios: Width/height ratios

    Returns:
        AnchorSet with map_h * map_w * |sizes| * |ratios| anchors
    """
    if not sizes or not ratios:
        raise ConfigError("generate_anchors needs at least one size and one ratio")
    sizes = tuple(float(s) for s in sizes)
    ratios = tuple(float(r) for r in ratios)
    return _anchor_grid(int(map_h), int(map_w), int(stride), sizes, ratios)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) box arrays; 0 where boxes are disjoint."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    iy2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        overlap = np.where(union > 0, inter / union, 0.0)
    return overlap


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def encode_boxes(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets ((gx-ax)/aw, (gy-ay)/ah, ln(gw/aw), ln(gh/ah)) for row-aligned arrays."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if np.any(gts[:, 2:] <= 0):
        raise InputError("cannot encode a ground-truth box with non-positive width or height")
    return np.stack(
        [
            (gts[:, 0] - anchors[:, 0]) / anchors[:, 2],
            (gts[:, 1] - anchors[:, 1]) / anchors[:, 3],
            np.log(gts[:, 2] / anchors[:, 2]),
            np.log(gts[:, 3] / anchors[:, 3]),
        ],
        axis=1,
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of ``encode_boxes``; size deltas are clamped to [-ln 1000, ln 1000]."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    size = np.clip(deltas[:, 2:], -DELTA_CLAMP, DELTA_CLAMP)
    return np.stack(
        [
            anchors[:, 0] + deltas[:, 0] * anchors[:, 2],
            anchors[:, 1] + deltas[:, 1] * anchors[:, 3],
            anchors[:, 2] * np.exp(size[:, 0]),
            anchors[:, 3] * np.exp(size[:, 1]),
        ],
        axis=1,
    )


def encode(gt: Box, anchor: Box) -> Tuple[float, float, float, float]:
    """Regression target of ``gt`` relative to ``anchor``."""
    return tuple(float(v) for v in encode_boxes(gt.as_array(), anchor.as_array())[0])


def decode(anchor: Box, t: Sequence[float]) -> Box:
    """Box predicted by deltas ``t`` on ``anchor``."""
    return Box.from_array(decode_boxes(anchor.as_array(), np.asarray(t, dtype=np.float64))[0])


def match(
    anchors: AnchorSet,
    gts: Sequence[Box],
    pos_iou: float = DEFAULT_POS_IOU,
    neg_iou: float = DEFAULT_NEG_IOU,
) -> MatchResult:
    """
    Label anchors against ground truth.

    Positive when max IoU > pos_iou (assigned to the argmax GT, lowest index on
    ties), negative when max IoU < neg_iou, ignored in between. Each GT's
    best anchor (lowest anchor index on ties) is forced positive when its IoU
    is > 0; an anchor that is the best of several GTs goes to the lowest GT index.
    """
    count = len(anchors)
    labels = np.full(count, NEGATIVE, dtype=np.int8)
    gt_index = np.full(count, -1, dtype=np.int64)
    targets = np.zeros((count, 4), dtype=np.float64)
    if not gts or count == 0:
        return MatchResult(labels, gt_index, targets, np.zeros(count, dtype=np.float64))

    gt_boxes = boxes_to_array(gts)
    overlaps = iou_matrix(anchors.boxes, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps[np.arange(count), best_gt]

    labels[best >= neg_iou] = IGNORED
    positive = best > pos_iou
    labels[positive] = POSITIVE
    gt_index[positive] = best_gt[positive]

    best_anchor = overlaps.argmax(axis=0)
    for j in reversed(range(len(gts))):
        anchor = best_anchor[j]
        if overlaps[anchor, j] > 0:
            labels[anchor] = POSITIVE
            gt_index[anchor] = j

    chosen = labels == POSITIVE
    targets[chosen] = encode_boxes(gt_boxes[gt_index[chosen]], anchors.boxes[chosen])
    return MatchResult(labels, gt_index, targets, best)


def flatten_cls(probs: np.ndarray, num_slots: int) -> np.ndarray:
    """Face probability per anchor from a (1, 2A, h, w) map, in anchor index order."""
    return probs[0, 1::2].transpose(1, 2, 0).reshape(-1)


def flatten_reg(reg: np.ndarray, num_slots: int) -> np.ndarray:
    """(N, 4) deltas per anchor from a (1, 4A, h, w) map, in anchor index order."""
    _, _, h, w = reg.shape
    return reg[0].reshape(num_slots, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


def unflatten_cls(values: np.ndarray, num_slots: int, map_h: int, map_w: int) -> np.ndarray:
    """Scatter per-anchor face values back into a (1, 2A, h, w) map (background channels zero)."""
    out = np.zeros((1, 2 * num_slots, map_h, map_w), dtype=values.dtype)
    out[0, 1::2] = values.reshape(map_h, map_w, num_slots).transpose(2, 0, 1)
    return out


def unflatten_reg(values: np.ndarray, num_slots: int, map_h: int, map_w: int) -> np.ndarray:
    """Scatter (N, 4) per-anchor values back into a (1, 4A, h, w) map."""
    grid = values.reshape(map_h, map_w, num_slots, 4).transpose(2, 3, 0, 1)
    return grid.reshape(1, 4 * num_slots, map_h, map_w)


def anchors_for_maps(branches, map_sizes: Sequence[Tuple[int, int]]) -> List[AnchorSet]:
    """One AnchorSet per branch for the given output map sizes."""
    return [
        generate_anchors(h, w, branch.target_stride, branch.anchor_sizes, branch.anchor_ratios)
        for branch, (h, w) in zip(branches, map_sizes)
    ]
