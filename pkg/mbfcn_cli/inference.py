"""Turning head outputs into scored boxes, cross-branch NMS and pyramid inference."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mbfcn_cli.anchors import (
    AnchorSet,
    Box,
    anchors_for_maps,
    boxes_to_array,
    decode_boxes,
    flatten_cls,
    flatten_reg,
    iou_matrix,
)
from mbfcn_cli.constants import DEFAULT_NMS_THRESH, DEFAULT_SCORE_THRESH
from mbfcn_cli.errors import InputError
from mbfcn_cli.model import ModelConfig, ModelParams, forward
from mbfcn_cli.tensor import Tensor, softmax_pair
from mbfcn_cli.training import normalize_pixels, pad_to_multiple, resize_image


@dataclass(frozen=True)
class Detection:
    """Scored box in original-image pixels, with the 0-based branch that produced it."""

    box: Box
    score: float
    branch: int = 0
    image_id: str = ""


def decode_detections(
    outputs: Sequence[Tuple[Tensor, Tensor]],
    anchor_sets: Sequence[AnchorSet],
    score_thresh: float = DEFAULT_SCORE_THRESH,
    scale: float = 1.0,
    image_size: Optional[Tuple[int, int]] = None,
    image_id: str = "",
) -> List[Detection]:
    """
    Convert per-branch (cls_map, reg_map) into detections.

    Keeps anchors whose face probability is strictly above ``score_thresh``,
    decodes their deltas, maps coordinates back by dividing by ``scale`` and
    clips to ``image_size`` (height, width) when given.
    """
    detections = []
    for branch, ((cls_map, reg_map), anchors) in enumerate(zip(outputs, anchor_sets)):
        probs = softmax_pair(cls_map).data
        scores = flatten_cls(probs, anchors.num_slots).astype(np.float64)
        keep = np.flatnonzero(scores > score_thresh)
        if not keep.size:
            continue
        deltas = flatten_reg(reg_map.data, anchors.num_slots)[keep]
        boxes = decode_boxes(anchors.boxes[keep], deltas) / scale
        if image_size is not None:
            height, width = image_size
            x1 = np.clip(boxes[:, 0], 0, width)
            y1 = np.clip(boxes[:, 1], 0, height)
            x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, width)
            y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, height)
            boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
        for values, score in zip(boxes, scores[keep]):
            box = Box.from_array(values)
            if box.is_valid:
                detections.append(Detection(box, float(score), branch, image_id))
    return detections


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_THRESH) -> List[Detection]:
    """
    Greedy non-maximum suppression over the pooled detections of every branch.

    Highest score first (ties broken by smaller x, then smaller y); each kept
    detection removes the remaining ones whose IoU with it exceeds ``iou_thresh``.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.x, dets[i].box.y))
    ordered = [dets[i] for i in order]
    overlaps = iou_matrix(boxes_to_array([d.box for d in ordered]), boxes_to_array([d.box for d in ordered]))
    alive = np.ones(len(ordered), dtype=bool)
    keep = []
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        keep.append(ordered[i])
        alive[i + 1:] &= overlaps[i, i + 1:] <= iou_thresh
    return keep


def _candidates(
    pixels: np.ndarray,
    config: ModelConfig,
    params: ModelParams,
    scale: float,
    score_thresh: float,
    image_id: str,
) -> List[Detection]:
    _, _, height, width = pixels.shape
    prepared = pad_to_multiple(normalize_pixels(resize_image(pixels, scale)), config.pad_multiple)
    outputs = forward(Tensor(prepared), config, params)
    anchor_sets = anchors_for_maps(config.branches, [cls_map.shape[2:] for cls_map, _ in outputs])
    return decode_detections(outputs, anchor_sets, score_thresh, scale, (height, width), image_id)


def detect(
    pixels: np.ndarray,
    config: ModelConfig,
    params: ModelParams,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_thresh: float = DEFAULT_NMS_THRESH,
    image_id: str = "",
    base_scale: float = 1.0,
) -> List[Detection]:
    """Single-scale detection on a (1, 3, h, w) image: resize by ``base_scale``, forward, decode, NMS."""
    return nms(_candidates(pixels, config, params, base_scale, score_thresh, image_id), nms_thresh)


def detect_pyramid(
    pixels: np.ndarray,
    config: ModelConfig,
    params: ModelParams,
    scales: Sequence[float],
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_thresh: float = DEFAULT_NMS_THRESH,
    image_id: str = "",
    base_scale: float = 1.0,
) -> List[Detection]:
    """
    Multi-scale detection.

    Runs the network once per scale (each relative to ``base_scale``), pools
    every scale's candidates and applies a single global NMS.

    Raises:
        InputError: empty or non-positive scale list
    """
    if not scales or any(s <= 0 for s in scales):
        raise InputError(f"scales must be a non-empty list of positive values, got {list(scales)}")
    pooled: List[Detection] = []
    for scale in scales:
        pooled.extend(_candidates(pixels, config, params, base_scale * scale, score_thresh, image_id))
    return nms(pooled, nms_thresh)


def detect_images(
    items: Sequence,
    config: ModelConfig,
    params: ModelParams,
    max_side: int,
    scales: Optional[Sequence[float]] = None,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_thresh: float = DEFAULT_NMS_THRESH,
) -> Dict[str, List[Detection]]:
    """
    Detect faces in every item (``image_id`` and ``pixels``), keyed by image id.

    Each image is first resized so its longer side is ``max_side``, as in training;
    ``scales`` are relative to that size.
    """
    results: Dict[str, List[Detection]] = {}
    for item in items:
        pixels = item.pixels
        base_scale = max_side / max(pixels.shape[2], pixels.shape[3])
        if scales is None:
            dets = detect(pixels, config, params, score_thresh, nms_thresh, item.image_id, base_scale)
        else:
            dets = detect_pyramid(pixels, config, params, scales, score_thresh, nms_thresh, item.image_id, base_scale)
        results[item.image_id] = dets
    return results
