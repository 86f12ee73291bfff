"""Detection evaluation: greedy matching, PR curves, AP and precision at N false positives."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from mbfcn_cli.anchors import Box, boxes_to_array, iou_matrix
from mbfcn_cli.constants import EVAL_IOU, SUBSET_MIN_HEIGHT
from mbfcn_cli.errors import InputError
from mbfcn_cli.inference import Detection

Outcome = Tuple[float, bool]


@dataclass
class EvalCurve:
    """Score-sorted outcomes with their precision/recall arrays and AP."""

    scores: np.ndarray
    is_tp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_gt: int

    @property
    def num_tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def num_fp(self) -> int:
        return int(len(self.is_tp) - self.is_tp.sum())

    def outcomes(self) -> List[Outcome]:
        return [(float(s), bool(t)) for s, t in zip(self.scores, self.is_tp)]


def _sort_outcomes(outcomes: Sequence[Outcome]) -> List[Outcome]:
    # highest score first; on equal scores false positives come first
    return sorted(outcomes, key=lambda o: (-o[0], bool(o[1])))


def _envelope_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def build_curve(outcomes: Sequence[Outcome], n_gt: int) -> EvalCurve:
    """
    Sort outcomes and accumulate precision and recall.

    Args:
        outcomes: (score, is_tp) pairs in any order
        n_gt: Number of ground-truth faces that can be found

    Returns:
        EvalCurve; with n_gt == 0 the AP is 1 when there are no outcomes and 0 otherwise
    """
    if n_gt < 0:
        raise InputError(f"n_gt must be >= 0, got {n_gt}")
    ordered = _sort_outcomes(outcomes)
    scores = np.array([o[0] for o in ordered], dtype=np.float64)
    is_tp = np.array([bool(o[1]) for o in ordered], dtype=bool)
    tp = np.cumsum(is_tp)
    precision = tp / np.arange(1, len(is_tp) + 1) if len(is_tp) else np.zeros(0)
    if n_gt == 0:
        recall = np.zeros(len(is_tp))
        ap = 0.0 if len(is_tp) else 1.0
    else:
        recall = tp / n_gt
        ap = _envelope_ap(precision, recall) if len(is_tp) else 0.0
    return EvalCurve(scores, is_tp, precision, recall, ap, n_gt)


def average_precision(outcomes: Sequence[Outcome], n_gt: int) -> float:
    """All-point interpolated AP (pessimistic tie order: FP before TP)."""
    return build_curve(outcomes, n_gt).ap


def precision_at_fp(outcomes: Sequence[Outcome], n_fp: int, n_gt: int) -> Tuple[float, float]:
    """
    Precision and recall where the ``n_fp``-th false positive is reached.

    The score-sorted list is cut right after that false positive (or kept whole
    when it has fewer). An empty cut reports (0, 0).
    """
    if n_fp < 1:
        raise InputError(f"--fp must be >= 1, got {n_fp}")
    tp = fp = 0
    for _, is_tp in _sort_outcomes(outcomes):
        if is_tp:
            tp += 1
        else:
            fp += 1
            if fp == n_fp:
                break
    total = tp + fp
    precision = tp / total if total else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall


def _claim(det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thresh: float) -> np.ndarray:
    claimed_by = np.full(len(det_boxes), -1, dtype=np.int64)
    if not len(det_boxes) or not len(gt_boxes):
        return claimed_by
    overlaps = iou_matrix(det_boxes, gt_boxes)
    free = np.ones(len(gt_boxes), dtype=bool)
    for i, row in enumerate(overlaps):
        candidates = np.where(free & (row >= iou_thresh), row, -1.0)
        best = int(candidates.argmax())
        if candidates[best] >= iou_thresh:
            claimed_by[i] = best
            free[best] = False
    return claimed_by


def match_det_gt(dets: Sequence[Detection], gts: Sequence[Box], iou_thresh: float = EVAL_IOU) -> List[bool]:
    """
    Greedy claiming in the given (score-descending) order.

    Each detection takes the unclaimed GT with the highest IoU if that IoU is at
    least ``iou_thresh``; a GT is claimed at most once.
    """
    claimed_by = _claim(boxes_to_array([d.box for d in dets]), boxes_to_array(gts), iou_thresh)
    return [bool(index >= 0) for index in claimed_by]


def subset_filter(gts: Sequence[Box], subset: str) -> Tuple[List[Box], List[Box]]:
    """
    Split GTs into the ones evaluated in ``subset`` and the ignored ones.

    easy/medium/hard keep faces taller than 50/30/10 pixels; "all" keeps every face.
    """
    if subset not in SUBSET_MIN_HEIGHT:
        raise InputError(f"unknown subset '{subset}' (expected one of {', '.join(SUBSET_MIN_HEIGHT)})")
    threshold = SUBSET_MIN_HEIGHT[subset]
    kept = [g for g in gts if g.h > threshold]
    ignored = [g for g in gts if not g.h > threshold]
    return kept, ignored


def image_outcomes(
    dets: Sequence[Detection],
    gts: Sequence[Box],
    subset: str,
    iou_thresh: float = EVAL_IOU,
) -> Tuple[List[Outcome], int]:
    """Outcomes of one image in ``subset`` and its count of evaluated GTs."""
    kept, ignored = subset_filter(gts, subset)
    ordered = sorted(dets, key=lambda d: (-d.score, d.box.x, d.box.y))
    det_boxes = boxes_to_array([d.box for d in ordered])
    claimed_by = _claim(det_boxes, boxes_to_array(kept), iou_thresh)
    on_ignored = np.zeros(len(ordered), dtype=bool)
    if ignored and ordered:
        on_ignored = (iou_matrix(det_boxes, boxes_to_array(ignored)) >= iou_thresh).any(axis=1)
    outcomes = [
        (det.score, bool(index >= 0))
        for det, index, skip in zip(ordered, claimed_by, on_ignored)
        if index >= 0 or not skip
    ]
    return outcomes, len(kept)


def evaluate(
    dets_by_image: Mapping[str, Sequence[Detection]],
    gts_by_image: Mapping[str, Sequence[Box]],
    subset: str = "all",
    iou_thresh: float = EVAL_IOU,
) -> EvalCurve:
    """
    Evaluate detections over a dataset in one subset.

    Detections for an image without annotations count as false positives.
    Detections that match no evaluated GT but overlap an ignored one are dropped.
    """
    outcomes: List[Outcome] = []
    n_gt = 0
    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        image, count = image_outcomes(
            dets_by_image.get(image_id, []), gts_by_image.get(image_id, []), subset, iou_thresh
        )
        outcomes.extend(image)
        n_gt += count
    return build_curve(outcomes, n_gt)


def evaluate_subsets(
    dets_by_image: Mapping[str, Sequence[Detection]],
    gts_by_image: Mapping[str, Sequence[Box]],
    subsets: Sequence[str] = ("easy", "medium", "hard"),
) -> Dict[str, EvalCurve]:
    return {subset: evaluate(dets_by_image, gts_by_image, subset) for subset in subsets}


def write_pr_curve(curve: EvalCurve, path: Path) -> None:
    """Two tab-separated columns per line: recall, precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for recall, precision in zip(curve.recall, curve.precision):
            f.write(f"{recall:.6f}\t{precision:.6f}\n")
