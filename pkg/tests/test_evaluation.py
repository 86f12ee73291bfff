"""Tests for evaluation module."""

import numpy as np
import pytest

from mbfcn_cli.anchors import Box
from mbfcn_cli.errors import InputError
from mbfcn_cli.evaluation import (
    average_precision,
    build_curve,
    evaluate,
    evaluate_subsets,
    image_outcomes,
    match_det_gt,
    precision_at_fp,
    subset_filter,
    write_pr_curve,
)
from mbfcn_cli.inference import Detection

from tests.test_anchors import scalar_iou


def greedy_reference(dets, gts, thresh):
    claimed = [False] * len(gts)
    result = []
    for det in dets:
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            overlap = scalar_iou(det.box.as_array(), gt.as_array())
            if not claimed[j] and overlap >= thresh and overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            claimed[best] = True
        result.append(best >= 0)
    return result


class TestAveragePrecision:
    """Tests for AP and precision at N false positives."""

    def test_tp_fp_tp_fixture(self):
        """TP, FP, TP with two faces gives AP 5/6."""
        outcomes = [(0.9, True), (0.8, False), (0.7, True)]
        assert average_precision(outcomes, 2) == pytest.approx(0.833333, abs=1e-6)

    def test_precision_at_one_fp(self):
        """TP, TP, FP cut at the first false positive gives 2/3."""
        precision, recall = precision_at_fp([(0.9, True), (0.8, True), (0.7, False)], 1, 3)
        assert precision == pytest.approx(0.666667, abs=1e-6)
        assert recall == pytest.approx(2 / 3)

    def test_fewer_false_positives_than_requested(self):
        """The whole list is used when it has fewer than N false positives."""
        precision, _ = precision_at_fp([(0.9, True), (0.5, False)], 500, 2)
        assert precision == pytest.approx(0.5)

    def test_invalid_fp_count(self):
        """n_fp < 1 is rejected."""
        with pytest.raises(InputError):
            precision_at_fp([], 0, 1)

    def test_ties_are_pessimistic(self):
        """On equal scores the false positive is ranked first."""
        curve = build_curve([(0.5, True), (0.5, False)], 1)
        assert curve.is_tp.tolist() == [False, True]
        assert curve.ap == pytest.approx(0.5)

    def test_no_ground_truth(self):
        """Without faces, AP is 1 with no detections and 0 otherwise."""
        assert average_precision([], 0) == 1.0
        assert average_precision([(0.3, False)], 0) == 0.0

    def test_perfect_detector(self):
        """All true positives above all false positives gives AP 1."""
        assert average_precision([(0.9, True), (0.8, True), (0.1, False)], 2) == pytest.approx(1.0)


class TestMatching:
    """Tests for detection to ground-truth claiming."""

    def test_against_greedy_reference(self):
        """Agrees with a direct greedy loop on random scenes."""
        rng = np.random.default_rng(11)
        for _ in range(200):
            gts = [Box(*rng.uniform(0, 40, 2), *rng.uniform(5, 20, 2)) for _ in range(int(rng.integers(0, 6)))]
            dets = [
                Detection(Box(*rng.uniform(0, 40, 2), *rng.uniform(5, 20, 2)), float(s))
                for s in sorted(rng.random(int(rng.integers(0, 8))), reverse=True)
            ]
            assert match_det_gt(dets, gts, 0.5) == greedy_reference(dets, gts, 0.5)

    def test_each_gt_claimed_once(self):
        """A duplicate detection of a claimed face is a false positive."""
        gt = Box(0, 0, 10, 10)
        dets = [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(0, 0, 10, 10), 0.8)]
        assert match_det_gt(dets, [gt]) == [True, False]


class TestSubsets:
    """Tests for easy/medium/hard filtering."""

    def test_height_thresholds(self):
        """Faces strictly taller than 50/30/10 pixels are kept."""
        gts = [Box(0, 0, 5, h) for h in (8, 10, 20, 30, 40, 50, 60)]
        assert [g.h for g in subset_filter(gts, "easy")[0]] == [60]
        assert [g.h for g in subset_filter(gts, "medium")[0]] == [40, 50, 60]
        assert [g.h for g in subset_filter(gts, "hard")[0]] == [20, 30, 40, 50, 60]
        assert len(subset_filter(gts, "all")[0]) == 7

    def test_unknown_subset(self):
        """Unknown names are an InputError."""
        with pytest.raises(InputError):
            subset_filter([], "tiny")

    def test_nesting_on_random_scenes(self):
        """hard contains medium contains easy, in GT counts and true positives."""
        rng = np.random.default_rng(5)
        gts, dets = {}, {}
        for i in range(20):
            faces = [Box(*rng.uniform(0, 100, 2), *([float(rng.uniform(5, 80))] * 2)) for _ in range(4)]
            gts[str(i)] = faces
            dets[str(i)] = [
                Detection(Box(f.x + rng.uniform(-2, 2), f.y, f.w, f.h), float(rng.random())) for f in faces[:3]
            ]
        curves = evaluate_subsets(dets, gts, ("easy", "medium", "hard"))
        assert curves["hard"].n_gt >= curves["medium"].n_gt >= curves["easy"].n_gt
        assert curves["hard"].num_tp >= curves["medium"].num_tp >= curves["easy"].num_tp

    def test_detections_on_ignored_faces_are_dropped(self):
        """A hit on a face outside the subset is neither TP nor FP."""
        outcomes, n_gt = image_outcomes(
            [Detection(Box(0, 0, 20, 20), 0.9), Detection(Box(50, 50, 60, 60), 0.8)],
            [Box(0, 0, 20, 20), Box(50, 50, 60, 60)],
            "easy",
        )
        assert n_gt == 1
        assert outcomes == [(0.8, True)]


class TestEvaluate:
    """Tests for dataset-level evaluation."""

    def test_images_without_annotations(self):
        """Detections on an unannotated image count as false positives."""
        curve = evaluate({"x": [Detection(Box(0, 0, 20, 20), 0.5)]}, {}, "all")
        assert curve.num_fp == 1 and curve.n_gt == 0

    def test_pr_curve_file(self, tmp_path):
        """One recall/precision pair per detection."""
        curve = build_curve([(0.9, True), (0.8, False)], 2)
        path = tmp_path / "pr.txt"
        write_pr_curve(curve, path)
        assert path.read_text().splitlines() == ["0.500000\t1.000000", "0.500000\t0.500000"]
