"""Tests for inference module."""

from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
import pytest

from mbfcn_cli import model as model_module
from mbfcn_cli.anchors import Box, generate_anchors
from mbfcn_cli.errors import InputError
from mbfcn_cli.inference import Detection, decode_detections, detect, detect_images, detect_pyramid, nms
from mbfcn_cli.model import BackboneConfig, BranchConfig, ModelConfig, build_model, extract_features, forward
from mbfcn_cli.tensor import Tensor

from tests.test_anchors import scalar_iou


def quadratic_nms(dets, thresh):
    remaining = sorted(dets, key=lambda d: (-d.score, d.box.x, d.box.y))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if scalar_iou(best.box.as_array(), d.box.as_array()) <= thresh]
    return kept


def tiny_model():
    config = ModelConfig(
        backbone=BackboneConfig(widths=(4, 4, 4, 4), convs_per_stage=1),
        branches=(BranchConfig(("C3", "C4", "C5"), 8, head_dim=4), BranchConfig(("C4", "C5"), 16, head_dim=4)),
    )
    return config, build_model(config, seed=0)


def random_pixels(h=48, w=64, seed=0):
    return np.random.default_rng(seed).uniform(size=(1, 3, h, w)).astype(np.float32)


class TestNms:
    """Tests for non-maximum suppression."""

    def test_against_quadratic_reference(self):
        """Kept detections match a direct quadratic implementation."""
        rng = np.random.default_rng(3)
        for _ in range(500):
            dets = [
                Detection(
                    Box(*rng.uniform(0, 40, 2), *rng.uniform(5, 25, 2)), float(rng.random()), int(rng.integers(2))
                )
                for _ in range(int(rng.integers(0, 15)))
            ]
            thresh = float(rng.uniform(0.1, 0.7))
            assert nms(dets, thresh) == quadratic_nms(dets, thresh)

    def test_suppresses_across_branches(self):
        """Overlapping boxes from different branches compete."""
        dets = [Detection(Box(0, 0, 10, 10), 0.6, 0), Detection(Box(1, 0, 10, 10), 0.9, 1)]
        kept = nms(dets, 0.3)
        assert kept == [dets[1]]

    def test_tie_broken_by_position(self):
        """Equal scores keep the box with smaller x first."""
        dets = [Detection(Box(5, 0, 10, 10), 0.5), Detection(Box(4, 0, 10, 10), 0.5)]
        assert nms(dets, 0.3)[0].box.x == 4


class TestDecodeDetections:
    """Tests for turning head maps into boxes."""

    def test_threshold_and_scale(self):
        """Only anchors above the threshold survive; boxes are divided by the scale."""
        anchors = generate_anchors(1, 2, 16, (16.0,), (1.0,))
        cls_map = np.zeros((1, 2, 1, 2))
        cls_map[0, 1, 0, 0] = 5.0
        cls_map[0, 1, 0, 1] = -5.0
        reg_map = np.zeros((1, 4, 1, 2))
        dets = decode_detections([(Tensor(cls_map), Tensor(reg_map))], [anchors], 0.5, scale=2.0)
        assert len(dets) == 1
        assert dets[0].box.as_array() == pytest.approx([0.0, 0.0, 8.0, 8.0])
        assert dets[0].score == pytest.approx(1 / (1 + np.exp(-5.0)))

    def test_clip_to_image(self):
        """Boxes are clipped to the image and degenerate ones dropped."""
        anchors = generate_anchors(1, 1, 16, (40.0,), (1.0,))
        cls_map = np.array([0.0, 5.0]).reshape(1, 2, 1, 1)
        dets = decode_detections(
            [(Tensor(cls_map), Tensor(np.zeros((1, 4, 1, 1))))], [anchors], 0.5, image_size=(16, 16)
        )
        assert dets[0].box.as_array() == pytest.approx([0.0, 0.0, 16.0, 16.0])


class TestDetect:
    """Tests for single-scale and pyramid detection."""

    def test_pyramid_of_one_equals_detect(self):
        """scales = [1.0] reproduces single-scale detection exactly."""
        config, params = tiny_model()
        pixels = random_pixels()
        single = detect(pixels, config, params, score_thresh=0.0, nms_thresh=0.5, base_scale=0.75)
        pyramid = detect_pyramid(pixels, config, params, [1.0], score_thresh=0.0, nms_thresh=0.5, base_scale=0.75)
        assert single == pyramid

    def test_input_normalized_like_training(self):
        """The network sees the same centered and scaled pixels as during training, zero-padded to 16."""
        config, params = tiny_model()
        pixels = random_pixels(40, 64)
        with patch("mbfcn_cli.inference.forward", wraps=forward) as mock_forward:
            detect(pixels, config, params)
        image = mock_forward.call_args.args[0].data
        assert image.shape == (1, 3, 48, 64)
        np.testing.assert_allclose(image[..., :40, :], (pixels - 0.5) / 0.25, atol=1e-6)
        assert not image[..., 40:, :].any()

    def test_pyramid_runs_backbone_per_scale(self):
        """Five scales cost exactly five backbone passes."""
        config, params = tiny_model()
        with patch.object(model_module, "extract_features", wraps=extract_features) as mock_features:
            detect_pyramid(random_pixels(), config, params, [0.5, 0.75, 1.0, 1.5, 2.0])
        assert mock_features.call_count == 5

    @pytest.mark.parametrize("scales", [[], [1.0, 0.0], [-1.0]])
    def test_invalid_scales(self, scales):
        """Empty or non-positive scale lists are rejected."""
        config, params = tiny_model()
        with pytest.raises(InputError):
            detect_pyramid(random_pixels(), config, params, scales)

    def test_detect_images_keys_and_bounds(self):
        """One entry per image id, boxes inside the original image."""
        config, params = tiny_model()
        items = [
            SimpleNamespace(image_id="a", pixels=random_pixels(40, 30, 1)),
            SimpleNamespace(image_id="b", pixels=random_pixels(64, 64, 2)),
        ]
        results = detect_images(items, config, params, max_side=64, score_thresh=0.0)
        assert set(results) == {"a", "b"}
        for det in results["a"]:
            assert det.image_id == "a"
            assert 0 <= det.box.x and det.box.x2 <= 30 + 1e-9
            assert 0 <= det.box.y and det.box.y2 <= 40 + 1e-9
