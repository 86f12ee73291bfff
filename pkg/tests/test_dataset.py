"""Tests for dataset module."""

from unittest.mock import patch

import numpy as np
import pytest

from mbfcn_cli.anchors import iou
from mbfcn_cli.dataset import (
    SyntheticSpec,
    load_dataset,
    read_manifest,
    render,
    sample_face_size,
    synth_generate,
)
from mbfcn_cli.errors import InputError
from mbfcn_cli.utils import derive_rng, load_yaml_file


class TestSyntheticSpec:
    """Tests for SyntheticSpec validation."""

    @pytest.mark.parametrize(
        "options",
        [
            {"image_size": 8},
            {"faces_per_image": (3, 1)},
            {"face_size_range": (20.0, 10.0)},
            {"clutter_count": (-1, 2)},
            {"count": -1},
        ],
    )
    def test_invalid(self, options):
        """Inconsistent ranges are an InputError."""
        with pytest.raises(InputError):
            SyntheticSpec(**options)

    def test_to_dict(self):
        """Tuples become lists for the YAML manifest."""
        assert SyntheticSpec(seed=4).to_dict()["faces_per_image"] == [1, 6]


class TestRender:
    """Tests for image rendering."""

    def test_deterministic(self):
        """The same (spec, index) renders the same pixels and boxes."""
        spec = SyntheticSpec(seed=9)
        first, boxes_a = render(spec, 3)
        second, boxes_b = render(spec, 3)
        np.testing.assert_array_equal(first, second)
        assert boxes_a == boxes_b

    def test_index_changes_image(self):
        """Different indices give different images."""
        spec = SyntheticSpec(seed=9)
        assert not np.array_equal(render(spec, 0)[0], render(spec, 1)[0])

    def test_boxes_inside_and_apart(self):
        """Faces lie inside the image and overlap each other by less than 0.3 IoU."""
        spec = SyntheticSpec(seed=2, faces_per_image=(3, 6))
        for index in range(10):
            pixels, boxes = render(spec, index)
            assert pixels.shape == (128, 128, 3) and pixels.dtype == np.uint8
            for box in boxes:
                assert box.x >= 0 and box.y >= 0 and box.x2 <= 128 and box.y2 <= 128
                assert 10 <= box.h <= 96
            for i, a in enumerate(boxes):
                for b in boxes[i + 1:]:
                    assert iou(a, b) < 0.3

    def test_face_sizes_log_uniform(self):
        """Sampled sizes stay in range and about half fall below the geometric mean."""
        rng = derive_rng(0)
        sizes = np.array([sample_face_size(rng, (10.0, 90.0)) for _ in range(2000)])
        assert sizes.min() >= 10.0 and sizes.max() <= 90.0
        assert 0.45 < (sizes < 30.0).mean() < 0.55


class TestSynthGenerate:
    """Tests for writing datasets."""

    def test_writes_images_annotations_and_manifest(self, tmp_path):
        """The written dataset loads back with the same boxes and pixels."""
        spec = SyntheticSpec(image_size=32, count=3, seed=1, faces_per_image=(1, 2), face_size_range=(10.0, 20.0))
        items = synth_generate(spec, tmp_path)
        assert sorted(p.name for p in (tmp_path / "images").iterdir()) == [
            "img_00000.ppm",
            "img_00001.ppm",
            "img_00002.ppm",
        ]
        assert load_yaml_file(tmp_path / "manifest.yaml")["seed"] == 1
        loaded = load_dataset(tmp_path)
        assert [item.gts for item in loaded] == [item.gts for item in items]
        np.testing.assert_allclose(loaded[1].pixels, items[1].pixels, atol=1e-7)

    def test_missing_dataset(self, tmp_path):
        """A directory without annotations.txt is an InputError."""
        with pytest.raises(InputError):
            load_dataset(tmp_path)

class TestManifest:
    """Tests for reading the generation manifest back."""

    def test_round_trip(self, tmp_path):
        """The manifest restores the generating SyntheticSpec."""
        spec = SyntheticSpec(image_size=32, count=2, seed=3, faces_per_image=(1, 2), face_size_range=(10.0, 20.0))
        synth_generate(spec, tmp_path)
        assert read_manifest(tmp_path) == spec

    def test_missing_manifest(self, tmp_path):
        """Datasets without a manifest load without one."""
        (tmp_path / "annotations.txt").write_text("")
        assert read_manifest(tmp_path) is None
        assert load_dataset(tmp_path) == []

    def test_unknown_field(self, tmp_path):
        """A manifest with unknown fields is an InputError."""
        (tmp_path / "manifest.yaml").write_text("seed: 1\ncolour: red\n")
        with pytest.raises(InputError, match="invalid manifest"):
            read_manifest(tmp_path)

    def test_count_mismatch_warns(self, tmp_path):
        """A manifest count that disagrees with the annotations is reported."""
        spec = SyntheticSpec(image_size=32, count=2, seed=3, faces_per_image=(1, 1), face_size_range=(10.0, 20.0))
        synth_generate(spec, tmp_path)
        (tmp_path / "manifest.yaml").write_text("count: 5\nimage_size: 32\n")
        with patch("mbfcn_cli.dataset.console") as mock_console:
            items = load_dataset(tmp_path)
        assert len(items) == 2
        assert "manifest lists 5 images" in mock_console.print.call_args.args[0]
