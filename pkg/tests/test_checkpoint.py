"""Tests for checkpoint module."""

import struct

import pytest

from mbfcn_cli.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from mbfcn_cli.errors import CheckpointError
from mbfcn_cli.model import BackboneConfig, BranchConfig, ModelConfig, build_model
from mbfcn_cli.training import TrainConfig


@pytest.fixture
def model_cfg():
    return ModelConfig(
        backbone=BackboneConfig(widths=(4, 4, 8, 8), convs_per_stage=1),
        branches=(BranchConfig(("C3", "C4", "C5"), 8, head_dim=4), BranchConfig(("C5",), 32, head_dim=4)),
        label="tiny",
    )


@pytest.fixture
def train_cfg():
    return TrainConfig(base_lr=0.01, max_iters=7, lambdas=(2.0, 1.5), seed=42, max_side=96)


class TestCheckpoint:
    """Tests for checkpoint save and load."""

    def test_round_trip_is_bit_identical(self, tmp_path, model_cfg, train_cfg):
        """Tensors, names and both configurations come back unchanged."""
        params = build_model(model_cfg, seed=3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, model_cfg, train_cfg, path)
        loaded = load_checkpoint(path)
        assert loaded.model == model_cfg
        assert loaded.train == train_cfg
        assert list(loaded.params) == list(params)
        for name, tensor in params.items():
            assert loaded.params[name].data.tobytes() == tensor.data.tobytes()
            assert loaded.params[name].fixed == tensor.fixed
        assert encode_checkpoint(loaded.params, loaded.model, loaded.train) == path.read_bytes()

    def test_truncated(self, model_cfg, train_cfg):
        """Cutting the file short reports the byte offset."""
        data = encode_checkpoint(build_model(model_cfg, seed=0), model_cfg, train_cfg)
        with pytest.raises(CheckpointError, match="byte offset 100"):
            decode_checkpoint(data[:100])

    def test_wrong_magic(self):
        """Foreign files are rejected."""
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOPE" + bytes(16))

    def test_wrong_version(self, model_cfg, train_cfg):
        """Only the current version is accepted."""
        data = bytearray(encode_checkpoint(build_model(model_cfg, seed=0), model_cfg, train_cfg))
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(CheckpointError, match="version 99"):
            decode_checkpoint(bytes(data))

    def test_trailing_bytes(self, model_cfg, train_cfg):
        """Extra data after the last tensor is rejected."""
        data = encode_checkpoint(build_model(model_cfg, seed=0), model_cfg, train_cfg)
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(data + b"\0")

    def test_tensor_shape_mismatch(self, model_cfg, train_cfg):
        """Tensors that do not fit the embedded configuration are rejected."""
        params = build_model(model_cfg, seed=0)
        other = ModelConfig(
            backbone=BackboneConfig(widths=(4, 4, 8, 16), convs_per_stage=1),
            branches=model_cfg.branches,
            label="tiny",
        )
        with pytest.raises(CheckpointError, match="shape"):
            decode_checkpoint(encode_checkpoint(params, other, train_cfg))

    def test_missing_file(self, tmp_path):
        """A missing checkpoint is a CheckpointError."""
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_values_little_endian_real32(self, model_cfg, train_cfg):
        """Tensor data is stored as little-endian real32."""
        params = build_model(model_cfg, seed=0)
        data = encode_checkpoint(params, model_cfg, train_cfg)
        first = next(iter(params.items()))[1].data.ravel()[:4].astype("<f4").tobytes()
        assert first in data

    def test_corrupt_dimensions(self, model_cfg, train_cfg):
        """Dimensions whose product overflows are reported as truncation, not a crash."""
        params = build_model(model_cfg, seed=0)
        data = bytearray(encode_checkpoint(params, model_cfg, train_cfg))
        (config_length,) = struct.unpack_from("<I", data, 8)
        name = next(iter(params)).encode("utf-8")
        dims = 12 + config_length + 4 + 2 + len(name)
        assert data[dims - len(name):dims] == name
        data[dims:dims + 16] = struct.pack("<4I", *[0xFFFFFFFF] * 4)
        with pytest.raises(CheckpointError, match="unexpected end of file"):
            decode_checkpoint(bytes(data))
