"""Binary checkpoints: configuration text plus named real32 tensors, little-endian."""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from mbfcn_cli.config import parse_config_text, render_config
from mbfcn_cli.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from mbfcn_cli.errors import CheckpointError, ConfigError
from mbfcn_cli.model import ModelConfig, ModelParams, build_model
from mbfcn_cli.tensor import Tensor
from mbfcn_cli.training import TrainConfig


@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    params: ModelParams


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"{self.path}: unexpected end of file at byte offset {len(self.data)}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode_checkpoint(params: ModelParams, model: ModelConfig, train: TrainConfig) -> bytes:
    config = render_config(model, train).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(config)), config]
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<4I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, model: ModelConfig, train: TrainConfig, path: Path) -> None:
    """
    Write ``params`` and both configurations to ``path``.

    Layout: magic "MBFC", u32 version, u32 config length + UTF-8 config text,
    u32 tensor count, then per tensor u16 name length, name, 4 u32 dims and
    the real32 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, model, train))


def decode_checkpoint(data: bytes, path: Path = Path("<checkpoint>")) -> Checkpoint:
    reader = _Reader(data, path)
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (config_length,) = reader.unpack("<I")
    try:
        config_text = reader.take(config_length).decode("utf-8")
        model, train = parse_config_text(config_text, f"{path} (embedded config)")
    except (UnicodeDecodeError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid embedded configuration: {e}") from None

    params = ModelParams()
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8", errors="replace")
        shape = reader.unpack("<4I")
        size = math.prod(shape)
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        fixed = name.startswith("filler.")
        params[name] = Tensor(values, requires_grad=not fixed, fixed=fixed)
    if reader.offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.offset} trailing bytes after the last tensor")

    expected = build_model(model, 0)
    for name, tensor in expected.items():
        if name not in params:
            raise CheckpointError(f"{path}: tensor '{name}' is missing")
        if params[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {params[name].shape}, expected {tensor.shape}")
    return Checkpoint(model, train, params)


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: missing file, wrong magic or version, truncation
            (with the byte offset), or tensors that do not fit the configuration
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return decode_checkpoint(data, path)
