"""Validators for model and training configuration."""

import math
from typing import TYPE_CHECKING, Sequence

from mbfcn_cli.constants import STAGE_STRIDES, STAGES, SUPPORTED_TARGET_STRIDES
from mbfcn_cli.errors import ConfigError

if TYPE_CHECKING:
    from mbfcn_cli.model import BranchConfig, ModelConfig
    from mbfcn_cli.training import TrainConfig


def _is_power_of_two_ratio(a: int, b: int) -> bool:
    big, small = max(a, b), min(a, b)
    if small <= 0 or big % small:
        return False
    ratio = big // small
    return ratio & (ratio - 1) == 0


def validate_branch(branch: "BranchConfig", index: int) -> None:
    """
    Check one branch.

    Args:
        branch: Branch configuration
        index: 1-based position, used in messages

    Raises:
        ConfigError: when an invariant does not hold
    """
    label = f"branch {index}"
    if not branch.sources:
        raise ConfigError(f"{label}: sources must not be empty")
    unknown = [s for s in branch.sources if s not in STAGES]
    if unknown:
        raise ConfigError(f"{label}: unknown source(s) {', '.join(unknown)} (expected a subset of {', '.join(STAGES)})")
    if branch.target_stride not in SUPPORTED_TARGET_STRIDES:
        raise ConfigError(f"{label}: stride {branch.target_stride} not one of {SUPPORTED_TARGET_STRIDES}")
    for source in branch.sources:
        if not _is_power_of_two_ratio(STAGE_STRIDES[source], branch.target_stride):
            raise ConfigError(
                f"{label}: stride {branch.target_stride} and {source} stride {STAGE_STRIDES[source]} "
                "do not differ by a power of two"
            )
    if branch.head_dim < 1:
        raise ConfigError(f"{label}: head_dim must be >= 1")
    if not branch.anchor_sizes:
        raise ConfigError(f"{label}: anchor_sizes must not be empty")
    if any(s <= 0 for s in branch.anchor_sizes):
        raise ConfigError(f"{label}: anchor sizes must be positive")
    if any(b <= a for a, b in zip(branch.anchor_sizes, branch.anchor_sizes[1:])):
        raise ConfigError(f"{label}: anchor_sizes must be strictly increasing")
    if not branch.anchor_ratios or any(r <= 0 or not math.isfinite(r) for r in branch.anchor_ratios):
        raise ConfigError(f"{label}: anchor_ratios must be non-empty and positive")


def validate_model_config(config: "ModelConfig") -> None:
    """Check backbone and branches; raises ConfigError."""
    backbone = config.backbone
    if len(backbone.widths) != len(STAGES) or any(w < 1 for w in backbone.widths):
        raise ConfigError(f"backbone.widths needs {len(STAGES)} positive values, got {backbone.widths}")
    if backbone.convs_per_stage < 1:
        raise ConfigError("backbone.convs_per_stage must be >= 1")
    if backbone.kernel < 1 or backbone.kernel % 2 == 0:
        raise ConfigError(f"backbone.kernel must be a positive odd number, got {backbone.kernel}")
    if not config.branches:
        raise ConfigError("at least one branch is required")
    seen = set()
    for index, branch in enumerate(config.branches, start=1):
        validate_branch(branch, index)
        if branch.key in seen:
            raise ConfigError(f"branch {index}: {branch.tag} appears twice")
        seen.add(branch.key)


def _check_per_branch(name: str, values: Sequence[float], num_branches: int) -> None:
    if len(values) not in (1, num_branches):
        raise ConfigError(f"train.{name} needs 1 or {num_branches} values, got {len(values)}")
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise ConfigError(f"train.{name} values must be finite and >= 0")


def validate_train_config(config: "TrainConfig", num_branches: int) -> None:
    """Check thresholds, probabilities and schedule; raises ConfigError."""
    if not 0 <= config.neg_iou < config.pos_iou <= 1:
        raise ConfigError(
            f"IoU thresholds must satisfy 0 <= neg_iou < pos_iou <= 1 (got {config.neg_iou}, {config.pos_iou})"
        )
    if not 0 <= config.flip_prob <= 1:
        raise ConfigError(f"train.flip_prob must be in [0, 1], got {config.flip_prob}")
    if config.base_lr <= 0 or config.lr_decay_factor <= 0:
        raise ConfigError("train.base_lr and train.lr_decay_factor must be positive")
    if config.lr_decay_every < 1:
        raise ConfigError("train.lr_decay_every must be >= 1")
    if config.max_iters < 0:
        raise ConfigError("train.max_iters must be >= 0")
    if not 0 <= config.momentum < 1 or config.weight_decay < 0:
        raise ConfigError("train.momentum must be in [0, 1) and train.weight_decay >= 0")
    if config.batch_per_branch < 1 or config.max_side < 1:
        raise ConfigError("train.batch_per_branch and train.max_side must be >= 1")
    if config.log_every < 1 or config.checkpoint_every < 1:
        raise ConfigError("train.log_every and train.checkpoint_every must be >= 1")
    _check_per_branch("lambda", config.lambdas, num_branches)
    _check_per_branch("gamma", config.gammas, num_branches)
