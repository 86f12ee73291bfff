"""Toy backbone, branch-specific skip-connection fusion and per-branch heads."""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from mbfcn_cli.constants import (
    C5_DILATION,
    DEFAULT_ANCHOR_RATIOS,
    DEFAULT_ANCHOR_SIZES,
    DEFAULT_BRANCHES,
    DEFAULT_CONVS_PER_STAGE,
    DEFAULT_HEAD_DIM,
    DEFAULT_KERNEL_SIZE,
    DEFAULT_STAGE_WIDTHS,
    BACKBONE_INIT_GAIN,
    INIT_BIAS,
    INIT_WEIGHT_STD,
    PAD_MULTIPLE,
    STAGE_STRIDES,
    STAGES,
)
from mbfcn_cli.errors import ConfigError
from mbfcn_cli.tensor import (
    Tensor,
    bilinear_upsample,
    concat_channels,
    conv2d,
    filler_tensor,
    max_pool2d,
    relu,
)
from mbfcn_cli.utils import derive_rng
from mbfcn_cli.validators import validate_model_config


@dataclass(frozen=True)
class BackboneConfig:
    """Stage widths for C2..C5, convs per stage and kernel size."""

    widths: Tuple[int, int, int, int] = DEFAULT_STAGE_WIDTHS
    convs_per_stage: int = DEFAULT_CONVS_PER_STAGE
    kernel: int = DEFAULT_KERNEL_SIZE

    def width(self, stage: str) -> int:
        return self.widths[STAGES.index(stage)]


@dataclass(frozen=True)
class BranchConfig:
    """
    One detection branch in CX(Y) notation: which stages feed it and at which stride.

    Sources are stored in C2..C5 order; empty anchor sizes take the per-stride defaults.
    """

    sources: Tuple[str, ...]
    target_stride: int
    head_dim: int = DEFAULT_HEAD_DIM
    anchor_sizes: Tuple[float, ...] = ()
    anchor_ratios: Tuple[float, ...] = DEFAULT_ANCHOR_RATIOS

    def __post_init__(self):
        ordered = tuple(sorted(set(self.sources), key=lambda s: STAGES.index(s) if s in STAGES else len(STAGES)))
        object.__setattr__(self, "sources", ordered)
        object.__setattr__(self, "anchor_ratios", tuple(float(r) for r in self.anchor_ratios))
        sizes = tuple(float(s) for s in self.anchor_sizes)
        if not sizes:
            sizes = DEFAULT_ANCHOR_SIZES.get(self.target_stride, ())
        object.__setattr__(self, "anchor_sizes", sizes)

    @property
    def tag(self) -> str:
        """Notation such as ``C345(8)``."""
        return "C" + "".join(s[1:] for s in self.sources) + f"({self.target_stride})"

    @property
    def key(self) -> str:
        """Parameter-name prefix such as ``branch.C345_8``."""
        return "branch.C" + "".join(s[1:] for s in self.sources) + f"_{self.target_stride}"

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_ratios)


def _default_branches() -> Tuple[BranchConfig, ...]:
    return tuple(BranchConfig(sources=sources, target_stride=stride) for sources, stride in DEFAULT_BRANCHES)


@dataclass(frozen=True)
class ModelConfig:
    """Backbone plus an ordered list of K branches."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    branches: Tuple[BranchConfig, ...] = field(default_factory=_default_branches)
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or "-".join(b.tag for b in self.branches)

    @property
    def pad_multiple(self) -> int:
        """Spatial multiple every input must have so each branch map is exact."""
        return max([PAD_MULTIPLE] + [b.target_stride for b in self.branches])


class ModelParams:
    """Named parameter tensors; bilinear fillers are flagged fixed."""

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None):
        self.tensors: Dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise ConfigError(f"parameter '{name}' is missing") from None

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        tensor.name = name
        self.tensors[name] = tensor

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def get(self, name: str) -> Optional[Tensor]:
        return self.tensors.get(name)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> List[Tensor]:
        return [t for t in self.tensors.values() if not t.fixed]

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        """Copy with every tensor cast to ``dtype`` (used for real64 gradient checks)."""
        copy = ModelParams()
        for name, tensor in self.tensors.items():
            copy[name] = Tensor(tensor.data.astype(dtype), requires_grad=not tensor.fixed, fixed=tensor.fixed)
        return copy


def _upsample_factors(branch: BranchConfig) -> List[int]:
    strides = [STAGE_STRIDES[s] for s in branch.sources]
    return sorted({stride // branch.target_stride for stride in strides if stride > branch.target_stride})


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """
    Initialize every parameter of ``config``.

    Backbone convs are He-normal (std sqrt(2 / fan_in)) so the signal keeps
    its scale through every stage; head convs are N(0, 0.01^2). Each layer
    draws from a generator derived from (seed, layer name). Biases are 0.1
    and bilinear fillers are fixed.

    Args:
        config: Model configuration
        seed: Initialization seed
        dtype: numpy float type of the tensors

    Returns:
        ModelParams
    """
    validate_model_config(config)
    params = ModelParams()

    def add_conv(name: str, c_out: int, c_in: int, kernel: int, std: float = INIT_WEIGHT_STD) -> None:
        rng = derive_rng(seed, name)
        weight = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)).astype(dtype)
        params[f"{name}.weight"] = Tensor(weight, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.full((1, c_out, 1, 1), INIT_BIAS, dtype=dtype), requires_grad=True)

    backbone = config.backbone
    in_channels = 3
    for stage, width in zip(STAGES, backbone.widths):
        for index in range(backbone.convs_per_stage):
            fan_in = in_channels * backbone.kernel * backbone.kernel
            std = math.sqrt(BACKBONE_INIT_GAIN / fan_in)
            add_conv(f"backbone.{stage}.conv{index + 1}", width, in_channels, backbone.kernel, std)
            in_channels = width

    for branch in config.branches:
        fused = sum(backbone.width(s) for s in branch.sources)
        add_conv(f"{branch.key}.reduce", branch.head_dim, fused, 1)
        add_conv(f"{branch.key}.cls", 2 * branch.num_anchors, branch.head_dim, 1)
        add_conv(f"{branch.key}.reg", 4 * branch.num_anchors, branch.head_dim, 1)
        for factor in _upsample_factors(branch):
            name = f"filler.up{factor}"
            if name not in params:
                params[name] = filler_tensor(factor, dtype=dtype, name=name)

    return params


def _stage_convs(params: ModelParams, stage: str) -> List[str]:
    names = []
    index = 1
    while f"backbone.{stage}.conv{index}.weight" in params:
        names.append(f"backbone.{stage}.conv{index}")
        index += 1
    if not names:
        raise ConfigError(f"backbone stage {stage} has no convolution parameters")
    return names


def extract_features(image: Tensor, params: ModelParams) -> Dict[str, Tensor]:
    """
    Run the backbone once and return the C2..C5 maps.

    C2 uses a stride-2 conv followed by a 2x2 max pool, C3 and C4 open with a
    stride-2 conv, and C5 keeps stride 16 through dilated stride-1 convs.

    Args:
        image: (1, 3, h, w) with h, w multiples of 16
        params: Model parameters

    Returns:
        Mapping stage name -> feature map
    """
    n, c, h, w = image.shape
    if n != 1 or c != 3:
        raise ConfigError(f"image must have shape (1, 3, h, w), got {image.shape}")
    if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
        raise ConfigError(f"image size {h}x{w} is not a multiple of {PAD_MULTIPLE}; preprocess pads it")

    features: Dict[str, Tensor] = {}
    x = image
    for stage in STAGES:
        for index, name in enumerate(_stage_convs(params, stage)):
            weight = params[f"{name}.weight"]
            dilation = C5_DILATION if stage == "C5" else 1
            stride = 2 if index == 0 and stage in ("C2", "C3", "C4") else 1
            pad = dilation * (weight.shape[2] - 1) // 2
            x = relu(conv2d(x, weight, params[f"{name}.bias"], stride=stride, pad=pad, dilation=dilation))
            if index == 0 and stage == "C2":
                x = max_pool2d(x, 2, 2)
        features[stage] = x
    return features


def fuse_branch(features: Dict[str, Tensor], branch: BranchConfig, params: ModelParams) -> Tensor:
    """
    Resample every source of ``branch`` to its target stride and concatenate.

    Coarser sources are bilinearly up-sampled by the stride ratio, finer ones
    go through repeated 2x2 max pools; channel order is C2..C5.
    """
    parts = []
    for source in branch.sources:
        if source not in features:
            raise ConfigError(f"branch {branch.tag}: feature map {source} not available")
        fmap = features[source]
        stride = STAGE_STRIDES[source]
        if stride > branch.target_stride:
            factor = stride // branch.target_stride
            if factor * branch.target_stride != stride or factor & (factor - 1):
                raise ConfigError(f"branch {branch.tag}: cannot up-sample {source} from stride {stride}")
            fmap = bilinear_upsample(fmap, factor, params.get(f"filler.up{factor}"))
        elif stride < branch.target_stride:
            ratio = branch.target_stride // stride
            if ratio * stride != branch.target_stride or ratio & (ratio - 1):
                raise ConfigError(f"branch {branch.tag}: cannot down-sample {source} from stride {stride}")
            for _ in range(int(math.log2(ratio))):
                fmap = max_pool2d(fmap, 2, 2)
        parts.append(fmap)
    return concat_channels(parts)


def branch_head(fused: Tensor, branch: BranchConfig, params: ModelParams) -> Tuple[Tensor, Tensor]:
    """1x1 reduction + ReLU, then sibling 1x1 cls (2A channels) and reg (4A channels) convs."""
    key = branch.key
    hidden = relu(conv2d(fused, params[f"{key}.reduce.weight"], params[f"{key}.reduce.bias"]))
    cls_map = conv2d(hidden, params[f"{key}.cls.weight"], params[f"{key}.cls.bias"])
    reg_map = conv2d(hidden, params[f"{key}.reg.weight"], params[f"{key}.reg.bias"])
    return cls_map, reg_map


def forward(image: Tensor, config: ModelConfig, params: ModelParams) -> List[Tuple[Tensor, Tensor]]:
    """Single backbone pass shared by all K branches; one (cls_map, reg_map) per branch."""
    features = extract_features(image, params)
    outputs = []
    for branch in config.branches:
        fused = fuse_branch(features, branch, params)
        outputs.append(branch_head(fused, branch, params))
    return outputs


def branch_map_sizes(config: ModelConfig, height: int, width: int) -> List[Tuple[int, int]]:
    """Output map size of each branch for a preprocessed input of ``height`` x ``width``."""
    return [(height // b.target_stride, width // b.target_stride) for b in config.branches]
