"""Central finite-difference checks of every tensor operation and of the full training loss."""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from mbfcn_cli.anchors import Box, anchors_for_maps, match
from mbfcn_cli.constants import GRADCHECK_EPS, GRADCHECK_INSTANCES, GRADCHECK_LOSS_TOLERANCE, GRADCHECK_TOLERANCE
from mbfcn_cli.model import BackboneConfig, BranchConfig, ModelConfig, ModelParams, build_model, forward
from mbfcn_cli.tensor import (
    Tape,
    Tensor,
    bilinear_upsample,
    concat_channels,
    conv2d,
    max_pool2d,
    reduce_sum,
    relu,
    softmax_pair,
)
from mbfcn_cli.training import BranchSample, TrainConfig, multibranch_loss, sample_branch
from mbfcn_cli.utils import derive_rng

Function = Callable[..., Tensor]
KINK_MARGIN = 1e-3


@dataclass
class GradcheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|, 1e-6)."""
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-6)
    return float(np.abs(analytic - numeric).max()) / scale


def numeric_gradient(loss: Callable[[], float], tensor: Tensor, eps: float = GRADCHECK_EPS) -> np.ndarray:
    """Central differences of ``loss`` with respect to every element of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = loss()
        flat[i] = saved - eps
        minus = loss()
        flat[i] = saved
        out[i] = (plus - minus) / (2 * eps)
    return grad


def check_function(fn: Function, inputs: Sequence[Tensor], rng: np.random.Generator) -> float:
    """
    Compare analytic and numeric gradients of ``fn`` at ``inputs``.

    The scalar root is a randomly weighted sum of the output so every output
    element contributes its own upstream gradient.
    """
    weights = rng.normal(size=fn(*inputs).shape)

    def loss() -> float:
        return float((fn(*inputs).data * weights).sum())

    for tensor in inputs:
        tensor.zero_grad()
    with Tape() as tape:
        reduce_sum(fn(*inputs), weights)
    tape.backward()

    worst = 0.0
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        worst = max(worst, relative_error(analytic, numeric_gradient(loss, tensor)))
    return worst


def _leaf(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.normal(size=shape)
    small = np.abs(x) < 0.01
    x[small] = np.where(x[small] < 0, -0.5, 0.5)
    return x


def _conv_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    while True:
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        k, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        pad, dilation = int(rng.integers(0, 2)), int(rng.integers(1, 3))
        if h + 2 * pad >= dilation * (k - 1) + 1 and w + 2 * pad >= dilation * (k - 1) + 1:
            break
    inputs = [
        _leaf(rng.normal(size=(1, c_in, h, w))),
        _leaf(rng.normal(size=(c_out, c_in, k, k))),
        _leaf(rng.normal(size=(1, c_out, 1, 1))),
    ]
    return (lambda x, wt, b: conv2d(x, wt, b, stride=stride, pad=pad, dilation=dilation)), inputs


def _relu_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    shape = (1, int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    return relu, [_leaf(_away_from_zero(rng, shape))]


def _pool_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    k, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    shape = (1, int(rng.integers(1, 3)), int(rng.integers(k, 7)), int(rng.integers(k, 7)))
    # distinct values 0.01 apart keep every window's maximum unique under perturbation
    values = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01
    return (lambda x: max_pool2d(x, k, stride)), [_leaf(values)]


def _upsample_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    f = int(rng.choice([2, 3, 4]))
    shape = (1, int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return (lambda x: bilinear_upsample(x, f)), [_leaf(rng.normal(size=shape))]


def _concat_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    inputs = [_leaf(rng.normal(size=(1, int(rng.integers(1, 4)), h, w))) for _ in range(int(rng.integers(1, 4)))]
    return (lambda *xs: concat_channels(xs)), inputs


def _softmax_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    shape = (1, 2 * int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return softmax_pair, [_leaf(rng.normal(size=shape))]


def _composite_case(rng: np.random.Generator) -> Tuple[Function, List[Tensor]]:
    def block(x, wt, b):
        return relu(conv2d(x, wt, b, pad=1))

    while True:
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        size = int(rng.integers(3, 6))
        inputs = [
            _leaf(rng.normal(size=(1, c_in, size, size))),
            _leaf(rng.normal(size=(c_out, c_in, 3, 3))),
            _leaf(rng.normal(size=(1, c_out, 1, 1))),
        ]
        pre = conv2d(inputs[0], inputs[1], inputs[2], pad=1).data
        if np.abs(pre).min() >= KINK_MARGIN:
            return block, inputs


OPERATION_CASES = (
    ("conv2d", _conv_case),
    ("relu", _relu_case),
    ("max_pool2d", _pool_case),
    ("bilinear_upsample", _upsample_case),
    ("concat_channels", _concat_case),
    ("softmax_pair", _softmax_case),
    ("conv2d+relu", _composite_case),
)


def check_operation(name: str, instances: int, seed: int) -> float:
    """Worst relative error of operation ``name`` over ``instances`` random cases."""
    make_case = dict(OPERATION_CASES)[name]
    worst = 0.0
    for index in range(instances):
        rng = derive_rng(seed, name, index)
        fn, inputs = make_case(rng)
        worst = max(worst, check_function(fn, inputs, rng))
    return worst


def tiny_model_config() -> ModelConfig:
    """One conv per stage, 4 channels everywhere, the default two branches with 4-channel heads."""
    base = ModelConfig()
    branches = tuple(BranchConfig(b.sources, b.target_stride, head_dim=4) for b in base.branches)
    return ModelConfig(backbone=BackboneConfig(widths=(4, 4, 4, 4), convs_per_stage=1), branches=branches)


def _loss_setup(seed: int, attempt: int):
    rng = derive_rng(seed, "loss", attempt)
    config = tiny_model_config()
    params = build_model(config, seed + attempt).astype(np.float64)
    # heads at 10x their initial scale
    for name, tensor in params.items():
        if name.endswith(".weight") and not name.startswith("backbone."):
            tensor.data *= 10.0
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 16, 16)))
    gts = [Box(2.0, 3.0, 10.0, 11.0)]
    cfg = TrainConfig(batch_per_branch=16, lambdas=(2.0,), gammas=(1.0,))

    with Tape() as tape:
        outputs = forward(image, config, params)
    kinked = any(
        entry.op == "relu" and np.abs(entry.inputs[0].data).min() < KINK_MARGIN for entry in tape.entries
    )
    probs = [softmax_pair(cls_map) for cls_map, _ in outputs]
    anchor_sets = anchors_for_maps(config.branches, [p.shape[2:] for p in probs])
    samples: List[BranchSample] = []
    for prob_map, (_, reg_map), anchors in zip(probs, outputs, anchor_sets):
        matched = match(anchors, gts, cfg.pos_iou, cfg.neg_iou)
        sample = sample_branch(matched, prob_map.data, reg_map.data, anchors, cfg, rng)
        residual = np.abs(sample.preds - sample.targets)
        kinked = kinked or bool((np.abs(residual - 1.0) < KINK_MARGIN).any())
        samples.append(sample)
    return config, params, image, samples, anchor_sets, cfg, kinked


def check_full_loss(seed: int) -> float:
    """
    Gradient of the multi-branch loss with respect to every trainable parameter of a tiny model.

    The sampled anchors are held fixed; parameter draws whose ReLU inputs or
    smooth-L1 residuals sit on a kink are redrawn.
    """
    attempt = 0
    while True:
        config, params, image, samples, anchor_sets, cfg, kinked = _loss_setup(seed, attempt)
        if not kinked:
            break
        attempt += 1

    def loss_of(params: ModelParams) -> Tensor:
        outputs = forward(image, config, params)
        probs = [softmax_pair(cls_map) for cls_map, _ in outputs]
        regs = [reg_map for _, reg_map in outputs]
        out, _ = multibranch_loss(probs, regs, samples, anchor_sets, cfg)
        return out

    params.zero_grad()
    with Tape() as tape:
        loss_of(params)
    tape.backward()

    worst = 0.0
    for tensor in params.trainable():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = numeric_gradient(lambda: float(loss_of(params).data.sum()), tensor)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_gradcheck(
    instances: int = GRADCHECK_INSTANCES,
    seed: int = 0,
    tolerance: float = GRADCHECK_TOLERANCE,
    loss_tolerance: float = GRADCHECK_LOSS_TOLERANCE,
) -> List[GradcheckResult]:
    """
    Run the whole suite in float64.

    Args:
        instances: Random cases per operation
        seed: Base seed of the case generators
        tolerance: Maximum accepted relative error per operation
        loss_tolerance: Maximum accepted relative error of the full loss

    Returns:
        One result per operation plus one for the full loss
    """
    results = [
        GradcheckResult(name, instances, check_operation(name, instances, seed), tolerance)
        for name, _ in OPERATION_CASES
    ]
    results.append(GradcheckResult("multibranch loss (tiny model)", 1, check_full_loss(seed), loss_tolerance))
    return results
