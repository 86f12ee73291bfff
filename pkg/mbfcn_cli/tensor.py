"""Dense 4-D tensors, forward operations and their analytic adjoints.

Operations record themselves on the active ``Tape`` (see ``Tape.__enter__``)
whenever one of their inputs requires a gradient. ``backward`` replays the
recorded adjoints in reverse order.
"""

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mbfcn_cli.errors import ConfigError, NumericError, StateError

_ACTIVE_TAPE = contextvars.ContextVar("mbfcn_active_tape", default=None)

Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """4-D (n, c, h, w) array with an optional gradient slot."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        fixed: bool = False,
        dtype=None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        if array.ndim != 4:
            raise ConfigError(f"tensor '{name}' must be 4-D (n, c, h, w), got shape {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.fixed = fixed
        self.requires_grad = requires_grad and not fixed
        self.retain_grad = False
        self.name = name

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int], dtype=np.float32, **kwargs) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), **kwargs)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ConfigError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    """One recorded operation; forward intermediates live in the adjoint closure."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


class Tape:
    """Ordered record of operations, active inside a ``with`` block."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, adjoint: Adjoint) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, adjoint))

    def backward(self, loss_grad: float = 1.0) -> None:
        """Propagate ``loss_grad`` from the last recorded output to every leaf.

        Leaf gradients accumulate across calls; intermediate gradients are only
        stored on tensors flagged ``retain_grad``.
        """
        if not self.entries:
            raise StateError("backward called before any forward operation was recorded")

        root = self.entries[-1].output
        upstream: Dict[int, np.ndarray] = {id(root): np.full(root.shape, loss_grad, dtype=root.dtype)}
        tensors: Dict[int, Tensor] = {id(root): root}

        for entry in reversed(self.entries):
            grad_out = upstream.pop(id(entry.output), None)
            if grad_out is None:
                continue
            if entry.output.retain_grad:
                entry.output.accumulate_grad(grad_out)
            for tensor, grad in zip(entry.inputs, entry.adjoint(grad_out)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in upstream:
                    upstream[key] = upstream[key] + grad
                else:
                    upstream[key] = grad
                    tensors[key] = tensor

        for key, grad in upstream.items():
            tensors[key].accumulate_grad(grad)


def backward(tape: Tape, loss_grad: float = 1.0) -> None:
    """Populate gradients of every leaf tensor reachable from the tape's last output."""
    tape.backward(loss_grad)


def _record(op: str, inputs: Sequence[Tensor], output: Tensor, adjoint: Adjoint) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, adjoint)
    return output


def _check_finite(tensor: Tensor, op: str) -> None:
    if not np.isfinite(tensor.data).all():
        label = tensor.name or "parameter"
        raise NumericError(f"{op}: {label} contains non-finite values")


def _window(start: int, count: int, step: int) -> slice:
    return slice(start, start + step * (count - 1) + 1, step)


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """
    2-D cross-correlation (no kernel flip).

    Args:
        input: (n, c_in, h, w)
        weight: (c_out, c_in, kh, kw)
        bias: (1, c_out, 1, 1) or None
        stride: output step, >= 1
        pad: zero padding on every side
        dilation: spacing between kernel taps, >= 1

    Returns:
        (n, c_out, h', w') with h' = floor((h + 2 pad - dilation (kh - 1) - 1) / stride) + 1
    """
    n, c_in, h, w = input.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ConfigError(
            f"conv2d: input has {c_in} channels but weight {weight.name or ''} {weight.shape} expects {w_in}"
        )
    if stride < 1 or dilation < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid geometry stride={stride} pad={pad} dilation={dilation}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ConfigError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    out_h = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw} (dilation {dilation}, pad {pad})")
    _check_finite(weight, "conv2d")
    if bias is not None:
        _check_finite(bias, "conv2d")

    x = input.data
    kernel = weight.data
    dtype = np.result_type(x.dtype, kernel.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    def taps():
        for i in range(kh):
            for j in range(kw):
                rows = _window(i * dilation, out_h, stride)
                cols = _window(j * dilation, out_w, stride)
                yield i, j, (slice(None), slice(None), rows, cols)

    out = np.zeros((n, c_out, out_h, out_w), dtype=dtype)
    for i, j, region in taps():
        out += np.tensordot(kernel[:, :, i, j], xp[region], axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.data

    def adjoint(grad: np.ndarray):
        grad_xp = np.zeros(xp.shape, dtype=dtype)
        grad_w = np.zeros(kernel.shape, dtype=dtype)
        for i, j, region in taps():
            grad_w[:, :, i, j] = np.tensordot(grad, xp[region], axes=([0, 2, 3], [0, 2, 3]))
            grad_xp[region] += np.tensordot(kernel[:, :, i, j], grad, axes=([0], [1])).transpose(1, 0, 2, 3)
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
        grad_b = grad.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = [input, weight] + ([bias] if bias is not None else [])
    return _record("conv2d", inputs, Tensor(out), adjoint)


def relu(input: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    x = input.data
    out = np.maximum(x, 0).astype(x.dtype, copy=False)

    def adjoint(grad: np.ndarray):
        return (grad * (x > 0),)

    return _record("relu", [input], Tensor(out), adjoint)


def max_pool2d(input: Tensor, k: int, stride: int) -> Tensor:
    """
    Windowed maximum.

    Ties go to the first position of the window in row-major order, and the
    adjoint routes the gradient to that position only.
    """
    if k < 1 or stride < 1:
        raise ConfigError(f"max_pool2d: kernel ({k}) and stride ({stride}) must be >= 1")
    n, c, h, w = input.shape
    if h < k or w < k:
        raise ConfigError(f"max_pool2d: input {h}x{w} smaller than kernel {k}")
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    x = input.data
    regions = [
        (slice(None), slice(None), _window(i, out_h, stride), _window(j, out_w, stride))
        for i in range(k)
        for j in range(k)
    ]
    stack = np.stack([x[region] for region in regions])
    argmax = stack.argmax(axis=0)
    out = np.take_along_axis(stack, argmax[None], axis=0)[0]

    def adjoint(grad: np.ndarray):
        grad_x = np.zeros(x.shape, dtype=x.dtype)
        for index, region in enumerate(regions):
            grad_x[region] += np.where(argmax == index, grad, 0)
        return (grad_x,)

    return _record("max_pool2d", [input], Tensor(out), adjoint)


def bilinear_filler(f: int) -> np.ndarray:
    """
    Fixed bilinear interpolation kernel for up-sampling by ``f``.

    Args:
        f: up-sampling factor, >= 2

    Returns:
        (k, k) kernel with k = 2f - (f mod 2)
    """
    if f < 2:
        raise ConfigError(f"bilinear filler factor must be >= 2, got {f}")
    size = 2 * f - f % 2
    center = (2 * f - 1 - f % 2) / (2.0 * f)
    taps = 1.0 - np.abs(np.arange(size) / f - center)
    return np.outer(taps, taps)


def filler_tensor(f: int, dtype=np.float32, name: str = "") -> Tensor:
    """The bilinear filler wrapped as an immutable (1, 1, k, k) tensor."""
    kernel = bilinear_filler(f)
    return Tensor(kernel[None, None].astype(dtype), name=name or f"filler.up{f}", fixed=True)


def bilinear_upsample(input: Tensor, f: int, kernel: Optional[Tensor] = None) -> Tensor:
    """
    Per-channel transposed convolution with the bilinear filler.

    Stride is ``f`` and padding ceil((k - f) / 2), so the output is exactly
    f*h x f*w. The kernel is never differentiated.
    """
    weights = bilinear_filler(f) if kernel is None else kernel.data[0, 0]
    size = weights.shape[0]
    if weights.shape != (2 * f - f % 2,) * 2:
        raise ConfigError(f"bilinear_upsample: kernel {weights.shape} does not fit factor {f}")
    pad = math.ceil((size - f) / 2)
    n, c, h, w = input.shape
    x = input.data
    weights = weights.astype(x.dtype)
    full_shape = (n, c, (h - 1) * f + size, (w - 1) * f + size)
    crop = (slice(None), slice(None), slice(pad, pad + f * h), slice(pad, pad + f * w))

    def taps():
        for i in range(size):
            for j in range(size):
                yield weights[i, j], (slice(None), slice(None), _window(i, h, f), _window(j, w, f))

    full = np.zeros(full_shape, dtype=x.dtype)
    for weight, region in taps():
        full[region] += weight * x
    out = full[crop].copy()

    def adjoint(grad: np.ndarray):
        grad_full = np.zeros(full_shape, dtype=x.dtype)
        grad_full[crop] = grad
        grad_x = np.zeros(x.shape, dtype=x.dtype)
        for weight, region in taps():
            grad_x += weight * grad_full[region]
        return (grad_x,)

    return _record("bilinear_upsample", [input], Tensor(out), adjoint)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all inputs must share (n, h, w)."""
    if not inputs:
        raise ConfigError("concat_channels needs at least one input")
    first = inputs[0].shape
    for other in inputs[1:]:
        if (other.shape[0], other.shape[2], other.shape[3]) != (first[0], first[2], first[3]):
            raise ConfigError(f"concat_channels: spatial mismatch between {first} and {other.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def adjoint(grad: np.ndarray):
        return [grad[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs))]

    return _record("concat_channels", list(inputs), Tensor(out), adjoint)


def softmax_pair(logits: Tensor) -> Tensor:
    """Softmax over channel pairs (2a, 2a+1) = (background, face) of anchor slot a."""
    n, c, h, w = logits.shape
    if c % 2:
        raise ConfigError(f"softmax_pair needs an even channel count, got {c}")
    x = logits.data.reshape(n, c // 2, 2, h, w)
    shifted = np.exp(x - x.max(axis=2, keepdims=True))
    probs = shifted / shifted.sum(axis=2, keepdims=True)

    def adjoint(grad: np.ndarray):
        g = grad.reshape(probs.shape)
        grad_x = probs * (g - (g * probs).sum(axis=2, keepdims=True))
        return (grad_x.reshape(n, c, h, w),)

    return _record("softmax_pair", [logits], Tensor(probs.reshape(n, c, h, w)), adjoint)


def reduce_sum(input: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Scalar (1, 1, 1, 1) sum of ``input``, optionally weighted elementwise."""
    x = input.data
    if weights is not None:
        weights = np.asarray(weights, dtype=x.dtype)
        if weights.shape != x.shape:
            raise ConfigError(f"reduce_sum: weights {weights.shape} do not match input {x.shape}")
    total = (x * weights).sum() if weights is not None else x.sum()
    out = np.full((1, 1, 1, 1), total, dtype=x.dtype)

    def adjoint(grad: np.ndarray):
        scale = grad.reshape(())
        return ((weights if weights is not None else np.ones_like(x)) * scale,)

    return _record("reduce_sum", [input], Tensor(out), adjoint)


def sgd_step(
    params: Sequence[Tensor],
    velocity: Sequence[Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """
    In-place SGD with momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    Fixed tensors are skipped.
    """
    if len(params) != len(velocity):
        raise ConfigError(f"sgd_step: {len(params)} parameters but {len(velocity)} velocity buffers")
    for param, buffer in zip(params, velocity):
        if buffer.shape != param.shape:
            raise ConfigError(
                f"sgd_step: velocity shape {buffer.shape} does not match parameter '{param.name}' {param.shape}"
            )
        if param.fixed:
            continue
        step = buffer.data
        step *= momentum
        if param.grad is not None:
            step += param.grad
        if weight_decay:
            step += weight_decay * param.data
        param.data -= lr * step
