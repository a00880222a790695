"""
Differentiable operations.

Each op is a registered :class:`Function` plus a thin functional wrapper that
validates shapes and raises :class:`DimensionError` or
:class:`ConfigurationError` naming the offending shapes. Broadcasting is
limited to bias addition along one axis and scalar scaling; everything else
needs an explicit reshape.
"""
from typing import List, Optional, Sequence, Tuple
import math

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, DimensionError
from .registry import register
from .tensor import Function, Tensor

SQRT_2 = math.sqrt(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
LAYER_NORM_EPS = 1e-6


def _axis_shape(ndim: int, axis: int, size: int) -> Tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = size
    return tuple(shape)


def _other_axes(ndim: int, axis: int) -> Tuple[int, ...]:
    return tuple(a for a in range(ndim) if a != axis)


def _check_odd_kernel(k: int, op: str):
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"{op} needs an odd kernel size, got {k}")


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

@register
class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


@register
class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


@register
class Scale(Function):
    name = "scale"

    def forward(self, x, factor):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


@register
class AddBias(Function):
    name = "add_bias"

    def forward(self, x, bias, axis):
        self.axis = axis % x.ndim
        return x + bias.reshape(_axis_shape(x.ndim, self.axis, bias.shape[0]))

    def backward(self, grad):
        return grad, grad.sum(axis=_other_axes(grad.ndim, self.axis))


@register
class ScaleSamples(Function):
    name = "scale_samples"

    def forward(self, x, factors):
        self.factors = factors.reshape(_axis_shape(x.ndim, 0, x.shape[0]))
        return x * self.factors

    def backward(self, grad):
        return (grad * self.factors,)


@register
class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


@register
class Permute(Function):
    name = "permute"

    def forward(self, x, axes):
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(np.transpose(x, axes))

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


@register
class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


@register
class SliceAxis(Function):
    name = "slice_axis"

    def forward(self, x, start, stop, axis):
        self.in_shape = x.shape
        self.index = tuple(slice(start, stop) if a == axis else slice(None) for a in range(x.ndim))
        return x[self.index].copy()

    def backward(self, grad):
        full = np.zeros(self.in_shape)
        full[self.index] = grad
        return (full,)


@register
class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.in_shape, float(grad)),)


@register
class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.mean())

    def backward(self, grad):
        return (np.full(self.in_shape, float(grad) / max(1, int(np.prod(self.in_shape)))),)


@register
class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        return (
            np.matmul(grad, np.swapaxes(self.b, -1, -2)),
            np.matmul(np.swapaxes(self.a, -1, -2), grad),
        )


@register
class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


@register
class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gamma, beta, axis, eps):
        self.axis = axis % x.ndim
        shape = _axis_shape(x.ndim, self.axis, x.shape[self.axis])
        mu = x.mean(axis=self.axis, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=self.axis, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        self.gamma = gamma.reshape(shape)
        return self.x_hat * self.gamma + beta.reshape(shape)

    def backward(self, grad):
        others = _other_axes(grad.ndim, self.axis)
        d_gamma = (grad * self.x_hat).sum(axis=others)
        d_beta = grad.sum(axis=others)
        d_hat = grad * self.gamma
        mean_d = d_hat.mean(axis=self.axis, keepdims=True)
        mean_dx = (d_hat * self.x_hat).mean(axis=self.axis, keepdims=True)
        dx = self.inv_std * (d_hat - mean_d - self.x_hat * mean_dx)
        return dx, d_gamma, d_beta


@register
class HardSwish(Function):
    name = "hardswish"

    def forward(self, x):
        self.x = x
        return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0

    def backward(self, grad):
        x = self.x
        slope = np.where(x < -3.0, 0.0, np.where(x > 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
        return (grad * slope,)


@register
class Gelu(Function):
    name = "gelu"

    def forward(self, x, approximate):
        self.x = x
        self.approximate = approximate
        if approximate == "tanh":
            self.t = np.tanh(SQRT_2_OVER_PI * (x + 0.044715 * x ** 3))
            return 0.5 * x * (1.0 + self.t)
        self.cdf = 0.5 * (1.0 + erf(x / SQRT_2))
        return x * self.cdf

    def backward(self, grad):
        x = self.x
        if self.approximate == "tanh":
            t = self.t
            du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
            return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
        pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (self.cdf + x * pdf),)


@register
class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        _, _, h, w = self.in_shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.in_shape).copy(),)


# ---------------------------------------------------------------------------
# Spatial ops (NCHW)
# ---------------------------------------------------------------------------

def _window(padded: np.ndarray, i: int, j: int, out_h: int, out_w: int, stride: int):
    return padded[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]


def _window_index(i: int, j: int, out_h: int, out_w: int, stride: int):
    return (
        slice(None),
        slice(None),
        slice(i, i + stride * (out_h - 1) + 1, stride),
        slice(j, j + stride * (out_w - 1) + 1, stride),
    )


@register
class Conv2dDepthwise(Function):
    name = "conv2d_depthwise"

    def forward(self, x, kernel, bias, stride):
        b, c, h, w = x.shape
        k = kernel.shape[-1]
        pad = (k - 1) // 2
        self.k, self.pad, self.stride, self.in_shape = k, pad, stride, x.shape
        self.out_h, self.out_w = (h - 1) // stride + 1, (w - 1) // stride + 1
        self.padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        self.kernel = kernel
        out = np.zeros((b, c, self.out_h, self.out_w))
        for i in range(k):
            for j in range(k):
                patch = _window(self.padded, i, j, self.out_h, self.out_w, stride)
                out += patch * kernel[:, i, j][None, :, None, None]
        return out + bias[None, :, None, None]

    def backward(self, grad):
        d_padded = np.zeros_like(self.padded)
        d_kernel = np.zeros_like(self.kernel)
        for i in range(self.k):
            for j in range(self.k):
                patch = _window(self.padded, i, j, self.out_h, self.out_w, self.stride)
                d_kernel[:, i, j] = (grad * patch).sum(axis=(0, 2, 3))
                d_padded[_window_index(i, j, self.out_h, self.out_w, self.stride)] += (
                    grad * self.kernel[:, i, j][None, :, None, None]
                )
        _, _, h, w = self.in_shape
        p = self.pad
        return d_padded[:, :, p:p + h, p:p + w], d_kernel, grad.sum(axis=(0, 2, 3))


@register
class Conv2dPointwise(Function):
    name = "conv2d_pointwise"

    def forward(self, x, weight, bias):
        self.x, self.weight = x, weight
        out = np.einsum("oc,bchw->bohw", weight, x, optimize=True)
        return out + bias[None, :, None, None]

    def backward(self, grad):
        d_weight = np.einsum("bohw,bchw->oc", grad, self.x, optimize=True)
        dx = np.einsum("oc,bohw->bchw", self.weight, grad, optimize=True)
        return dx, d_weight, grad.sum(axis=(0, 2, 3))


@register
class Conv2dStrided(Function):
    name = "conv2d_strided"

    def forward(self, x, weight, bias, stride):
        b, c_in, h, w = x.shape
        c_out, _, k, _ = weight.shape
        pad = (k - 1) // 2
        self.k, self.pad, self.stride, self.in_shape = k, pad, stride, x.shape
        self.out_h, self.out_w = (h - 1) // stride + 1, (w - 1) // stride + 1
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        self.padded_shape = padded.shape
        self.cols = np.stack(
            [_window(padded, i, j, self.out_h, self.out_w, stride) for i in range(k) for j in range(k)],
            axis=2,
        )
        self.weight = weight.reshape(c_out, c_in, k * k)
        out = np.einsum("bckhw,ock->bohw", self.cols, self.weight, optimize=True)
        return out + bias[None, :, None, None]

    def backward(self, grad):
        c_out, c_in, kk = self.weight.shape
        d_weight = np.einsum("bohw,bckhw->ock", grad, self.cols, optimize=True)
        d_cols = np.einsum("bohw,ock->bckhw", grad, self.weight, optimize=True)
        d_padded = np.zeros(self.padded_shape)
        for index in range(kk):
            i, j = divmod(index, self.k)
            d_padded[_window_index(i, j, self.out_h, self.out_w, self.stride)] += d_cols[:, :, index]
        _, _, h, w = self.in_shape
        p = self.pad
        return (
            d_padded[:, :, p:p + h, p:p + w],
            d_weight.reshape(c_out, c_in, self.k, self.k),
            grad.sum(axis=(0, 2, 3)),
        )


@register
class Pool2d(Function):
    name = "pool2d"

    def forward(self, x, kind, k):
        b, c, h, w = x.shape
        pad = (k - 1) // 2
        self.kind, self.k, self.pad, self.in_shape = kind, k, pad, x.shape
        widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
        if kind == "avg":
            padded = np.pad(x, widths)
            valid = np.pad(np.ones((h, w)), ((pad, pad), (pad, pad)))
            total = np.zeros((b, c, h, w))
            count = np.zeros((h, w))
            for i in range(k):
                for j in range(k):
                    total += padded[:, :, i:i + h, j:j + w]
                    count += valid[i:i + h, j:j + w]
            self.count = count
            return total / count
        sentinel = -np.inf if kind == "max" else np.inf
        padded = np.pad(x, widths, constant_values=sentinel)
        windows = np.stack(
            [padded[:, :, i:i + h, j:j + w] for i in range(k) for j in range(k)], axis=-1
        )
        self.choice = windows.argmax(axis=-1) if kind == "max" else windows.argmin(axis=-1)
        return np.take_along_axis(windows, self.choice[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        b, c, h, w = self.in_shape
        p, k = self.pad, self.k
        d_padded = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for index in range(k * k):
            i, j = divmod(index, k)
            if self.kind == "avg":
                d_padded[:, :, i:i + h, j:j + w] += grad / self.count
            else:
                d_padded[:, :, i:i + h, j:j + w] += np.where(self.choice == index, grad, 0.0)
        return (d_padded[:, :, p:p + h, p:p + w],)


@register
class CrossEntropy(Function):
    name = "cross_entropy"

    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        self.labels = labels
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_probs[rows, labels].mean())

    def backward(self, grad):
        n = self.probs.shape[0]
        d_logits = self.probs.copy()
        d_logits[np.arange(n), self.labels] -= 1.0
        return (d_logits * (float(grad) / n),)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along one axis of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match axis {axis} of {x.shape}")
    return AddBias.apply(x, bias, axis=axis)


def scale_samples(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply each sample (axis 0) by a constant factor."""
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != (x.shape[0],):
        raise DimensionError(f"scale_samples: factors shape {factors.shape} does not match batch of {x.shape}")
    return ScaleSamples.apply(x, factors=factors)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return Reshape.apply(x, shape=shape)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {x.shape}")
    return Permute.apply(x, axes=axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[a] != ref[a] for a in range(len(ref)) if a != axis):
            raise DimensionError(f"concat along {axis}: shapes {[t.shape for t in tensors]} disagree")
    return Concat.apply(*tensors, axis=axis)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    return SliceAxis.apply(x, start=start, stop=stop, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> List[Tensor]:
    """Split ``x`` into contiguous chunks of the given sizes along ``axis``."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_axis(x, start, start + size, axis))
        start += size
    return parts


def sum_all(x: Tensor) -> Tensor:
    return Sum.apply(x)


def mean_all(x: Tensor) -> Tensor:
    return Mean.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    Leading axes, when present, must be identical (batched product).
    """
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply ``x @ weight + bias`` over the last axis of ``x``; weight is (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add_bias(out, bias, axis=1)
    return reshape(out, lead + (weight.shape[1],))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis % x.ndim)


def layer_norm(x: Tensor, normalized_dim: int, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalize over one axis of ``x`` and apply the affine ``gamma``/``beta``.

    Args:
        x: Input tensor
        normalized_dim: Axis holding the normalized features (1 for NCHW, -1 for tokens)
        gamma: Scale, one entry per feature
        beta: Shift, one entry per feature
        eps: Variance floor
    """
    size = x.shape[normalized_dim]
    if gamma.shape != (size,) or beta.shape != (size,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match "
            f"axis {normalized_dim} of {x.shape}"
        )
    return LayerNorm.apply(x, gamma, beta, axis=normalized_dim, eps=eps)


def hardswish(x: Tensor) -> Tensor:
    return HardSwish.apply(x)


def gelu(x: Tensor, approximate: str = "none") -> Tensor:
    """GELU, exact erf form by default; ``approximate="tanh"`` selects the tanh fit."""
    if approximate not in ("none", "tanh"):
        raise ConfigurationError(f"gelu: unknown approximation {approximate!r}")
    return Gelu.apply(x, approximate=approximate)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects B×C×H×W, got {x.shape}")
    return GlobalAvgPool.apply(x)


def conv2d_depthwise(x: Tensor, kernel: Tensor, bias: Tensor, k: Optional[int] = None, stride: int = 1) -> Tensor:
    """
    Per-channel k×k convolution with zero padding (k-1)/2.

    Stride 1 preserves the spatial size; stride 2 yields ceil(H/2)×ceil(W/2).
    """
    k = kernel.shape[-1] if k is None else k
    _check_odd_kernel(k, "conv2d_depthwise")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d_depthwise: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or kernel.shape != (x.shape[1], k, k) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"conv2d_depthwise: input {x.shape}, kernel {kernel.shape}, bias {bias.shape} disagree"
        )
    return Conv2dDepthwise.apply(x, kernel, bias, stride=stride)


def conv2d_pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1×1 convolution; weight is Cout×Cin."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv2d_pointwise: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree"
        )
    return Conv2dPointwise.apply(x, weight, bias)


def conv2d_strided(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Dense 3×3 convolution with padding 1 and stride 1 or 2."""
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d_strided: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv2d_strided: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree"
        )
    _check_odd_kernel(weight.shape[-1], "conv2d_strided")
    return Conv2dStrided.apply(x, weight, bias, stride=stride)


def pool2d(x: Tensor, kind: str, k: int) -> Tensor:
    """
    Resolution-preserving min/max/avg pooling with stride 1.

    Padding never wins a min/max window; avg divides by the in-bounds count.
    """
    if kind not in ("min", "max", "avg"):
        raise ConfigurationError(f"pool2d: unknown kind {kind!r}")
    _check_odd_kernel(k, "pool2d")
    if x.ndim != 4:
        raise DimensionError(f"pool2d expects B×C×H×W, got {x.shape}")
    return Pool2d.apply(x, kind=kind, k=k)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the labelled class."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"cross_entropy: labels must lie in [0, {logits.shape[1]})")
    return CrossEntropy.apply(logits, labels=labels)
