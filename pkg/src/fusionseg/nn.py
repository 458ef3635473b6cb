"""Differentiable layers and losses operating on a single sample.

Each layer's ``forward`` returns ``(output, cache)``; the caller keeps the
cache and hands it back to ``backward``.  Layers hold no per-sample state,
which lets a network push several samples through the same layer objects
before running any backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError
from .tensor import ConvKernel, Tensor, conv3d_backward, conv3d_valid, validate

# Regularization defaults; the baseline architecture's usual values.
DEFAULT_L1 = 1e-6
DEFAULT_L2 = 1e-4


@dataclass(eq=False)
class Parameter:
    """A learnable tensor with its gradient buffer.

    ``regularized`` is True for weights and False for biases.
    """

    name: str
    value: Tensor
    regularized: bool = True
    grad: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class LossReport:
    data_loss: float
    l1_penalty: float
    l2_penalty: float
    l1_coef: float = DEFAULT_L1
    l2_coef: float = DEFAULT_L2

    @property
    def total(self) -> float:
        return self.data_loss + self.l1_coef * self.l1_penalty + self.l2_coef * self.l2_penalty


# Uniform bound = INIT_GAIN / sqrt(fan_in); sqrt(6) keeps activation variance
# roughly constant through rectifier layers.
INIT_GAIN = math.sqrt(6.0)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = INIT_GAIN) -> Tensor:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: identity shape, no parameters."""

    kind = "layer"
    name = ""

    def output_shape(self, shape):
        return tuple(shape)

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv3d(Layer):
    """Valid 3D convolution.  ``size=1`` gives the unit-kernel dense layer."""

    def __init__(self, name, in_channels, out_channels, size=3, rng=None,
                 dtype=np.float32, kind=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.name = name
        self.kind = kind or ("conv3" if size > 1 else "dense1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.size = size
        fan_in = in_channels * size ** 3
        self.weight = Parameter(
            f"{name}/w",
            uniform_init(rng, (out_channels, in_channels, size, size, size), fan_in, dtype))
        self.bias = Parameter(f"{name}/b", np.zeros(out_channels, dtype=dtype), regularized=False)
        # The first layer of a network has no upstream gradient to feed.
        self.input_grad = True

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weight.value, self.bias.value)

    def output_shape(self, shape):
        c, *spatial = shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: channel mismatch (input, expected C_in={self.in_channels})",
                             shape, (self.in_channels,))
        return (self.out_channels,) + tuple(n - self.size + 1 for n in spatial)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        return conv3d_valid(x, self.kernel), x

    def backward(self, grad, cache):
        gx, gw, gb = conv3d_backward(cache, self.kernel, grad, input_grad=self.input_grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


def relu_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(grad: Tensor, mask: Tensor) -> Tensor:
    return np.where(mask, grad, grad.dtype.type(0))


class ReLU(Layer):
    kind = "activation"

    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x, train=False, rng=None):
        return relu_forward(x)

    def backward(self, grad, cache):
        return relu_backward(grad, cache)


def check_rate(rate: float):
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")


def dropout_forward(x: Tensor, rate: float, mode: str = "train", rng=None, mask=None):
    """Inverted dropout.

    Returns ``(y, mask)`` where ``mask`` already carries the ``1/(1-rate)``
    scale (None in eval mode).  Passing ``mask`` reuses a frozen mask.
    """
    check_rate(rate)
    if mode == "eval":
        return x, None
    if mode != "train":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mask is None:
        if rate == 0.0:
            mask = np.ones_like(x)
        else:
            keep = rng.random(x.shape) >= rate
            mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad: Tensor, mask) -> Tensor:
    return grad if mask is None else grad * mask


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate, name="dropout"):
        check_rate(rate)
        self.rate = rate
        self.name = name

    def forward(self, x, train=False, rng=None):
        return dropout_forward(x, self.rate, "train" if train else "eval", rng)

    def backward(self, grad, cache):
        return dropout_backward(grad, cache)


def softmax(logits: Tensor, axis: int = 0) -> Tensor:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean per-voxel cross-entropy (nats) of class-first ``logits``.

    ``logits`` is ``(K, *spatial)`` and ``labels`` is ``spatial`` of class ids.
    Returns ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / n_voxels``.
    """
    n_classes = logits.shape[0]
    if logits.shape[1:] != labels.shape:
        raise ShapeError("logits/labels spatial mismatch", logits.shape, labels.shape)
    validate(logits, "logits")
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[where]} out of range [0, {n_classes}) at voxel {where}")
    z = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0))
    idx = labels.astype(np.intp)[None]
    picked = np.take_along_axis(z, idx, axis=0)[0]
    n_vox = labels.size
    loss = float(np.sum(log_norm - picked, dtype=np.float64) / n_vox)
    grad = np.exp(z - log_norm[None])
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=0) - 1, axis=0)
    grad /= n_vox
    return loss, grad


def regularization(params, l1: float = 0.0, l2: float = 0.0, accumulate: bool = False):
    """L1 (sum |w|) and L2 (half sum w^2) penalties over regularized parameters.

    With ``accumulate`` the terms ``l1*sign(w) + l2*w`` are added to each
    weight's gradient buffer.
    """
    l1_sum = 0.0
    l2_sum = 0.0
    for p in params:
        if not p.regularized:
            continue
        w = p.value
        l1_sum += float(np.abs(w).sum(dtype=np.float64))
        l2_sum += 0.5 * float(np.square(w, dtype=np.float64).sum())
        if accumulate:
            p.grad += (l1 * np.sign(w) + l2 * w).astype(p.grad.dtype)
    return l1_sum, l2_sum
