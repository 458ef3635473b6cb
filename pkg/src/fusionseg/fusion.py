"""Cross-stream fusion: elementwise max, elementwise sum and learned 1x1x1 conv.

All three reduce a stacked ``(N, C, D, H, W)`` tensor to ``(C, D, H, W)``.
Max and sum work per channel; conv fusion concatenates the streams into
``N*C`` channels and maps them back to ``C`` with a unit kernel.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .nn import Layer, Parameter
from .tensor import ConvKernel, Tensor, conv3d_backward, conv3d_valid

POINTS = ("early", "middle", "late")
FUNCTIONS = ("max", "sum", "conv")


@dataclass(frozen=True)
class FusionSpec:
    point: str
    function: str

    def __post_init__(self):
        if self.point not in POINTS:
            raise ConfigurationError(f"fusion point must be one of {POINTS}, got {self.point!r}")
        if self.function not in FUNCTIONS:
            raise ConfigurationError(f"fusion function must be one of {FUNCTIONS}, got {self.function!r}")

    def __str__(self):
        return f"point={self.point} function={self.function}"

    @classmethod
    def parse(cls, text: str) -> "FusionSpec":
        """Parse ``point=<p> function=<f>`` (either order, whitespace separated)."""
        fields = dict(re.findall(r"(\w+)=(\w+)", text))
        leftover = re.sub(r"\w+=\w+", "", text).strip()
        if leftover or set(fields) != {"point", "function"}:
            raise ConfigurationError(f"cannot parse fusion spec {text!r}; expected 'point=<p> function=<f>'")
        return cls(fields["point"], fields["function"])


def _check_streams(streams: Tensor):
    if streams.ndim != 5:
        raise ShapeError("fusion input must be (N, C, D, H, W)", streams.shape)
    if streams.shape[0] < 2:
        raise ConfigurationError(f"fusion needs at least two streams, got {streams.shape[0]}")


def fuse_max(streams: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(max over streams, argmax)``; ties resolve to the lowest stream."""
    _check_streams(streams)
    idx = np.argmax(streams, axis=0)
    out = np.take_along_axis(streams, idx[None], axis=0)[0]
    return out, idx


def fuse_max_backward(grad: Tensor, argmax: Tensor, n_streams: int) -> Tensor:
    out = np.zeros((n_streams,) + grad.shape, dtype=grad.dtype)
    np.put_along_axis(out, argmax[None], grad[None], axis=0)
    return out


def fuse_sum(streams: Tensor) -> Tensor:
    """Left-to-right sum over the stream axis."""
    _check_streams(streams)
    out = streams[0].copy()
    for s in streams[1:]:
        out += s
    return out


def fuse_sum_backward(grad: Tensor, n_streams: int) -> Tensor:
    return np.broadcast_to(grad, (n_streams,) + grad.shape).copy()


def _check_fusion_kernel(streams: Tensor, kernel: ConvKernel):
    n, c = streams.shape[:2]
    expected = (c, n * c, 1, 1, 1)
    if kernel.weights.shape != expected:
        raise ConfigurationError(
            f"conv fusion kernel shape {kernel.weights.shape} does not match expected {expected}")


def fuse_conv(streams: Tensor, kernel: ConvKernel) -> Tensor:
    """Concatenate streams in order, then apply the ``(C, N*C, 1, 1, 1)`` kernel."""
    _check_streams(streams)
    _check_fusion_kernel(streams, kernel)
    n, c = streams.shape[:2]
    # C-order stacking makes this reshape identical to concat_channels(streams).
    return conv3d_valid(streams.reshape((n * c,) + streams.shape[2:]), kernel)


def fuse_conv_backward(streams: Tensor, kernel: ConvKernel, grad: Tensor):
    """Returns ``(grad_streams, grad_weights, grad_bias)``."""
    n, c = streams.shape[:2]
    gx, gw, gb = conv3d_backward(streams.reshape((n * c,) + streams.shape[2:]), kernel, grad)
    return gx.reshape(streams.shape), gw, gb


def averaging_kernel(n_streams: int, channels: int, dtype=np.float64) -> np.ndarray:
    """Weights whose output channel ``c`` is the mean of channel ``c`` over streams."""
    w = np.zeros((channels, n_streams * channels, 1, 1, 1), dtype=dtype)
    for n in range(n_streams):
        w[np.arange(channels), n * channels + np.arange(channels)] = 1.0 / n_streams
    return w


class Fusion(Layer):
    """Fusion node of a multi-stream network."""

    kind = "fusion"

    def __init__(self, function, n_streams, channels, rng=None, dtype=np.float32, name="fusion"):
        if function not in FUNCTIONS:
            raise ConfigurationError(f"fusion function must be one of {FUNCTIONS}, got {function!r}")
        if n_streams < 2:
            raise ConfigurationError(f"fusion needs at least two streams, got {n_streams}")
        self.name = name
        self.function = function
        self.n_streams = n_streams
        self.channels = channels
        self.weight = self.bias = None
        if function == "conv":
            if rng is None:
                rng = np.random.default_rng(0)
            w = averaging_kernel(n_streams, channels, np.float64)
            w += rng.uniform(-0.01, 0.01, size=w.shape)
            self.weight = Parameter(f"{name}/w", w.astype(dtype))
            self.bias = Parameter(f"{name}/b", np.zeros(channels, dtype=dtype), regularized=False)

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weight.value, self.bias.value)

    def parameters(self):
        return [] if self.weight is None else [self.weight, self.bias]

    def output_shape(self, shape):
        n, *per_stream = shape
        if n != self.n_streams or per_stream[0] != self.channels:
            raise ShapeError(f"{self.name}: unexpected stacked input", shape,
                             (self.n_streams, self.channels))
        return tuple(per_stream)

    def forward(self, x, train=False, rng=None):
        if self.function == "max":
            return fuse_max(x)
        if self.function == "sum":
            return fuse_sum(x), None
        return fuse_conv(x, self.kernel), x

    def backward(self, grad, cache):
        if self.function == "max":
            return fuse_max_backward(grad, cache, self.n_streams)
        if self.function == "sum":
            return fuse_sum_backward(grad, self.n_streams)
        gx, gw, gb = fuse_conv_backward(cache, self.kernel, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx
