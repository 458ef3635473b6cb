"""Dense tensor helpers and 3D valid convolution.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order with the
layout ``(channel, depth, height, width)``.  A stacked multi-stream tensor
carries the stream/modality axis first: ``(N, C, D, H, W)``.

Two convolution paths are provided:

* :func:`conv3d_reference` - direct nested loops, slow, used as an oracle.
* :func:`conv3d_valid` / :func:`conv3d_backward` - im2col lowering onto a
  single matrix multiply per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

Tensor = np.ndarray

SUPPORTED_DTYPES = (np.float32, np.float64)


@dataclass
class ConvKernel:
    """Weights ``(C_out, C_in, k, k, k)`` plus bias ``(C_out,)``."""

    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
            raise ShapeError("kernel weights must be (C_out, C_in, k, k, k)", w.shape)
        if w.shape[2] % 2 != 1:
            raise ShapeError("kernel spatial extent must be odd", w.shape)
        if b.shape != (w.shape[0],):
            raise ShapeError("bias must have one entry per output channel", b.shape, w.shape)

    @property
    def size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def validate(x: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NumericError` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")
    return x


def output_extent(extent: int, k: int) -> int:
    return extent - k + 1


def _check_conv(x: Tensor, kernel: ConvKernel):
    if x.ndim != 4:
        raise ShapeError("conv3d input must be (C_in, D, H, W)", x.shape)
    if x.shape[0] != kernel.in_channels:
        raise ShapeError("conv3d channel mismatch (input, kernel)", x.shape, kernel.weights.shape)
    k = kernel.size
    if min(x.shape[1:]) < k:
        raise ShapeError("conv3d input smaller than kernel (input, kernel)", x.shape, kernel.weights.shape)


def _im2col(x: Tensor, k: int) -> Tensor:
    c, d, h, w = x.shape
    do, ho, wo = d - k + 1, h - k + 1, w - k + 1
    cols = np.empty((c, k, k, k, do, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, a, b, e] = x[:, a:a + do, b:b + ho, e:e + wo]
    return cols.reshape(c * k ** 3, do * ho * wo)


def conv3d_valid(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Stride-1, unpadded 3D cross-correlation of one sample.

    ``out[c, d, h, w] = bias[c] + sum_{c', a, b, e} W[c, c', a, b, e] * x[c', d+a, h+b, w+e]``
    """
    _check_conv(x, kernel)
    validate(x, "conv3d input")
    k = kernel.size
    w = kernel.weights
    c_out = w.shape[0]
    spatial = tuple(output_extent(n, k) for n in x.shape[1:])
    if k == 1:
        cols = x.reshape(x.shape[0], -1)
    else:
        cols = _im2col(x, k)
    out = w.reshape(c_out, -1) @ cols
    out += kernel.bias[:, None]
    return out.reshape((c_out,) + spatial)


def conv3d_backward(x: Tensor, kernel: ConvKernel, grad_out: Tensor, input_grad: bool = True):
    """Gradients of :func:`conv3d_valid` w.r.t. input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``input_grad`` is False (first layer of a network).
    """
    _check_conv(x, kernel)
    k = kernel.size
    w = kernel.weights
    c_out, c_in = w.shape[:2]
    expected = (c_out,) + tuple(output_extent(n, k) for n in x.shape[1:])
    if grad_out.shape != expected:
        raise ShapeError("conv3d grad_out does not match output shape (grad_out, expected)",
                         grad_out.shape, expected)
    g = grad_out.reshape(c_out, -1)
    cols = x.reshape(c_in, -1) if k == 1 else _im2col(x, k)
    grad_w = (g @ cols.T).reshape(w.shape)
    grad_b = g.sum(axis=1)
    if not input_grad:
        return None, grad_w, grad_b
    gcols = w.reshape(c_out, -1).T @ g
    if k == 1:
        return gcols.reshape(x.shape), grad_w, grad_b
    do, ho, wo = expected[1:]
    gcols = gcols.reshape((c_in, k, k, k, do, ho, wo))
    grad_x = np.zeros_like(x)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                grad_x[:, a:a + do, b:b + ho, e:e + wo] += gcols[:, a, b, e]
    return grad_x, grad_w, grad_b


def conv3d_reference(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Direct-loop convolution; accumulation order is bias, then (c', a, b, e)."""
    _check_conv(x, kernel)
    k = kernel.size
    w, bias = kernel.weights, kernel.bias
    c_out, c_in = w.shape[:2]
    spatial = tuple(output_extent(n, k) for n in x.shape[1:])
    out = np.empty((c_out,) + spatial, dtype=x.dtype)
    for c in range(c_out):
        for d in range(spatial[0]):
            for h in range(spatial[1]):
                for v in range(spatial[2]):
                    acc = bias[c]
                    for ci in range(c_in):
                        for a in range(k):
                            for b in range(k):
                                for e in range(k):
                                    acc = acc + w[c, ci, a, b, e] * x[ci, d + a, h + b, v + e]
                    out[c, d, h, v] = acc
    return out


def concat_channels(parts) -> Tensor:
    """Stack ``(C_i, D, H, W)`` tensors along the channel axis, in argument order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0]
    for p in parts[1:]:
        if p.ndim != ref.ndim or p.shape[1:] != ref.shape[1:]:
            raise ShapeError("concat_channels spatial mismatch", ref.shape, p.shape)
        if p.dtype != ref.dtype:
            raise ShapeError(f"concat_channels dtype mismatch ({ref.dtype} vs {p.dtype})")
    return np.concatenate(parts, axis=0)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Pointwise ``add``, ``sub``, ``mul``, ``scale`` or ``max`` (pairwise maximum).

    ``b`` is a tensor of the same shape or a scalar; the dtype of ``a`` is kept.
    """
    a = np.asarray(a)
    if op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale expects a scalar factor")
        op = "mul"
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if np.ndim(b) == 0:
        return fn(a, a.dtype.type(b)).astype(a.dtype, copy=False)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op} shape mismatch", a.shape, b.shape)
    return fn(a, b).astype(a.dtype, copy=False)
