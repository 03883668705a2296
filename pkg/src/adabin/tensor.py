# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Dense tensors and the reference float kernels.

A tensor is a C-contiguous float32 numpy array.  Feature maps are NCHW and convolution weights are
(n, c, k, k).  The kernels here serve two purposes: they are the float path for layers that stay
real-valued, and they are the oracle the bit-packed kernels are checked against.
"""

from typing import Any, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .interface import AdaBinError, FailureReason

__all__ = [
    "Tensor",
    "as_tensor",
    "conv_output_size",
    "conv2d_ref",
    "conv2d_grad_input",
    "conv2d_grad_weight",
    "channel_stats",
    "per_channel",
    "add",
    "mul",
    "scale",
    "compare_ge",
]

Tensor = np.ndarray
Operand = Union[float, int, np.ndarray]

DTYPE = np.float32


def as_tensor(data: Any, name: str = "tensor") -> Tensor:
    """Convert external data to a float32 tensor, rejecting NaN and infinity."""
    tensor = np.ascontiguousarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(tensor)):
        raise AdaBinError(FailureReason.INVALID_VALUE, "%s contains non-finite values" % name)
    return tensor


def _shape_error(what: str, left: Tuple[int, ...], right: Tuple[int, ...]) -> AdaBinError:
    return AdaBinError(FailureReason.SHAPE_MISMATCH, "%s: %s vs %s" % (what, tuple(left), tuple(right)))


def conv_output_size(size: int, kernel: int, stride: int, zero_pad: int) -> int:
    """Spatial extent of a convolution output."""
    if stride < 1 or zero_pad < 0:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Invalid geometry: stride=%d, pad=%d" % (stride, zero_pad))
    if kernel > size + 2 * zero_pad:
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Kernel %d larger than padded input %d" % (kernel, size + 2 * zero_pad))
    return (size + 2 * zero_pad - kernel) // stride + 1


def _check_conv(input_shape: Tuple[int, ...], weight_shape: Tuple[int, ...]) -> None:
    if len(input_shape) != 4 or len(weight_shape) != 4:
        raise _shape_error("Convolution needs NCHW input and (n,c,k,k) weight", input_shape, weight_shape)
    if input_shape[1] != weight_shape[1] or weight_shape[2] != weight_shape[3]:
        raise _shape_error("Convolution channel mismatch", input_shape, weight_shape)


def _windows(padded: Tensor, kernel: int, stride: int) -> Tensor:
    """View of shape (N, C, H', W', k, k) over every convolution window."""
    return sliding_window_view(padded, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: Tensor, zero_pad: int) -> Tensor:
    if zero_pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (zero_pad, zero_pad), (zero_pad, zero_pad)))


def conv2d_ref(input: Tensor, weight: Tensor, stride: int = 1, zero_pad: int = 0) -> Tensor:  # pylint: disable=redefined-builtin
    """
    Direct-sum 2-D convolution (cross-correlation) with zero padding.

    Args:
        input(Tensor): Activations of shape (N, C, H, W)
        weight(Tensor): Filters of shape (n, C, k, k)
        stride(int): Step between windows, at least 1
        zero_pad(int): Zeros added on each border; padding contributes nothing to the sum

    Returns:
        Tensor: Output of shape (N, n, H', W')

    Raises:
        AdaBinError: If the shapes are incompatible, naming both shapes
    """
    _check_conv(input.shape, weight.shape)
    kernel = weight.shape[2]
    conv_output_size(input.shape[2], kernel, stride, zero_pad)
    conv_output_size(input.shape[3], kernel, stride, zero_pad)
    windows = _windows(_pad(input, zero_pad), kernel, stride)
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', n)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=DTYPE)


def conv2d_grad_input(grad: Tensor, weight: Tensor, input_shape: Tuple[int, ...], stride: int, zero_pad: int) -> Tensor:
    """Gradient of conv2d_ref with respect to its input."""
    batch, channels, height, width = input_shape
    kernel = weight.shape[2]
    out_h, out_w = grad.shape[2], grad.shape[3]
    padded = np.zeros((batch, channels, height + 2 * zero_pad, width + 2 * zero_pad), dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            tap = np.einsum("nohw,oc->nchw", grad, weight[:, :, i, j], optimize=True)
            padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += tap
    return np.ascontiguousarray(padded[:, :, zero_pad : zero_pad + height, zero_pad : zero_pad + width])


def conv2d_grad_weight(  # pylint: disable=redefined-builtin
    grad: Tensor, input: Tensor, kernel: int, stride: int, zero_pad: int
) -> Tensor:
    """Gradient of conv2d_ref with respect to its weight."""
    windows = _windows(_pad(input, zero_pad), kernel, stride)
    return np.ascontiguousarray(np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])), dtype=DTYPE)


def channel_stats(w: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Per-filter mean and l2 norm of the centered filter, accumulated in float64.

    Returns:
        Tuple[Tensor, Tensor]: Vectors of length n, (mean, l2_of_centered)
    """
    if w.ndim < 2 or int(np.prod(w.shape[1:])) < 1:
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Filters need at least one element each: %s" % (tuple(w.shape),))
    flat = w.reshape(w.shape[0], -1).astype(np.float64)
    mean = flat.mean(axis=1)
    l2 = np.sqrt(np.sum(np.square(flat - mean[:, None]), axis=1))
    return mean.astype(DTYPE), l2.astype(DTYPE)


def per_channel(values: Operand, ndim: int) -> Operand:
    """Reshape a per-channel vector so it broadcasts over axis 1 of a tensor with ndim dimensions."""
    if np.ndim(values) == 0 or ndim < 2:
        return values
    return np.reshape(values, (1, -1) + (1,) * (ndim - 2))


def _operand(x: Tensor, y: Operand) -> Operand:
    """Accept scalars, equal shapes or per-channel vectors only."""
    if np.ndim(y) == 0:
        return DTYPE(y)
    y = np.asarray(y, dtype=DTYPE)
    if y.shape == x.shape:
        return y
    if y.ndim == 1 and x.ndim >= 2 and y.shape[0] == x.shape[1]:
        return per_channel(y, x.ndim)
    raise _shape_error("Incompatible broadcast", x.shape, y.shape)


def add(x: Tensor, y: Operand) -> Tensor:
    return np.add(x, _operand(x, y), dtype=DTYPE)


def mul(x: Tensor, y: Operand) -> Tensor:
    return np.multiply(x, _operand(x, y), dtype=DTYPE)


def scale(x: Tensor, factor: float) -> Tensor:
    return np.multiply(x, DTYPE(factor), dtype=DTYPE)


def compare_ge(x: Tensor, threshold: Operand) -> Tensor:
    """1 where x >= threshold, otherwise 0; ties go to 1."""
    return (x >= _operand(x, threshold)).astype(DTYPE)
