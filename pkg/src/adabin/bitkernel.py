# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Bit-packed binary convolution.

Binary tensors are packed 64 elements per little-endian uint64 word along the channel axis, with
+1 stored as bit 1 and -1 as bit 0.  Channel 0 is the least significant bit of word 0.  A validity
mask with the same layout marks real elements, so channel padding and spatial zero padding both
drop out of every sum.

With a_b = alpha_a * s_a + beta_a and w_b = alpha_w * s_w + beta_w, a convolution output splits into

    y = alpha_a * alpha_w * D + alpha_a * beta_w * S + T

where D is the XNOR/popcount dot over the window, S is the sum of activation signs over the window
(shared by every output filter), and T = beta_a * sum(w_b) over the in-bounds taps depends on the
weights alone and is precomputed.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from attrs import field, frozen

from .interface import AdaBinError, FailureReason
from .tensor import DTYPE, Tensor, conv_output_size

log = logging.getLogger("adabin.bitkernel")

__all__ = [
    "PackedBitTensor",
    "KernelSpecs",
    "PrecomputedBias",
    "pack",
    "unpack",
    "popcount64",
    "xnor_popcount_dot",
    "precompute_bias",
    "binary_conv_packed",
]

WORD_BITS = 64
BATCH_CHUNK = 8

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_SHIFT = np.uint64(56)


def _words(channels: int) -> int:
    return (channels + WORD_BITS - 1) // WORD_BITS


def _high_offset(kernel: int, zero_pad: int) -> int:
    """Smallest possible end of the in-bounds tap range along one axis."""
    return max(0, kernel - zero_pad)


def _channel_axis(ndim: int) -> int:
    return 1 if ndim >= 2 else 0


@frozen(eq=False)
class PackedBitTensor:
    """
    A +1/-1 tensor stored one bit per element.

    Attributes:
        shape(Tuple[int, ...]): Logical shape, e.g. NCHW activations or (n, c, k, k) weights
        words(np.ndarray): uint64 words; the channel axis is moved last and packed, e.g. (N, H, W, words)
        valid_mask(np.ndarray): Same layout as words, bit set where a real element exists
    """

    shape: Tuple[int, ...] = field(converter=tuple)
    words: np.ndarray
    valid_mask: np.ndarray

    @property
    def channels(self) -> int:
        return self.shape[_channel_axis(len(self.shape))]

    @property
    def word_count(self) -> int:
        return self.words.shape[-1]


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into little-endian uint64 words."""
    extra = (-bits.shape[-1]) % WORD_BITS
    if extra:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (extra,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8")


def pack(x: Tensor) -> PackedBitTensor:
    """
    Pack a +1/-1 tensor.

    Raises:
        AdaBinError: If any element is not exactly -1 or +1
    """
    x = np.asarray(x)
    if not np.all((x == 1) | (x == -1)):
        raise AdaBinError(FailureReason.NOT_BINARY, "Only -1/+1 tensors can be packed; quantize first")
    axis = _channel_axis(x.ndim)
    moved = np.moveaxis(x > 0, axis, -1) if x.ndim else (x > 0).reshape(1)
    words = _pack_bits(moved)
    lane = _pack_bits(np.ones(moved.shape[-1], dtype=bool))
    mask = np.ascontiguousarray(np.broadcast_to(lane, words.shape))
    return PackedBitTensor(x.shape, words, mask)


def unpack(packed: PackedBitTensor) -> Tensor:
    """Inverse of pack."""
    ndim = len(packed.shape)
    channels = packed.channels if ndim else 1
    raw = np.ascontiguousarray(packed.words).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., :channels]
    signs = bits.astype(DTYPE) * 2 - 1
    if ndim == 0:
        return signs.reshape(())
    return np.ascontiguousarray(np.moveaxis(signs, -1, _channel_axis(ndim)))


def popcount64(words: np.ndarray) -> np.ndarray:
    """Per-word population count, SWAR style."""
    x = np.asarray(words, dtype=np.uint64)
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> _SHIFT


def xnor_popcount_dot(a: np.ndarray, w: np.ndarray, mask: np.ndarray) -> int:
    """
    Dot product of two packed +1/-1 vectors over the lanes set in mask.

    Returns 2 * popcount(XNOR(a, w) AND mask) - popcount(mask).
    """
    a, w, mask = (np.asarray(v, dtype=np.uint64) for v in (a, w, mask))
    if not a.shape == w.shape == mask.shape:
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Word counts differ: %s, %s, %s" % (a.shape, w.shape, mask.shape))
    agree = int(popcount64(~(a ^ w) & mask).sum())
    return 2 * agree - int(popcount64(mask).sum())


def _finite_vector(value: object) -> np.ndarray:
    array = np.asarray(value, dtype=DTYPE)
    if not np.all(np.isfinite(array)):
        raise AdaBinError(FailureReason.INVALID_VALUE, "Binary set parameters must be finite")
    return array


@frozen(eq=False)
class KernelSpecs:
    """Binary sets of a packed convolution: per-filter weight sets and one activation set."""

    alpha_w: np.ndarray = field(converter=_finite_vector)
    beta_w: np.ndarray = field(converter=_finite_vector)
    alpha_a: float = field(converter=lambda v: float(_finite_vector(v)))
    beta_a: float = field(converter=lambda v: float(_finite_vector(v)))


@frozen(eq=False)
class PrecomputedBias:
    """
    The weight-only term T of a packed convolution.

    Attributes:
        f_w(np.ndarray): Per-filter value at interior positions, beta_a * sum(w_b)
        tap_sums(np.ndarray): (n, k, k) sums of beta_a * w_b over channels, one per tap
        border(np.ndarray): Sums over the in-bounds taps of a window, indexed by filter, then first valid
            row, end of valid rows minus (k - p), first valid column, end of valid columns minus (k - p)
        zero_pad(int): Padding the table was built for
    """

    f_w: np.ndarray
    tap_sums: np.ndarray
    border: np.ndarray
    zero_pad: int

    @property
    def kernel(self) -> int:
        return self.tap_sums.shape[1]

    def _classes(self, size: int, out: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
        start = np.arange(out) * stride - self.zero_pad
        first = np.clip(-start, 0, self.kernel)
        last = np.maximum(np.clip(size - start, 0, self.kernel), first)
        return first, last - _high_offset(self.kernel, self.zero_pad)

    def assemble(self, height: int, width: int, stride: int) -> Tensor:
        """The T term for every output position, shape (n, H', W')."""
        out_h = conv_output_size(height, self.kernel, stride, self.zero_pad)
        out_w = conv_output_size(width, self.kernel, stride, self.zero_pad)
        row_first, row_last = self._classes(height, out_h, stride)
        col_first, col_last = self._classes(width, out_w, stride)
        return self.border[:, row_first[:, None], row_last[:, None], col_first[None, :], col_last[None, :]].astype(DTYPE)


def precompute_bias(
    w_bits: PackedBitTensor, alpha_w: np.ndarray, beta_w: np.ndarray, beta_a: float, zero_pad: int
) -> PrecomputedBias:
    """Build the interior values and border table of the weight-only term for a fixed geometry."""
    signs = unpack(w_bits).astype(np.float64)
    filters, _, kernel, _ = signs.shape
    if zero_pad < 0:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Padding must not be negative: %d" % zero_pad)
    alpha = np.asarray(alpha_w, dtype=np.float64).reshape(-1, 1, 1, 1)
    beta = np.asarray(beta_w, dtype=np.float64).reshape(-1, 1, 1, 1)
    taps = float(beta_a) * (alpha * signs + beta).sum(axis=1)  # (n, k, k)

    # 2-D prefix sums give every rectangle of taps in O(1)
    prefix = np.zeros((filters, kernel + 1, kernel + 1), dtype=np.float64)
    prefix[:, 1:, 1:] = taps.cumsum(axis=1).cumsum(axis=2)
    lows = np.arange(min(zero_pad, kernel) + 1)
    highs = np.arange(_high_offset(kernel, zero_pad), kernel + 1)
    r0, r1, c0, c1 = np.meshgrid(lows, highs, lows, highs, indexing="ij")
    border = prefix[:, r1, c1] - prefix[:, r0, c1] - prefix[:, r1, c0] + prefix[:, r0, c0]
    f_w = taps.sum(axis=(1, 2))
    return PrecomputedBias(f_w.astype(DTYPE), taps.astype(DTYPE), border, zero_pad)


def _spatial_pad(words: np.ndarray, zero_pad: int) -> np.ndarray:
    if zero_pad == 0:
        return words
    return np.pad(words, ((0, 0), (zero_pad, zero_pad), (zero_pad, zero_pad), (0, 0)))


def _window_counts(
    a_words: np.ndarray, a_mask: np.ndarray, w_bits: PackedBitTensor, stride: int, out: Tuple[int, int]
) -> Tuple[np.ndarray, np.ndarray]:
    """D (N, n, H', W') and S (N, H', W') in int32 for one chunk of padded activation words."""
    out_h, out_w = out
    kernel = w_bits.shape[2]
    batch, filters = a_words.shape[0], w_bits.shape[0]
    dot = np.zeros((batch, filters, out_h, out_w), dtype=np.int32)
    total = np.zeros((batch, out_h, out_w), dtype=np.int32)
    for i in range(kernel):
        for j in range(kernel):
            rows = slice(i, i + stride * (out_h - 1) + 1, stride)
            cols = slice(j, j + stride * (out_w - 1) + 1, stride)
            act = a_words[:, rows, cols, :]
            valid = a_mask[:, rows, cols, :]
            total += (2 * popcount64(act & valid).sum(axis=-1) - popcount64(valid).sum(axis=-1)).astype(np.int32)
            weights = w_bits.words[:, i, j, :][None, :, None, None, :]
            lanes = valid[:, None] & w_bits.valid_mask[:, i, j, :][None, :, None, None, :]
            agree = popcount64(~(act[:, None] ^ weights) & lanes).sum(axis=-1)
            dot += (2 * agree - popcount64(lanes).sum(axis=-1)).astype(np.int32)
    return dot, total


def binary_conv_packed(
    a_bits: PackedBitTensor,
    w_bits: PackedBitTensor,
    specs: KernelSpecs,
    stride: int = 1,
    zero_pad: int = 0,
    bias: Optional[PrecomputedBias] = None,
) -> Tensor:
    """
    Convolve packed activations with packed weights.

    Returns alpha_a * alpha_w * D + alpha_a * beta_w * S + T of shape (N, n, H', W'), equal to a
    zero-padded float convolution of the dequantized operands.

    Raises:
        AdaBinError: If shapes, specs or the precomputed bias do not match the geometry
    """
    if len(a_bits.shape) != 4 or len(w_bits.shape) != 4 or a_bits.shape[1] != w_bits.shape[1]:
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Packed conv: %s vs %s" % (a_bits.shape, w_bits.shape))
    filters, _, kernel, _ = w_bits.shape
    if specs.alpha_w.shape != (filters,) or specs.beta_w.shape != (filters,):
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Weight sets %s for %d filters" % (specs.alpha_w.shape, filters))
    batch, _, height, width = a_bits.shape
    out_h = conv_output_size(height, kernel, stride, zero_pad)
    out_w = conv_output_size(width, kernel, stride, zero_pad)
    if bias is None:
        bias = precompute_bias(w_bits, specs.alpha_w, specs.beta_w, specs.beta_a, zero_pad)
    elif bias.zero_pad != zero_pad or bias.kernel != kernel or bias.f_w.shape != (filters,):
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Precomputed bias does not match the convolution geometry")

    a_words = _spatial_pad(a_bits.words, zero_pad)
    a_mask = _spatial_pad(a_bits.valid_mask, zero_pad)
    scale_d = (specs.alpha_a * specs.alpha_w).astype(DTYPE).reshape(1, -1, 1, 1)
    scale_s = (specs.alpha_a * specs.beta_w).astype(DTYPE).reshape(1, -1, 1, 1)
    constant = bias.assemble(height, width, stride)[None]

    out = np.empty((batch, filters, out_h, out_w), dtype=DTYPE)
    for start in range(0, batch, BATCH_CHUNK):
        chunk = slice(start, start + BATCH_CHUNK)
        dot, total = _window_counts(a_words[chunk], a_mask[chunk], w_bits, stride, (out_h, out_w))
        out[chunk] = scale_d * dot.astype(DTYPE) + scale_s * total[:, None].astype(DTYPE) + constant
    return out
