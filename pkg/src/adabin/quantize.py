# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Adaptive binary quantizers.

Every quantizer maps a tensor onto a two-value set {beta - alpha, beta + alpha}: values at or above
the center beta take the upper value, the rest take the lower one.  Weights derive their set per
output filter from the latent weights (center at the filter mean, distance equal to the filter's
population standard deviation) or learn it.  Activations learn a single set per layer, trained
through a straight-through estimator clipped to the window |(a - beta) / alpha| <= 1.

Backward rules use g(u) = sign(u) with sign(0) = +1 for values and g'(u) = 1 for |u| <= 1, else 0,
for slopes.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from attrs import field, frozen

from .bitkernel import PackedBitTensor, pack
from .interface import AdaBinError, AlphaGradMode, FailureReason, Granularity, WeightMode
from .tensor import DTYPE, Tensor, channel_stats

log = logging.getLogger("adabin.quantize")

__all__ = [
    "EPSILON_ALPHA",
    "BinarySpec",
    "BinarizedPair",
    "ActivationContext",
    "WeightContext",
    "adabin_quantize",
    "equalize_weights",
    "scaled_sign_spec",
    "activation_binarize_forward",
    "activation_binarize_backward",
    "weight_binarize_forward",
    "weight_binarize_backward",
    "kld_numeric",
]

EPSILON_ALPHA = 1e-3
"""Lower bound on the distance of a learned quantizer."""

_DEGENERATE_ALPHA = 1e-12


def _vector(value: object) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


@frozen(eq=False)
class BinarySpec:
    """
    A binary set {beta - alpha, beta + alpha}.

    Attributes:
        alpha(np.ndarray): Half distance between the two values, scalar or one per output filter
        beta(np.ndarray): Center of the set, same shape as alpha
        granularity(Granularity): Per-output-filter (weights) or per-layer scalar (activations)
    """

    alpha: np.ndarray = field(converter=_vector)
    beta: np.ndarray = field(converter=_vector)
    granularity: Granularity = Granularity.PER_LAYER

    def __attrs_post_init__(self) -> None:
        if self.alpha.shape != self.beta.shape:
            raise AdaBinError(FailureReason.SHAPE_MISMATCH, "alpha %s vs beta %s" % (self.alpha.shape, self.beta.shape))
        if self.granularity == Granularity.PER_LAYER and self.alpha.ndim != 0:
            raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Per-layer spec needs scalars, got %s" % (self.alpha.shape,))
        if self.granularity == Granularity.PER_FILTER and self.alpha.ndim != 1:
            raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Per-filter spec needs vectors, got %s" % (self.alpha.shape,))
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise AdaBinError(FailureReason.INVALID_VALUE, "Binary set must be finite")
        if np.any(self.alpha < 0):
            raise AdaBinError(FailureReason.INVALID_VALUE, "Binary set distance must not be negative")

    @staticmethod
    def per_layer(alpha: float, beta: float) -> "BinarySpec":
        return BinarySpec(alpha, beta, Granularity.PER_LAYER)

    @staticmethod
    def per_filter(alpha: object, beta: object) -> "BinarySpec":
        return BinarySpec(alpha, beta, Granularity.PER_FILTER)

    @property
    def low(self) -> np.ndarray:
        return self.beta - self.alpha

    @property
    def high(self) -> np.ndarray:
        return self.beta + self.alpha

    @property
    def all_positive(self) -> bool:
        """Whether both values of every set are strictly positive."""
        return bool(np.all(self.low > 0))

    def shaped_for(self, x: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        """(alpha, beta) reshaped to broadcast against x; per-filter sets align with axis 0."""
        if self.granularity == Granularity.PER_LAYER:
            return self.alpha, self.beta
        if x.ndim == 0 or x.shape[0] != self.alpha.shape[0]:
            raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Spec for %d filters vs tensor %s" % (self.alpha.shape[0], x.shape))
        shape = (-1,) + (1,) * (x.ndim - 1)
        return self.alpha.reshape(shape), self.beta.reshape(shape)


@frozen(eq=False)
class BinarizedPair:
    """
    A binarized tensor in both its dequantized and its 1-bit form.

    Attributes:
        dequantized(Tensor): Values in {beta - alpha, beta + alpha}
        signs(Tensor): The same tensor as +1/-1, the branch taken by each element
        spec(BinarySpec): The set used
    """

    dequantized: Tensor
    signs: Tensor
    spec: BinarySpec

    @property
    def bits(self) -> PackedBitTensor:
        """Signs packed 64 per word along the channel axis, +1 as bit 1."""
        return pack(self.signs)


def adabin_quantize(x: Tensor, spec: BinarySpec) -> BinarizedPair:
    """Map x onto the binary set of spec; values equal to the center take the upper value."""
    alpha, beta = spec.shaped_for(x)
    signs = np.where(x >= beta, DTYPE(1.0), DTYPE(-1.0)).astype(DTYPE)
    dequantized = (alpha * signs + beta).astype(DTYPE)
    return BinarizedPair(dequantized, signs, spec)


def equalize_weights(w: Tensor) -> BinarySpec:
    """
    Per-filter binary set matching the distribution of the latent weights.

    The center is the filter mean and the distance is the population standard deviation, i.e. the
    l2 norm of the centered filter divided by sqrt(c*k*k).  A constant filter gives distance 0.
    """
    mean, l2 = channel_stats(w)
    count = int(np.prod(w.shape[1:]))
    return BinarySpec.per_filter(l2 / DTYPE(math.sqrt(count)), mean)


def scaled_sign_spec(w: Tensor) -> BinarySpec:
    """Symmetric per-filter set {-alpha, +alpha} with alpha the mean absolute weight."""
    alpha = np.abs(w.reshape(w.shape[0], -1).astype(np.float64)).mean(axis=1)
    return BinarySpec.per_filter(alpha, np.zeros_like(alpha))


def _window(u: np.ndarray) -> np.ndarray:
    return (np.abs(u) <= 1.0).astype(DTYPE)


def _sign(u: np.ndarray) -> np.ndarray:
    return np.where(u >= 0, DTYPE(1.0), DTYPE(-1.0)).astype(DTYPE)


@frozen(eq=False)
class ActivationContext:
    """Saved forward state of an activation binarizer."""

    a: Tensor
    alpha: float
    beta: float


def activation_binarize_forward(a: Tensor, spec: BinarySpec) -> Tuple[BinarizedPair, ActivationContext]:
    """
    Binarize activations with a per-layer set.

    Returns:
        Tuple[BinarizedPair, ActivationContext]: The binarized values and the context for backward
    """
    if spec.granularity != Granularity.PER_LAYER:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Activations use a per-layer binary set")
    if float(spec.alpha) < EPSILON_ALPHA:
        raise AdaBinError(FailureReason.INVALID_VALUE, "Activation distance %s below %s" % (float(spec.alpha), EPSILON_ALPHA))
    return adabin_quantize(a, spec), ActivationContext(a, float(spec.alpha), float(spec.beta))


def _set_gradients(
    upstream: np.ndarray, x: np.ndarray, alpha: np.ndarray, beta: np.ndarray, mode: AlphaGradMode, axes: Optional[Tuple[int, ...]]
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Clipped straight-through gradients for input, distance and center of a binary set."""
    u = (x - beta) / alpha
    inside = _window(u)
    if mode == AlphaGradMode.PAPER:
        d_alpha = upstream * (_sign(u) - (x / alpha) * inside)
    else:
        d_alpha = upstream * (_sign(u) - u * inside)
    d_beta = upstream * (1.0 - inside)
    return (upstream * inside).astype(DTYPE), d_alpha.sum(axis=axes, dtype=np.float64), d_beta.sum(axis=axes, dtype=np.float64)


def activation_binarize_backward(
    upstream: Tensor, context: Optional[ActivationContext], mode: AlphaGradMode = AlphaGradMode.CONSISTENT
) -> Tuple[Tensor, float, float]:
    """
    Straight-through gradients of an activation binarizer.

    With u = (a - beta) / alpha, the input gradient passes through where |u| <= 1.  The center
    collects the upstream gradient outside that window.  The distance gradient is
    sum(upstream * (g(u) - u * g'(u))) in consistent mode, or uses a / alpha in place of u in paper
    mode; the two agree when beta is 0.

    Returns:
        Tuple[Tensor, float, float]: (dL/da, dL/dalpha, dL/dbeta)
    """
    if context is None:
        raise AdaBinError(FailureReason.MISSING_CONTEXT, "Activation binarizer has no saved context")
    grad, d_alpha, d_beta = _set_gradients(
        np.asarray(upstream, dtype=DTYPE), context.a, np.float32(context.alpha), np.float32(context.beta), mode, None
    )
    return grad, float(d_alpha), float(d_beta)


@frozen(eq=False)
class WeightContext:
    """Saved forward state of a weight binarizer."""

    w: Tensor
    spec: BinarySpec
    mode: WeightMode


def weight_binarize_forward(w: Tensor, mode: WeightMode, spec: Optional[BinarySpec] = None) -> Tuple[BinarizedPair, WeightContext]:
    """
    Binarize latent weights per output filter.

    Scaled-sign and adabin modes derive the set from w on every call; adabin-learnable uses the
    supplied spec, which holds the current values of the learned parameters.
    """
    if mode == WeightMode.SCALED_SIGN:
        spec = scaled_sign_spec(w)
    elif mode == WeightMode.ADABIN:
        spec = equalize_weights(w)
    elif spec is None:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Learnable weight sets need a spec")
    return adabin_quantize(w, spec), WeightContext(w, spec, mode)


def weight_binarize_backward(
    upstream: Tensor, context: Optional[WeightContext], mode: AlphaGradMode = AlphaGradMode.CONSISTENT
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Gradients of a weight binarizer.

    Derived sets are differentiated through the statistics that produce them, so the latent
    weights also receive the gradient flowing into alpha and beta.  Learnable sets return the
    per-filter set gradients for their own parameters.

    Returns:
        Tuple[Tensor, np.ndarray, np.ndarray]: (dL/dw, dL/dalpha, dL/dbeta), the last two per filter
    """
    if context is None:
        raise AdaBinError(FailureReason.MISSING_CONTEXT, "Weight binarizer has no saved context")
    upstream = np.asarray(upstream, dtype=DTYPE)
    w, spec = context.w, context.spec
    count = int(np.prod(w.shape[1:]))
    axes = tuple(range(1, w.ndim))
    shape = (-1,) + (1,) * (w.ndim - 1)
    alpha, beta = spec.shaped_for(w)
    zeros = np.zeros(w.shape[0], dtype=np.float64)

    if context.mode == WeightMode.SCALED_SIGN:
        signs = _sign(w)
        total = (upstream * signs).sum(axis=axes, dtype=np.float64).reshape(shape)
        grad = alpha * upstream * _window(w) + total * signs / count
        return grad.astype(DTYPE), zeros, zeros

    safe = np.where(alpha > _DEGENERATE_ALPHA, alpha, DTYPE(1.0))
    grad, d_alpha, d_beta = _set_gradients(upstream, w, safe, beta, mode, axes)
    if context.mode == WeightMode.ADABIN_LEARNABLE:
        return grad, d_alpha, d_beta

    chained = grad + d_alpha.reshape(shape) * (w - beta) / (count * safe) + d_beta.reshape(shape) / count
    chained = np.where(alpha > _DEGENERATE_ALPHA, chained, upstream)
    return chained.astype(DTYPE), zeros, zeros


def _gaussian_kernel(sigma_bins: float, bins: int) -> np.ndarray:
    radius = min(int(math.ceil(4.0 * sigma_bins)), (bins - 1) // 2)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * np.square(offsets / sigma_bins))
    return kernel / kernel.sum()


def kld_numeric(samples: Tensor, spec: BinarySpec, bins: int = 256, bandwidth: Optional[float] = None) -> float:
    """
    Discretized KL divergence between a sample distribution and a binary set.

    The samples are histogrammed; the binary set contributes mass 0.5 to the bin holding each of
    its two values.  Both histograms are smoothed with the same Gaussian kernel (bandwidth defaults
    to twice the sample standard deviation; 0 disables smoothing), floored at 1e-12 and
    renormalized before the divergence is summed over bins.

    The smoothing is what places the minimum over alpha near the sample standard deviation for a
    bell-shaped sample.  With bandwidth 0 each spike stays in its containing bin and the minimum moves
    toward small alpha, so the equalization check must use the default bandwidth.

    Raises:
        AdaBinError: If samples are empty, bins < 8 or more than one binary set is given
    """
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size == 0:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "kld_numeric needs at least one sample")
    if bins < 8:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "kld_numeric needs at least 8 bins, got %d" % bins)
    if spec.alpha.size != 1:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "kld_numeric compares against a single binary set")
    alpha, beta = float(spec.alpha.ravel()[0]), float(spec.beta.ravel()[0])
    width = 2.0 * float(values.std()) if bandwidth is None else float(bandwidth)

    low = min(float(values.min()), beta - alpha) - 4.0 * width
    high = max(float(values.max()), beta + alpha) + 4.0 * width
    if high - low <= 0:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, bins + 1)

    p, _ = np.histogram(values, bins=edges)
    p = p.astype(np.float64) / values.size
    q = np.zeros(bins, dtype=np.float64)
    for spike in (beta - alpha, beta + alpha):
        index = int(np.clip(np.searchsorted(edges, spike, side="right") - 1, 0, bins - 1))
        q[index] += 0.5

    if width > 0:
        kernel = _gaussian_kernel(width / (edges[1] - edges[0]), bins)
        p = np.convolve(p, kernel, mode="same")
        q = np.convolve(q, kernel, mode="same")

    p = p + 1e-12
    q = q + 1e-12
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum(p * np.log(p / q)))
