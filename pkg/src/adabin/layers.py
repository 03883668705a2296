# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Layers for binary networks.

Every layer is an autograd node: forward saves what backward needs and backward accumulates the
gradients of the layer's own parameters before returning the gradient for its input.
"""

from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Node, Parameter
from .interface import ActivationMode, AdaBinError, AlphaGradMode, FailureReason, ParameterRole, WeightMode
from .quantize import (
    BinarizedPair,
    BinarySpec,
    activation_binarize_backward,
    activation_binarize_forward,
    equalize_weights,
    weight_binarize_backward,
    weight_binarize_forward,
)
from .tensor import DTYPE, Tensor, conv2d_grad_input, conv2d_grad_weight, conv2d_ref, conv_output_size, per_channel

log = logging.getLogger("adabin.layers")

__all__ = [
    "Conv2d",
    "BinaryConv2d",
    "BatchNorm2d",
    "Maxout",
    "AvgPool2d",
    "GlobalAvgPool",
    "Flatten",
    "Linear",
    "Identity",
    "AvgPoolPad",
    "Sequential",
    "Residual",
    "binary_conv_forward",
    "maxout_forward",
]


def kaiming_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> Tensor:
    """He-normal initialization for a weight whose fan-in is the product of all but the first extent."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)


def _check_channels(name: str, x: Tensor, channels: int) -> None:
    if x.ndim < 2 or x.shape[1] != channels:
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "%s expects %d channels, got input %s" % (name, channels, tuple(x.shape)))


class Conv2d(Node):
    """Real-valued convolution without bias."""

    def __init__(
        self, name: str, in_channels: int, out_channels: int, kernel: int, stride: int, zero_pad: int, rng: np.random.Generator
    ) -> None:
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.zero_pad = kernel, stride, zero_pad
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Parameter("%s.weight" % name, kaiming_normal(rng, shape), ParameterRole.WEIGHT)

    def parameters(self) -> List[Parameter]:
        return [self.weight]

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        batch, _, height, width = input_shape
        return (
            batch,
            self.out_channels,
            conv_output_size(height, self.kernel, self.stride, self.zero_pad),
            conv_output_size(width, self.kernel, self.stride, self.zero_pad),
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self.name, x, self.in_channels)
        self.save(x)
        return conv2d_ref(x, self.weight.value, self.stride, self.zero_pad)

    def backward(self, grad: Tensor) -> Tensor:
        x = self.context()
        self.weight.accumulate(conv2d_grad_weight(grad, x, self.kernel, self.stride, self.zero_pad))
        return conv2d_grad_input(grad, self.weight.value, x.shape, self.stride, self.zero_pad)


class BinaryConv2d(Conv2d):
    """
    Convolution of binarized activations with binarized weights.

    Activations are binarized with a learned per-layer set (alpha_a, beta_a), initialized to
    (1, 0) so a fresh layer behaves like a sign-based binary convolution.  Weights are binarized
    per output filter according to the weight mode.  During training the convolution runs on the
    dequantized operands; the packed kernel computes the same values at inference.
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        zero_pad: int,
        rng: np.random.Generator,
        weight_mode: WeightMode = WeightMode.ADABIN,
        activation_mode: ActivationMode = ActivationMode.ADABIN,
        alpha_grad: AlphaGradMode = AlphaGradMode.CONSISTENT,
    ) -> None:
        super().__init__(name, in_channels, out_channels, kernel, stride, zero_pad, rng)
        self.weight.latent = True
        self.weight_mode, self.activation_mode, self.alpha_grad = weight_mode, activation_mode, alpha_grad
        learned = activation_mode == ActivationMode.ADABIN
        self.act_alpha = Parameter("%s.act_alpha" % name, 1.0, ParameterRole.QUANTIZER_ALPHA, trainable=learned)
        self.act_beta = Parameter("%s.act_beta" % name, 0.0, ParameterRole.QUANTIZER_BETA, trainable=learned)
        self.weight_alpha: Optional[Parameter] = None
        self.weight_beta: Optional[Parameter] = None
        if weight_mode == WeightMode.ADABIN_LEARNABLE:
            initial = equalize_weights(self.weight.value)
            self.weight_alpha = Parameter("%s.weight_alpha" % name, initial.alpha, ParameterRole.QUANTIZER_ALPHA)
            self.weight_beta = Parameter("%s.weight_beta" % name, initial.beta, ParameterRole.QUANTIZER_BETA)

    def parameters(self) -> List[Parameter]:
        params = [self.weight, self.act_alpha, self.act_beta]
        if self.weight_alpha and self.weight_beta:
            params += [self.weight_alpha, self.weight_beta]
        return params

    def activation_spec(self) -> BinarySpec:
        return BinarySpec.per_layer(float(self.act_alpha.value), float(self.act_beta.value))

    def binarized_weight(self) -> BinarizedPair:
        """The binary weights implied by the current latent weights."""
        return weight_binarize_forward(self.weight.value, self.weight_mode, self._learned_weight_spec())[0]

    def _learned_weight_spec(self) -> Optional[BinarySpec]:
        if self.weight_alpha and self.weight_beta:
            return BinarySpec.per_filter(self.weight_alpha.value, self.weight_beta.value)
        return None

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self.name, x, self.in_channels)
        activations, a_ctx = activation_binarize_forward(x, self.activation_spec())
        weights, w_ctx = weight_binarize_forward(self.weight.value, self.weight_mode, self._learned_weight_spec())
        self.save((a_ctx, w_ctx, activations.dequantized, weights.dequantized))
        return conv2d_ref(activations.dequantized, weights.dequantized, self.stride, self.zero_pad)

    def backward(self, grad: Tensor) -> Tensor:
        a_ctx, w_ctx, a_b, w_b = self.context()
        grad_a_b = conv2d_grad_input(grad, w_b, a_b.shape, self.stride, self.zero_pad)
        grad_w_b = conv2d_grad_weight(grad, a_b, self.kernel, self.stride, self.zero_pad)
        grad_a, d_alpha, d_beta = activation_binarize_backward(grad_a_b, a_ctx, self.alpha_grad)
        self.act_alpha.accumulate(d_alpha)
        self.act_beta.accumulate(d_beta)
        grad_w, dw_alpha, dw_beta = weight_binarize_backward(grad_w_b, w_ctx, self.alpha_grad)
        self.weight.accumulate(grad_w)
        if self.weight_alpha and self.weight_beta:
            self.weight_alpha.accumulate(dw_alpha)
            self.weight_beta.accumulate(dw_beta)
        return grad_a


def binary_conv_forward(layer: BinaryConv2d, a: Tensor) -> Tensor:
    return layer.forward(a)


class BatchNorm2d(Node):
    """Batch normalization over (N, H, W) per channel, with running statistics for eval."""

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__(name)
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter("%s.gamma" % name, np.ones(channels), ParameterRole.BATCHNORM)
        self.beta = Parameter("%s.beta" % name, np.zeros(channels), ParameterRole.BATCHNORM)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> Dict[str, Tensor]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def fold(self) -> Tuple[Tensor, Tensor]:
        """Per-channel (scale, shift) equal to this layer in eval mode."""
        scale = self.gamma.value / np.sqrt(self.running_var + DTYPE(self.eps))
        return scale.astype(DTYPE), (self.beta.value - self.running_mean * scale).astype(DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self.name, x, self.channels)
        axes = (0, 2, 3)
        if self.training:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = x.var(axis=axes, dtype=np.float64)
            count = x.size // self.channels
            unbiased = var * count / max(count - 1, 1)
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean.astype(np.float64), self.running_var.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(DTYPE)
        x_hat = ((x - per_channel(mean.astype(DTYPE), 4)) * per_channel(inv_std, 4)).astype(DTYPE)
        self.save((x_hat, inv_std, self.training))
        return (x_hat * per_channel(self.gamma.value, 4) + per_channel(self.beta.value, 4)).astype(DTYPE)

    def backward(self, grad: Tensor) -> Tensor:
        x_hat, inv_std, training = self.context()
        axes = (0, 2, 3)
        self.gamma.accumulate((grad * x_hat).sum(axis=axes))
        self.beta.accumulate(grad.sum(axis=axes))
        grad_hat = grad * per_channel(self.gamma.value, 4)
        if not training:
            return (grad_hat * per_channel(inv_std, 4)).astype(DTYPE)
        mean_grad = grad_hat.mean(axis=axes, keepdims=True)
        mean_grad_hat = (grad_hat * x_hat).mean(axis=axes, keepdims=True)
        return ((grad_hat - mean_grad - x_hat * mean_grad_hat) * per_channel(inv_std, 4)).astype(DTYPE)


class Maxout(Node):
    """
    Per-channel two-slope activation: gamma_plus * x for x >= 0, gamma_minus * x below.

    With gamma_plus frozen at 1 this is PReLU; with both frozen at 1 it is the identity.
    """

    def __init__(
        self,
        name: str,
        channels: int,
        learn_plus: bool = True,
        learn_minus: bool = True,
        init_plus: float = 1.0,
        init_minus: float = 0.25,
    ) -> None:
        super().__init__(name)
        self.channels = channels
        role = ParameterRole.MAXOUT_GAMMA
        self.gamma_plus = Parameter("%s.gamma_plus" % name, np.full(channels, init_plus), role, trainable=learn_plus)
        self.gamma_minus = Parameter("%s.gamma_minus" % name, np.full(channels, init_minus), role, trainable=learn_minus)

    def parameters(self) -> List[Parameter]:
        return [self.gamma_plus, self.gamma_minus]

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self.name, x, self.channels)
        positive = x >= 0
        self.save((x, positive))
        slope = np.where(positive, per_channel(self.gamma_plus.value, x.ndim), per_channel(self.gamma_minus.value, x.ndim))
        return (slope * x).astype(DTYPE)

    def backward(self, grad: Tensor) -> Tensor:
        x, positive = self.context()
        axes = tuple(axis for axis in range(x.ndim) if axis != 1)
        self.gamma_plus.accumulate(np.where(positive, grad * x, 0).sum(axis=axes))
        self.gamma_minus.accumulate(np.where(positive, 0, grad * x).sum(axis=axes))
        slope = np.where(positive, per_channel(self.gamma_plus.value, x.ndim), per_channel(self.gamma_minus.value, x.ndim))
        return (grad * slope).astype(DTYPE)


def maxout_forward(layer: Maxout, x: Tensor) -> Tensor:
    return layer.forward(x)


class AvgPool2d(Node):
    """Average pooling over k x k windows, stride defaulting to k."""

    def __init__(self, name: str, kernel: int, stride: Optional[int] = None) -> None:
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride or kernel

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        batch, channels, height, width = input_shape
        out_h = conv_output_size(height, self.kernel, self.stride, 0)
        return batch, channels, out_h, conv_output_size(width, self.kernel, self.stride, 0)

    def forward(self, x: Tensor) -> Tensor:
        out = self.output_shape(x.shape)
        self.save(x.shape)
        windows = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))[:, :, :: self.stride, :: self.stride]
        return np.ascontiguousarray(windows[:, :, : out[2], : out[3]].mean(axis=(4, 5)), dtype=DTYPE)

    def backward(self, grad: Tensor) -> Tensor:
        shape = self.context()
        out_h, out_w = grad.shape[2], grad.shape[3]
        result = np.zeros(shape, dtype=DTYPE)
        share = grad / DTYPE(self.kernel * self.kernel)
        for i in range(self.kernel):
            for j in range(self.kernel):
                result[:, :, i : i + self.stride * out_h : self.stride, j : j + self.stride * out_w : self.stride] += share
        return result


class GlobalAvgPool(Node):
    """Mean over the spatial extent, keeping (N, C, 1, 1)."""

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape[0], input_shape[1], 1, 1

    def forward(self, x: Tensor) -> Tensor:
        self.save(x.shape)
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)

    def backward(self, grad: Tensor) -> Tensor:
        shape = self.context()
        return np.broadcast_to(grad / DTYPE(shape[2] * shape[3]), shape).astype(DTYPE)


class Flatten(Node):
    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape[0], int(np.prod(input_shape[1:]))

    def forward(self, x: Tensor) -> Tensor:
        self.save(x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Tensor) -> Tensor:
        return grad.reshape(self.context())


class Linear(Node):
    """Fully connected layer, y = x W^T + b."""

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter("%s.weight" % name, rng.uniform(-bound, bound, (out_features, in_features)), ParameterRole.WEIGHT)
        self.bias = Parameter("%s.bias" % name, rng.uniform(-bound, bound, out_features), ParameterRole.BIAS)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape[0], self.out_features

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self.name, x, self.in_features)
        self.save(x)
        return (x @ self.weight.value.T + self.bias.value).astype(DTYPE)

    def backward(self, grad: Tensor) -> Tensor:
        x = self.context()
        self.weight.accumulate(grad.T @ x)
        self.bias.accumulate(grad.sum(axis=0))
        return (grad @ self.weight.value).astype(DTYPE)


class Identity(Node):
    def forward(self, x: Tensor) -> Tensor:
        self.save(True)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        self.context()
        return grad


class AvgPoolPad(Node):
    """Parameter-free downsampling shortcut: stride x stride average pooling, then symmetric zero channel padding."""

    def __init__(self, name: str, in_channels: int, out_channels: int, stride: int) -> None:
        super().__init__(name)
        if out_channels < in_channels:
            message = "%s cannot shrink %d channels to %d" % (name, in_channels, out_channels)
            raise AdaBinError(FailureReason.INVALID_ARGUMENT, message)
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.pool = AvgPool2d("%s.pool" % name, stride) if stride > 1 else None
        self.low = (out_channels - in_channels) // 2

    def children(self) -> List[Node]:
        return [self.pool] if self.pool else []

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        shape = self.pool.output_shape(input_shape) if self.pool else input_shape
        return (shape[0], self.out_channels) + tuple(shape[2:])

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self.name, x, self.in_channels)
        self.save(True)
        pooled = self.pool.forward(x) if self.pool else x
        high = self.out_channels - self.in_channels - self.low
        return np.pad(pooled, ((0, 0), (self.low, high), (0, 0), (0, 0)))

    def backward(self, grad: Tensor) -> Tensor:
        self.context()
        grad = np.ascontiguousarray(grad[:, self.low : self.low + self.in_channels])
        return self.pool.backward(grad) if self.pool else grad


class Sequential(Node):
    """Nodes applied in order."""

    def __init__(self, name: str, nodes: Sequence[Node]) -> None:
        super().__init__(name)
        self.nodes = list(nodes)

    def children(self) -> List[Node]:
        return list(self.nodes)

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        for node in self.nodes:
            input_shape = node.output_shape(input_shape)
        return input_shape

    def forward(self, x: Tensor) -> Tensor:
        for node in self.nodes:
            x = node.forward(x)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for node in reversed(self.nodes):
            grad = node.backward(grad)
        return grad


class Residual(Node):
    """
    A residual unit: activation(body(x) + shortcut(x)).

    Without a shortcut the unit is activation(body(x)).
    """

    def __init__(self, name: str, body: Node, shortcut: Optional[Node], activation: Optional[Node]) -> None:
        super().__init__(name)
        self.body, self.shortcut, self.activation = body, shortcut, activation

    def children(self) -> List[Node]:
        return [node for node in (self.body, self.shortcut, self.activation) if node is not None]

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return self.body.output_shape(input_shape)

    def forward(self, x: Tensor) -> Tensor:
        self.save(True)
        y = self.body.forward(x)
        if self.shortcut is not None:
            skip = self.shortcut.forward(x)
            if skip.shape != y.shape:
                raise AdaBinError(FailureReason.SHAPE_MISMATCH, "%s: body %s vs shortcut %s" % (self.name, y.shape, skip.shape))
            y = y + skip
        return self.activation.forward(y) if self.activation else y

    def backward(self, grad: Tensor) -> Tensor:
        self.context()
        if self.activation:
            grad = self.activation.backward(grad)
        result = self.body.backward(grad)
        if self.shortcut is not None:
            result = result + self.shortcut.backward(grad)
        return result
