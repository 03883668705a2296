# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Model configuration and architecture builders.

Binary units follow the order BinaryConv -> BatchNorm -> (+ shortcut) -> nonlinearity, with
real-valued identity or avgpool-pad shortcuts around every binary convolution.  The stem
convolution and the classifier stay real-valued unless toggled off.
"""

import logging
from typing import Any, Dict, List, Optional, Tuple

import cattrs
import numpy as np
from attrs import field, frozen

from .autograd import Graph, Node
from .interface import ActivationMode, AdaBinError, AlphaGradMode, ArchitectureId, FailureReason, Nonlinearity, WeightMode
from .layers import (
    AvgPoolPad,
    BatchNorm2d,
    BinaryConv2d,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Identity,
    Linear,
    Maxout,
    Residual,
    Sequential,
)
from .validator import enum, positive

log = logging.getLogger("adabin.model")

__all__ = [
    "ModelConfig",
    "GammaPolicy",
    "parse_architecture",
    "build_model",
    "binary_convs",
]

RESNET20_WIDTHS = (16, 32, 64)
RESNET20_BLOCKS = 3
SMALLCNN_STEM = 32
SMALLCNN_BLOCKS = ((32, 1), (64, 2), (64, 1), (128, 2))

ARCHITECTURE_DEFAULTS = {
    ArchitectureId.RESNET20_ADABIN: (WeightMode.ADABIN, ActivationMode.ADABIN, Nonlinearity.MAXOUT),
    ArchitectureId.SMALLCNN_ADABIN: (WeightMode.ADABIN, ActivationMode.ADABIN, Nonlinearity.MAXOUT),
    ArchitectureId.RESNET20_SIGN_PRELU: (WeightMode.SCALED_SIGN, ActivationMode.SIGN, Nonlinearity.PRELU),
    ArchitectureId.SMALLCNN_SIGN_PRELU: (WeightMode.SCALED_SIGN, ActivationMode.SIGN, Nonlinearity.PRELU),
}


@frozen
class GammaPolicy:
    """Which Maxout slopes learn, and their initial values."""

    learn_plus: bool
    learn_minus: bool
    init_plus: float = 1.0
    init_minus: float = 0.25

    @staticmethod
    def for_nonlinearity(nonlinearity: Nonlinearity) -> "GammaPolicy":
        if nonlinearity == Nonlinearity.NONE:
            return GammaPolicy(False, False, 1.0, 1.0)
        if nonlinearity == Nonlinearity.PRELU:
            return GammaPolicy(False, True)
        if nonlinearity == Nonlinearity.MAXOUT_POS:
            return GammaPolicy(True, False)
        return GammaPolicy(True, True)


def parse_architecture(value: Any) -> ArchitectureId:
    """Convert a string to an architecture id, naming the valid ids on failure."""
    if isinstance(value, ArchitectureId):
        return value
    try:
        return ArchitectureId(value)
    except ValueError as e:
        valid = ", ".join(sorted(item.value for item in ArchitectureId))
        raise AdaBinError(FailureReason.UNKNOWN_ARCHITECTURE, "Unknown architecture '%s'; valid ids: %s" % (value, valid)) from e


# pylint: disable=too-many-instance-attributes
@frozen
class ModelConfig:
    """
    Architecture description.

    Quantizer and nonlinearity fields left as None take the architecture's defaults: the adabin
    ids use adabin weights, adabin activations and Maxout; the sign-prelu ids use scaled-sign
    weights, sign activations and PReLU.

    Attributes:
        architecture(ArchitectureId): Network topology and default quantizers
        width(float): Channel multiplier
        classes(int): Width of the logits
        in_channels(int): Image channels
        image_size(int): Image height and width
        weight_mode(WeightMode): Weight quantizer override
        activation_mode(ActivationMode): Activation quantizer override
        nonlinearity(Nonlinearity): Nonlinearity override
        alpha_grad(AlphaGradMode): Activation distance gradient rule
        float_first(bool): Keep the stem convolution real-valued
        float_last(bool): Keep the classifier real-valued
    """

    architecture: ArchitectureId = field(converter=parse_architecture, default=ArchitectureId.RESNET20_ADABIN)
    width: float = field(default=1.0, validator=positive)
    classes: int = field(default=10, validator=positive)
    in_channels: int = field(default=3, validator=positive)
    image_size: int = field(default=32, validator=positive)
    weight_mode: Optional[WeightMode] = None
    activation_mode: Optional[ActivationMode] = None
    nonlinearity: Optional[Nonlinearity] = None
    alpha_grad: AlphaGradMode = field(default=AlphaGradMode.CONSISTENT, validator=enum(AlphaGradMode))
    float_first: bool = True
    float_last: bool = True

    @property
    def effective_weight_mode(self) -> WeightMode:
        return self.weight_mode or ARCHITECTURE_DEFAULTS[self.architecture][0]

    @property
    def effective_activation_mode(self) -> ActivationMode:
        return self.activation_mode or ARCHITECTURE_DEFAULTS[self.architecture][1]

    @property
    def effective_nonlinearity(self) -> Nonlinearity:
        return self.nonlinearity or ARCHITECTURE_DEFAULTS[self.architecture][2]

    @property
    def is_ablation(self) -> bool:
        return self.architecture in (ArchitectureId.RESNET20_SIGN_PRELU, ArchitectureId.SMALLCNN_SIGN_PRELU)

    def input_shape(self, batch: int = 1) -> Tuple[int, int, int, int]:
        return batch, self.in_channels, self.image_size, self.image_size


class _Builder:
    """Creates named layers with shared settings."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.rng = rng
        self.gamma = GammaPolicy.for_nonlinearity(config.effective_nonlinearity)

    def channels(self, base: int) -> int:
        return max(1, int(round(base * self.config.width)))

    def binary_conv(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int) -> BinaryConv2d:
        return BinaryConv2d(
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            self.rng,
            weight_mode=self.config.effective_weight_mode,
            activation_mode=self.config.effective_activation_mode,
            alpha_grad=self.config.alpha_grad,
        )

    def activation(self, name: str, channels: int) -> Maxout:
        gamma = self.gamma
        return Maxout(name, channels, gamma.learn_plus, gamma.learn_minus, gamma.init_plus, gamma.init_minus)

    def stem(self, out_ch: int) -> Sequential:
        in_ch = self.config.in_channels
        if self.config.float_first:
            conv: Node = Conv2d("stem.conv", in_ch, out_ch, 3, 1, 1, self.rng)
        else:
            conv = self.binary_conv("stem.conv", in_ch, out_ch, 3, 1, 1)
        return Sequential("stem", [conv, BatchNorm2d("stem.bn", out_ch), self.activation("stem.act", out_ch)])

    def unit(self, name: str, in_ch: int, out_ch: int, stride: int) -> Residual:
        body = Sequential(
            "%s.body" % name,
            [self.binary_conv("%s.conv" % name, in_ch, out_ch, 3, stride, 1), BatchNorm2d("%s.bn" % name, out_ch)],
        )
        if stride == 1 and in_ch == out_ch:
            shortcut: Node = Identity("%s.shortcut" % name)
        else:
            shortcut = AvgPoolPad("%s.shortcut" % name, in_ch, out_ch, stride)
        return Residual(name, body, shortcut, self.activation("%s.act" % name, out_ch))

    def head(self, in_ch: int) -> Sequential:
        classes = self.config.classes
        if self.config.float_last:
            nodes: List[Node] = [GlobalAvgPool("head.pool"), Flatten("head.flatten"), Linear("head.fc", in_ch, classes, self.rng)]
        else:
            nodes = [GlobalAvgPool("head.pool"), self.binary_conv("head.fc", in_ch, classes, 1, 1, 0), Flatten("head.flatten")]
        return Sequential("head", nodes)


def _resnet20(builder: _Builder) -> List[Node]:
    # 18 binary convs (3 stages x 3 blocks x 2 units) behind a float stem; float_first=False makes it 19
    widths = [builder.channels(base) for base in RESNET20_WIDTHS]
    nodes: List[Node] = [builder.stem(widths[0])]
    in_ch = widths[0]
    for stage, out_ch in enumerate(widths):
        for block in range(RESNET20_BLOCKS):
            stride = 2 if stage > 0 and block == 0 else 1
            name = "stage%d.block%d" % (stage + 1, block)
            units = [builder.unit("%s.unit0" % name, in_ch, out_ch, stride), builder.unit("%s.unit1" % name, out_ch, out_ch, 1)]
            nodes.append(Sequential(name, units))
            in_ch = out_ch
    nodes.append(builder.head(in_ch))
    return nodes


def _smallcnn(builder: _Builder) -> List[Node]:
    in_ch = builder.channels(SMALLCNN_STEM)
    nodes: List[Node] = [builder.stem(in_ch)]
    for index, (base, stride) in enumerate(SMALLCNN_BLOCKS):
        out_ch = builder.channels(base)
        nodes.append(builder.unit("block%d" % index, in_ch, out_ch, stride))
        in_ch = out_ch
    nodes.append(builder.head(in_ch))
    return nodes


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> Graph:
    """
    Build the layer graph for a model config.

    Raises:
        AdaBinError: If the architecture id is unknown
    """
    architecture = parse_architecture(config.architecture)
    builder = _Builder(config, rng if rng is not None else np.random.default_rng(0))
    if architecture in (ArchitectureId.RESNET20_ADABIN, ArchitectureId.RESNET20_SIGN_PRELU):
        nodes = _resnet20(builder)
    else:
        nodes = _smallcnn(builder)
    metadata: Dict[str, Any] = {"model": cattrs.unstructure(config), "input_shape": list(config.input_shape())}
    graph = Graph(nodes, config.classes, metadata)
    log.debug("Built %s with %d binary convolutions", architecture.value, len(binary_convs(graph)))
    return graph


def binary_convs(graph: Graph) -> List[BinaryConv2d]:
    """Binary convolutions of a graph, in forward order."""
    return [node for node in graph.walk() if isinstance(node, BinaryConv2d)]
