# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Operation and parameter accounting.

Conventions, all per single input image:

- FLOPs count a multiply-accumulate as 2 operations.
- A binary convolution spends BOPs = 2 * n * c * k^2 * h' * w', and OPs = FLOPs + BOPs / 64.
- A sign-binary convolution also pays one float multiply per output element to apply the
  per-filter scale, and stores n*c*k^2 weight bits plus a 32-bit scale per filter.
- An adabin convolution adds one multiply and one add per output element for the S term
  (alpha_a * beta_w * S).  The weight-only T term is a per-filter constant at interior positions
  and folds into the following per-channel shift, so it is not counted.  The popcount of S is
  shared by all n filters and not counted.  Extra storage is a 32-bit beta_w per filter plus the
  64 bits of (alpha_a, beta_a); alpha_w is the scale a sign-binary layer already stores.
- Batch norm costs 2 FLOPs per element and 64 bits per channel (folded scale and shift).
  Maxout costs 1 FLOP per element and 64 bits per channel.  A residual add costs 1 FLOP per
  element.  Average pooling costs k^2 FLOPs per output element and global pooling one per input
  element.  A linear layer costs 2 * in * out + out FLOPs and 32 bits per weight and bias.
- The float reference of a layer is the same layer with every convolution real-valued.
"""

import logging
from typing import Dict, List, Optional, Tuple

from attrs import field, frozen

from .autograd import Graph, Node
from .interface import ActivationMode, AdaBinError, ConvMode, FailureReason, WeightMode
from .layers import AvgPool2d, AvgPoolPad, BatchNorm2d, BinaryConv2d, Conv2d, GlobalAvgPool, Linear, Maxout, Residual, Sequential
from .validator import nonnegative

log = logging.getLogger("adabin.costmodel")

__all__ = [
    "LayerCost",
    "CostReport",
    "PublishedClaims",
    "conv_cost",
    "conv_mode",
    "model_cost",
    "canonical_cost",
    "format_report",
]

BOPS_PER_OP = 64
FLOAT_BITS = 32


# pylint: disable=too-many-instance-attributes
@frozen
class LayerCost:
    """
    Cost of one layer.

    Attributes:
        name(str): Layer name
        kind(str): Layer kind, e.g. a convolution mode or "batchnorm"
        float_ops(int): Float operations of the base computation
        binary_ops(int): Binary operations (BOPs)
        params_bits(int): Storage of the base parameters
        extra_float_ops(int): Float operations added by adaptive binary sets
        extra_param_bits(int): Storage added by adaptive binary sets
        reference_float_ops(int): FLOPs of the same layer kept real-valued
        reference_param_bits(int): Storage of the same layer kept real-valued
    """

    name: str
    kind: str
    float_ops: int = field(default=0, validator=nonnegative)
    binary_ops: int = field(default=0, validator=nonnegative)
    params_bits: int = field(default=0, validator=nonnegative)
    extra_float_ops: int = field(default=0, validator=nonnegative)
    extra_param_bits: int = field(default=0, validator=nonnegative)
    reference_float_ops: int = field(default=0, validator=nonnegative)
    reference_param_bits: int = field(default=0, validator=nonnegative)

    @property
    def ops(self) -> float:
        """FLOPs + BOPs / 64, including the extra operations."""
        return self.float_ops + self.binary_ops / BOPS_PER_OP + self.extra_float_ops

    @property
    def base_ops(self) -> float:
        return self.float_ops + self.binary_ops / BOPS_PER_OP

    @property
    def total_param_bits(self) -> int:
        return self.params_bits + self.extra_param_bits


def _float_layer(name: str, kind: str, flops: int, bits: int) -> LayerCost:
    return LayerCost(name, kind, float_ops=flops, params_bits=bits, reference_float_ops=flops, reference_param_bits=bits)


def conv_cost(n: int, c: int, k: int, out_h: int, out_w: int, mode: ConvMode, name: str = "conv") -> LayerCost:
    """
    Cost of a convolution with n filters over c channels, k x k kernels and an h' x w' output.

    Raises:
        AdaBinError: If any dimension is not positive
    """
    if min(n, c, k, out_h, out_w) <= 0:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Convolution dims must be positive: %s" % ((n, c, k, out_h, out_w),))
    macs = n * c * k * k * out_h * out_w
    weights = n * c * k * k
    outputs = n * out_h * out_w
    reference = dict(reference_float_ops=2 * macs, reference_param_bits=FLOAT_BITS * weights)
    if mode == ConvMode.FLOAT:
        return LayerCost(name, mode.value, float_ops=2 * macs, params_bits=FLOAT_BITS * weights, **reference)
    base = dict(float_ops=outputs, binary_ops=2 * macs, params_bits=weights + FLOAT_BITS * n)
    if mode == ConvMode.SIGN_BINARY:
        return LayerCost(name, mode.value, **base, **reference)  # type: ignore
    return LayerCost(
        name,
        mode.value,
        extra_float_ops=2 * outputs,
        extra_param_bits=FLOAT_BITS * n + 2 * FLOAT_BITS,
        **base,  # type: ignore
        **reference,  # type: ignore
    )


def conv_mode(layer: Conv2d) -> ConvMode:
    """Arithmetic a convolution layer needs at inference."""
    if not isinstance(layer, BinaryConv2d):
        return ConvMode.FLOAT
    if layer.weight_mode == WeightMode.SCALED_SIGN and layer.activation_mode == ActivationMode.SIGN:
        return ConvMode.SIGN_BINARY
    return ConvMode.ADABIN


@frozen
class CostReport:
    """Per-layer costs and their totals."""

    layers: List[LayerCost]

    def _sum(self, attribute: str) -> int:
        return sum(getattr(layer, attribute) for layer in self.layers)

    @property
    def float_ops(self) -> int:
        return self._sum("float_ops")

    @property
    def binary_ops(self) -> int:
        return self._sum("binary_ops")

    @property
    def extra_float_ops(self) -> int:
        return self._sum("extra_float_ops")

    @property
    def params_bits(self) -> int:
        return self._sum("params_bits")

    @property
    def extra_param_bits(self) -> int:
        return self._sum("extra_param_bits")

    @property
    def reference_float_ops(self) -> int:
        return self._sum("reference_float_ops")

    @property
    def reference_param_bits(self) -> int:
        return self._sum("reference_param_bits")

    @property
    def ops(self) -> float:
        return self.float_ops + self.binary_ops / BOPS_PER_OP + self.extra_float_ops

    @property
    def params_bytes(self) -> float:
        return (self.params_bits + self.extra_param_bits) / 8

    @property
    def speedup(self) -> float:
        return self.reference_float_ops / self.ops if self.ops else 1.0

    @property
    def memory_saving(self) -> float:
        total = self.params_bits + self.extra_param_bits
        return self.reference_param_bits / total if total else 1.0

    @property
    def extra_ops_ratio(self) -> float:
        base = self.float_ops + self.binary_ops / BOPS_PER_OP
        return self.extra_float_ops / base if base else 0.0

    @property
    def extra_params_ratio(self) -> float:
        return self.extra_param_bits / self.params_bits if self.params_bits else 0.0

    def summary(self) -> Dict[str, float]:
        return {
            "flops": self.float_ops,
            "bops": self.binary_ops,
            "extra_flops": self.extra_float_ops,
            "ops": self.ops,
            "params_bits": self.params_bits,
            "extra_param_bits": self.extra_param_bits,
            "params_bytes": self.params_bytes,
            "reference_flops": self.reference_float_ops,
            "reference_params_bytes": self.reference_param_bits / 8,
            "speedup": self.speedup,
            "memory_saving": self.memory_saving,
            "extra_ops_pct": 100.0 * self.extra_ops_ratio,
            "extra_params_pct": 100.0 * self.extra_params_ratio,
        }


def _elements(shape: Tuple[int, ...]) -> int:
    count = 1
    for extent in shape[1:]:
        count *= extent
    return count


def _node_costs(node: Node, shape: Tuple[int, ...]) -> Tuple[List[LayerCost], Tuple[int, ...]]:
    # pylint: disable=too-many-return-statements
    if isinstance(node, Sequential):
        costs: List[LayerCost] = []
        for child in node.nodes:
            child_costs, shape = _node_costs(child, shape)
            costs += child_costs
        return costs, shape
    if isinstance(node, Residual):
        costs, out = _node_costs(node.body, shape)
        if node.shortcut is not None:
            costs += _node_costs(node.shortcut, shape)[0]
            costs.append(_float_layer("%s.add" % node.name, "residual-add", _elements(out), 0))
        if node.activation is not None:
            costs += _node_costs(node.activation, out)[0]
        return costs, out
    out = node.output_shape(shape)
    if isinstance(node, Conv2d):
        return [conv_cost(node.out_channels, node.in_channels, node.kernel, out[2], out[3], conv_mode(node), node.name)], out
    if isinstance(node, BatchNorm2d):
        return [_float_layer(node.name, "batchnorm", 2 * _elements(out), 2 * FLOAT_BITS * node.channels)], out
    if isinstance(node, Maxout):
        return [_float_layer(node.name, "maxout", _elements(out), 2 * FLOAT_BITS * node.channels)], out
    if isinstance(node, AvgPoolPad):
        return (_node_costs(node.pool, shape)[0] if node.pool else []), out
    if isinstance(node, AvgPool2d):
        return [_float_layer(node.name, "avgpool", node.kernel * node.kernel * _elements(out), 0)], out
    if isinstance(node, GlobalAvgPool):
        return [_float_layer(node.name, "global-avgpool", _elements(shape), 0)], out
    if isinstance(node, Linear):
        flops = 2 * node.in_features * node.out_features + node.out_features
        return [_float_layer(node.name, "linear", flops, FLOAT_BITS * (node.in_features + 1) * node.out_features)], out
    return [], out


def model_cost(graph: Graph, input_shape: Optional[Tuple[int, ...]] = None) -> CostReport:
    """
    Cost of every layer of a graph for one image.

    Args:
        graph(Graph): The model
        input_shape(Tuple[int, ...]): (C, H, W) of an image; defaults to the shape recorded when the graph was built
    """
    if input_shape is None:
        input_shape = tuple(graph.metadata["input_shape"][1:])
    shape: Tuple[int, ...] = (1,) + tuple(input_shape)
    costs: List[LayerCost] = []
    for node in graph.nodes:
        node_costs, shape = _node_costs(node, shape)
        costs += node_costs
    return CostReport(costs)


@frozen
class PublishedClaims:
    """Published overhead and savings of a 256-channel 3x3 convolution on a 14x14 output."""

    extra_ops_pct: float = 2.74
    extra_params_pct: float = 1.37
    speedup: float = 60.85
    memory_saving: float = 31.0


CANONICAL_SHAPE = (256, 256, 3, 14, 14)


def canonical_cost() -> Tuple[CostReport, Dict[str, float]]:
    """
    The canonical self-test row and its residuals against the published claims.

    Overheads are relative to a sign-binary convolution of the same shape; speedup and memory
    saving are relative to the float convolution.
    """
    n, c, k, out_h, out_w = CANONICAL_SHAPE
    report = CostReport([conv_cost(n, c, k, out_h, out_w, ConvMode.ADABIN, "canonical")])
    claims = PublishedClaims()
    values = {
        "extra_ops_pct": 100.0 * report.extra_ops_ratio,
        "extra_params_pct": 100.0 * report.extra_params_ratio,
        "speedup": report.speedup,
        "memory_saving": report.memory_saving,
    }
    residuals = {key: value - getattr(claims, key) for key, value in values.items()}
    return report, {**values, **{"%s_residual" % key: value for key, value in residuals.items()}}


def format_report(report: CostReport) -> str:
    """Aligned text table of a report, one row per layer and a total row."""
    header = "%-32s %-14s %14s %14s %12s %12s %10s" % ("layer", "kind", "flops", "bops", "extra_flops", "param_bits", "extra_bits")
    lines = [header, "-" * len(header)]
    for layer in report.layers:
        lines.append(
            "%-32s %-14s %14d %14d %12d %12d %10d"
            % (
                layer.name,
                layer.kind,
                layer.float_ops,
                layer.binary_ops,
                layer.extra_float_ops,
                layer.params_bits,
                layer.extra_param_bits,
            )
        )
    lines.append("-" * len(header))
    lines.append(
        "%-32s %-14s %14d %14d %12d %12d %10d"
        % ("total", "", report.float_ops, report.binary_ops, report.extra_float_ops, report.params_bits, report.extra_param_bits)
    )
    totals = (report.ops, report.speedup, report.memory_saving, report.params_bytes)
    lines.append("ops=%.0f speedup=%.2fx memory_saving=%.2fx params=%.0f bytes" % totals)
    return "\n".join(lines)
