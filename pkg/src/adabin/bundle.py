# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Packed inference bundles.

A bundle is a trained graph reduced to what inference needs: binary weights as bits with their
binary sets, batch norm folded into a per-channel scale and shift, and the remaining float layers.
Running a bundle uses the XNOR/popcount kernel for every binary convolution.

File layout (all integers little-endian, all reals float32), documented in docs/formats.rst:

    magic "ADBN" | u16 version | u32 header length | header JSON (utf-8) | u32 record count | records

Each record starts with a u8 tag followed by its geometry and arrays; see the _write_* functions.
Packed weights are stored as a dense bitstream in (n, c, k, k) order, least significant bit first,
padded to a whole 64-bit word.  The weight-only bias tables are recomputed at load time.
"""

from __future__ import annotations

import io
import json
import logging
from abc import ABC, abstractmethod
from enum import IntEnum
from typing import Any, Dict, List, Optional

import numpy as np
from attrs import define, field, frozen

from .autograd import Graph, Node
from .bitkernel import KernelSpecs, PackedBitTensor, PrecomputedBias, binary_conv_packed, pack, precompute_bias, unpack
from .codec import ByteReader, ByteWriter
from .costmodel import conv_mode
from .interface import AdaBinError, ConvMode, FailureReason
from .layers import (
    AvgPool2d,
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
from .quantize import BinarySpec, adabin_quantize
from .tensor import DTYPE, Tensor, conv2d_ref, per_channel

log = logging.getLogger("adabin.bundle")

__all__ = [
    "BUNDLE_MAGIC",
    "BUNDLE_VERSION",
    "InferenceBundle",
    "export_packed_model",
    "load_bundle",
]

BUNDLE_MAGIC = b"ADBN"
BUNDLE_VERSION = 1


class RecordTag(IntEnum):
    PACKED_CONV = 1
    FLOAT_CONV = 2
    AFFINE = 3
    MAXOUT = 4
    AVGPOOL = 5
    GLOBAL_POOL = 6
    FLATTEN = 7
    LINEAR = 8
    IDENTITY = 9
    SHORTCUT_PAD = 10
    RESIDUAL = 11


class Record(ABC):
    """One inference step."""

    tag: RecordTag

    @abstractmethod
    def apply(self, x: Tensor) -> Tensor:
        """Run the step on a batch."""

    @abstractmethod
    def write(self, out: ByteWriter) -> None:
        """Write the record body, after its tag."""


@frozen(eq=False)
class PackedConv(Record):
    """Binary convolution on packed bits."""

    tag = RecordTag.PACKED_CONV
    name: str
    stride: int
    zero_pad: int
    weight_bits: PackedBitTensor
    specs: KernelSpecs
    symmetric: bool
    bias: PrecomputedBias = field(init=False)

    def __attrs_post_init__(self) -> None:
        bias = precompute_bias(self.weight_bits, self.specs.alpha_w, self.specs.beta_w, self.specs.beta_a, self.zero_pad)
        object.__setattr__(self, "bias", bias)

    def apply(self, x: Tensor) -> Tensor:
        activations = adabin_quantize(x, BinarySpec.per_layer(self.specs.alpha_a, self.specs.beta_a))
        return binary_conv_packed(pack(activations.signs), self.weight_bits, self.specs, self.stride, self.zero_pad, self.bias)

    def write(self, out: ByteWriter) -> None:
        n, c, k, _ = self.weight_bits.shape
        out.put("HHBBBB", c, n, k, self.stride, self.zero_pad, 1 if self.symmetric else 0)
        out.reals([self.specs.alpha_a, self.specs.beta_a])
        out.reals(self.specs.alpha_w)
        if not self.symmetric:
            out.reals(self.specs.beta_w)
        dense = np.packbits(unpack(self.weight_bits).ravel() > 0, bitorder="little")
        dense = np.concatenate([dense, np.zeros((-dense.size) % 8, dtype=np.uint8)])
        out.put("I", dense.size // 8)
        out.raw(dense.tobytes())

    @staticmethod
    def read(reader: ByteReader) -> "PackedConv":
        c, n, k, stride, pad, flags = reader.get("HHBBBB")
        alpha_a, beta_a = reader.reals(2)
        alpha_w = reader.reals(n)
        beta_w = np.zeros(n, dtype=DTYPE) if flags & 1 else reader.reals(n)
        (words,) = reader.get("I")
        count = n * c * k * k
        if words != (count + 63) // 64:
            raise reader.fail("Packed weight needs %d words, record has %d" % ((count + 63) // 64, words))
        bits = np.unpackbits(np.frombuffer(reader.take(8 * words), dtype=np.uint8), bitorder="little")[:count]
        signs = (bits.astype(DTYPE) * 2 - 1).reshape(n, c, k, k)
        return PackedConv("conv", stride, pad, pack(signs), KernelSpecs(alpha_w, beta_w, alpha_a, beta_a), bool(flags & 1))


@frozen(eq=False)
class FloatConv(Record):
    tag = RecordTag.FLOAT_CONV
    weight: Tensor
    stride: int
    zero_pad: int

    def apply(self, x: Tensor) -> Tensor:
        return conv2d_ref(x, self.weight, self.stride, self.zero_pad)

    def write(self, out: ByteWriter) -> None:
        n, c, k, _ = self.weight.shape
        out.put("HHBBB", c, n, k, self.stride, self.zero_pad)
        out.reals(self.weight)

    @staticmethod
    def read(reader: ByteReader) -> "FloatConv":
        c, n, k, stride, pad = reader.get("HHBBB")
        return FloatConv(reader.reals(n * c * k * k).reshape(n, c, k, k), stride, pad)


@frozen(eq=False)
class Affine(Record):
    """Per-channel scale and shift, the folded form of an eval-mode batch norm."""

    tag = RecordTag.AFFINE
    scale: Tensor
    shift: Tensor

    def apply(self, x: Tensor) -> Tensor:
        return (x * per_channel(self.scale, x.ndim) + per_channel(self.shift, x.ndim)).astype(DTYPE)

    def write(self, out: ByteWriter) -> None:
        out.put("H", self.scale.size)
        out.reals(self.scale)
        out.reals(self.shift)

    @staticmethod
    def read(reader: ByteReader) -> "Affine":
        (channels,) = reader.get("H")
        return Affine(reader.reals(channels), reader.reals(channels))


@frozen(eq=False)
class MaxoutStep(Record):
    tag = RecordTag.MAXOUT
    gamma_plus: Tensor
    gamma_minus: Tensor

    def apply(self, x: Tensor) -> Tensor:
        slope = np.where(x >= 0, per_channel(self.gamma_plus, x.ndim), per_channel(self.gamma_minus, x.ndim))
        return (slope * x).astype(DTYPE)

    def write(self, out: ByteWriter) -> None:
        out.put("H", self.gamma_plus.size)
        out.reals(self.gamma_plus)
        out.reals(self.gamma_minus)

    @staticmethod
    def read(reader: ByteReader) -> "MaxoutStep":
        (channels,) = reader.get("H")
        return MaxoutStep(reader.reals(channels), reader.reals(channels))


@frozen(eq=False)
class NodeStep(Record):
    """Parameter-free step delegating to its layer (pooling, flatten, identity, channel-pad shortcut)."""

    tag: RecordTag
    node: Node

    def apply(self, x: Tensor) -> Tensor:
        y = self.node.forward(x)
        for node in self.node.walk():
            node.save(None)
        return y

    def write(self, out: ByteWriter) -> None:
        if isinstance(self.node, AvgPool2d):
            out.put("BB", self.node.kernel, self.node.stride)
        elif isinstance(self.node, AvgPoolPad):
            out.put("HHB", self.node.in_channels, self.node.out_channels, self.node.stride)

    @staticmethod
    def read(tag: RecordTag, reader: ByteReader) -> "NodeStep":
        if tag == RecordTag.AVGPOOL:
            kernel, stride = reader.get("BB")
            return NodeStep(tag, AvgPool2d("pool", kernel, stride))
        if tag == RecordTag.SHORTCUT_PAD:
            in_ch, out_ch, stride = reader.get("HHB")
            return NodeStep(tag, AvgPoolPad("shortcut", in_ch, out_ch, stride))
        if tag == RecordTag.GLOBAL_POOL:
            return NodeStep(tag, GlobalAvgPool("pool"))
        if tag == RecordTag.FLATTEN:
            return NodeStep(tag, Flatten("flatten"))
        return NodeStep(tag, Identity("identity"))


@frozen(eq=False)
class LinearStep(Record):
    tag = RecordTag.LINEAR
    weight: Tensor
    bias: Tensor

    def apply(self, x: Tensor) -> Tensor:
        return (x @ self.weight.T + self.bias).astype(DTYPE)

    def write(self, out: ByteWriter) -> None:
        out_features, in_features = self.weight.shape
        out.put("HH", in_features, out_features)
        out.reals(self.weight)
        out.reals(self.bias)

    @staticmethod
    def read(reader: ByteReader) -> "LinearStep":
        in_features, out_features = reader.get("HH")
        return LinearStep(reader.reals(in_features * out_features).reshape(out_features, in_features), reader.reals(out_features))


@frozen(eq=False)
class ResidualStep(Record):
    """activation(body(x) + shortcut(x)); a missing shortcut means no skip connection."""

    tag = RecordTag.RESIDUAL
    body: List[Record]
    shortcut: Optional[List[Record]]
    activation: Optional[Record]

    def apply(self, x: Tensor) -> Tensor:
        y = _run(self.body, x)
        if self.shortcut is not None:
            y = y + _run(self.shortcut, x)
        return self.activation.apply(y) if self.activation else y

    def write(self, out: ByteWriter) -> None:
        flags = (1 if self.shortcut is not None else 0) | (2 if self.activation else 0)
        out.put("BH", flags, len(self.body))
        _write_records(out, self.body)
        if self.shortcut is not None:
            out.put("H", len(self.shortcut))
            _write_records(out, self.shortcut)
        if self.activation:
            _write_records(out, [self.activation])

    @staticmethod
    def read(reader: ByteReader) -> "ResidualStep":
        flags, count = reader.get("BH")
        body = _read_records(reader, count)
        shortcut = _read_records(reader, reader.get("H")[0]) if flags & 1 else None
        activation = _read_records(reader, 1)[0] if flags & 2 else None
        return ResidualStep(body, shortcut, activation)


def _run(records: List[Record], x: Tensor) -> Tensor:
    for record in records:
        x = record.apply(x)
    return x


def _write_records(out: ByteWriter, records: List[Record]) -> None:
    for record in records:
        out.put("B", int(record.tag))
        record.write(out)


def _read_records(reader: ByteReader, count: int) -> List[Record]:
    records: List[Record] = []
    for _ in range(count):
        (raw,) = reader.get("B")
        try:
            tag = RecordTag(raw)
        except ValueError as e:
            raise reader.fail("Unknown record tag %d" % raw) from e
        if tag == RecordTag.PACKED_CONV:
            records.append(PackedConv.read(reader))
        elif tag == RecordTag.FLOAT_CONV:
            records.append(FloatConv.read(reader))
        elif tag == RecordTag.AFFINE:
            records.append(Affine.read(reader))
        elif tag == RecordTag.MAXOUT:
            records.append(MaxoutStep.read(reader))
        elif tag == RecordTag.LINEAR:
            records.append(LinearStep.read(reader))
        elif tag == RecordTag.RESIDUAL:
            records.append(ResidualStep.read(reader))
        else:
            records.append(NodeStep.read(tag, reader))
    return records


@define(eq=False)
class InferenceBundle:
    """
    An exported model.

    Attributes:
        header(Dict[str, Any]): Model description, e.g. the model config and input shape
        records(List[Record]): Inference steps in order
    """

    header: Dict[str, Any]
    records: List[Record] = field(factory=list)

    @property
    def classes(self) -> int:
        return int(self.header.get("classes", 0))

    def forward(self, x: Tensor) -> Tensor:
        """Logits for a batch of images."""
        return _run(self.records, x)

    def predict(self, x: Tensor, batch_size: int = 64) -> np.ndarray:
        """Top-1 predictions, computed in batches."""
        predictions = [np.argmax(self.forward(x[i : i + batch_size]), axis=1) for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def to_bytes(self) -> bytes:
        stream = io.BytesIO()
        out = ByteWriter(stream)
        header = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out.raw(BUNDLE_MAGIC)
        out.put("HI", BUNDLE_VERSION, len(header))
        out.raw(header)
        out.put("I", len(self.records))
        _write_records(out, self.records)
        return stream.getvalue()

    @staticmethod
    def from_bytes(data: bytes) -> "InferenceBundle":
        """
        Parse a bundle.

        Raises:
            AdaBinError: If the data is not a bundle of a supported version or is truncated, with the failing offset
        """
        reader = ByteReader(data, FailureReason.CORRUPT_BUNDLE, "bundle")
        reader.magic(BUNDLE_MAGIC)
        version, length = reader.get("HI")
        if version != BUNDLE_VERSION:
            raise reader.fail("Unsupported bundle version %d" % version)
        try:
            header = json.loads(reader.take(length).decode("utf-8"))
        except ValueError as e:
            raise reader.fail("Unreadable bundle header") from e
        (count,) = reader.get("I")
        records = _read_records(reader, count)
        reader.finish()
        return InferenceBundle(header, records)

    def save(self, path: str) -> int:
        """Write the bundle and return its size in bytes."""
        data = self.to_bytes()
        with open(path, "wb") as handle:
            handle.write(data)
        log.info("Wrote inference bundle %s (%d bytes)", path, len(data))
        return len(data)


def load_bundle(path: str) -> InferenceBundle:
    with open(path, "rb") as handle:
        return InferenceBundle.from_bytes(handle.read())


def _export_conv(layer: BinaryConv2d) -> PackedConv:
    alpha_a, beta_a = float(layer.act_alpha.value), float(layer.act_beta.value)
    if not (np.isfinite(alpha_a) and np.isfinite(beta_a)):
        message = "%s has a non-finite activation set (%s, %s)" % (layer.name, alpha_a, beta_a)
        raise AdaBinError(FailureReason.INVALID_VALUE, message)
    weights = layer.binarized_weight()
    specs = KernelSpecs(weights.spec.alpha, weights.spec.beta, alpha_a, beta_a)
    symmetric = conv_mode(layer) == ConvMode.SIGN_BINARY
    return PackedConv(layer.name, layer.stride, layer.zero_pad, pack(weights.signs), specs, symmetric)


def _export(node: Node) -> List[Record]:
    # pylint: disable=too-many-return-statements
    if isinstance(node, Sequential):
        return [record for child in node.nodes for record in _export(child)]
    if isinstance(node, Residual):
        shortcut = _export(node.shortcut) if node.shortcut is not None else None
        activation = _export(node.activation)[0] if node.activation is not None else None
        return [ResidualStep(_export(node.body), shortcut, activation)]
    if isinstance(node, BinaryConv2d):
        return [_export_conv(node)]
    if isinstance(node, Conv2d):
        return [FloatConv(node.weight.value.copy(), node.stride, node.zero_pad)]
    if isinstance(node, BatchNorm2d):
        return [Affine(*node.fold())]
    if isinstance(node, Maxout):
        return [MaxoutStep(node.gamma_plus.value.copy(), node.gamma_minus.value.copy())]
    if isinstance(node, Linear):
        return [LinearStep(node.weight.value.copy(), node.bias.value.copy())]
    if isinstance(node, AvgPoolPad):
        return [NodeStep(RecordTag.SHORTCUT_PAD, AvgPoolPad(node.name, node.in_channels, node.out_channels, node.stride))]
    if isinstance(node, AvgPool2d):
        return [NodeStep(RecordTag.AVGPOOL, AvgPool2d(node.name, node.kernel, node.stride))]
    if isinstance(node, GlobalAvgPool):
        return [NodeStep(RecordTag.GLOBAL_POOL, GlobalAvgPool(node.name))]
    if isinstance(node, Flatten):
        return [NodeStep(RecordTag.FLATTEN, Flatten(node.name))]
    if isinstance(node, Identity):
        return [NodeStep(RecordTag.IDENTITY, Identity(node.name))]
    raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Cannot export layer %r" % node)


def export_packed_model(graph: Graph) -> InferenceBundle:
    """
    Pack a trained graph for inference.

    Raises:
        AdaBinError: If the graph has no layers or a binary layer has a non-finite activation set
    """
    if not graph.nodes:
        raise AdaBinError(FailureReason.EMPTY_MODEL, "Cannot export a model with no layers")
    records = [record for node in graph.nodes for record in _export(node)]
    header = dict(graph.metadata)
    header["classes"] = graph.classes
    bundle = InferenceBundle(header, records)
    log.debug("Exported %d top-level records", len(records))
    return bundle
