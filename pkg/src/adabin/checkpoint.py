# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Versioned training checkpoints.

File layout (all integers little-endian), documented in docs/formats.rst:

    magic "ADCK" | u16 version | u32 header length | header JSON (utf-8) | u32 record count | records

The header holds the run config, the number of completed epochs, the best test accuracy so far,
the shuffling generator state and a creation timestamp.  Each record is one array:

    u8 kind | u16 name length | name (utf-8) | u8 dtype | u8 ndim | u32 dims... | payload | u32 crc32

where kind is 0 for a parameter value, 1 for its momentum buffer and 2 for a batch norm buffer,
dtype 1 is float32, and the checksum covers the payload bytes.
"""

import io
import json
import logging
import zlib
from enum import IntEnum
from typing import Any, Dict, List, Tuple

import numpy as np
from attrs import define, field
from cattrs.errors import BaseValidationError

from .autograd import Graph
from .codec import ByteReader, ByteWriter
from .config import RunConfig
from .interface import AdaBinError, FailureReason
from .model import build_model
from .tensor import DTYPE
from .util import timestamp

log = logging.getLogger("adabin.checkpoint")

CHECKPOINT_MAGIC = b"ADCK"
CHECKPOINT_VERSION = 1
FLOAT32 = 1


class ArrayKind(IntEnum):
    VALUE = 0
    MOMENTUM = 1
    BUFFER = 2


# pylint: disable=too-many-instance-attributes
@define(eq=False)
class Checkpoint:
    """
    A snapshot of a training run.

    Attributes:
        config(RunConfig): The run configuration
        epoch(int): Number of completed epochs
        values(Dict[str, np.ndarray]): Parameter values by parameter name
        momentum(Dict[str, np.ndarray]): Optimizer momentum buffers by parameter name
        buffers(Dict[str, np.ndarray]): Batch norm running statistics by node and buffer name
        rng_state(Dict[str, Any]): State of the shuffling and augmentation generator
        best_accuracy(float): Best test accuracy reached so far
        created(str): UTC creation time
    """

    config: RunConfig
    epoch: int
    values: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    rng_state: Dict[str, Any]
    best_accuracy: float = 0.0
    created: str = field(factory=timestamp)

    @staticmethod
    def capture(graph: Graph, config: RunConfig, epoch: int, rng: np.random.Generator, best_accuracy: float = 0.0) -> "Checkpoint":
        """Snapshot a graph and its optimizer state."""
        params = graph.named_parameters()
        return Checkpoint(
            config=config,
            epoch=epoch,
            values={name: param.value.copy() for name, param in params.items()},
            momentum={name: param.momentum.copy() for name, param in params.items()},
            buffers={name: value.copy() for name, value in graph.buffers().items()},
            rng_state=rng.bit_generator.state,
            best_accuracy=best_accuracy,
        )

    def restore(self, graph: Graph) -> None:
        """
        Load parameters, momentum and buffers into a graph built from the same config.

        Raises:
            AdaBinError: If the graph's parameters or buffers do not match the checkpoint
        """
        params = graph.named_parameters()
        if set(params) != set(self.values):
            missing = sorted(set(params) ^ set(self.values))
            message = "Parameter names differ from the model: %s" % ", ".join(missing[:5])
            raise AdaBinError(FailureReason.CORRUPT_CHECKPOINT, message)
        for name, param in params.items():
            if self.values[name].shape != param.value.shape:
                message = "%s: checkpoint %s vs model %s" % (name, self.values[name].shape, param.value.shape)
                raise AdaBinError(FailureReason.SHAPE_MISMATCH, message)
            param.value = self.values[name].astype(DTYPE)
            param.momentum = self.momentum.get(name, np.zeros_like(param.value)).astype(DTYPE)
            param.zero_grad()
        expected = graph.buffers()
        if set(expected) != set(self.buffers):
            raise AdaBinError(FailureReason.CORRUPT_CHECKPOINT, "Buffer names differ from the model")
        graph.load_buffers({name: value.astype(DTYPE) for name, value in self.buffers.items()})

    def generator(self) -> np.random.Generator:
        """A generator positioned where the run left off."""
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    def model(self) -> Graph:
        """Build the model described by the config and load this checkpoint into it."""
        graph = build_model(self.config.model_config(), np.random.default_rng(self.config.seed))
        self.restore(graph)
        return graph

    def _header(self) -> Dict[str, Any]:
        return {
            "config": json.loads(self.config.to_json()),
            "epoch": self.epoch,
            "best_accuracy": self.best_accuracy,
            "rng_state": self.rng_state,
            "created": self.created,
        }

    def _arrays(self) -> List[Tuple[ArrayKind, str, np.ndarray]]:
        arrays = [(ArrayKind.VALUE, name, value) for name, value in self.values.items()]
        arrays += [(ArrayKind.MOMENTUM, name, value) for name, value in self.momentum.items()]
        arrays += [(ArrayKind.BUFFER, name, value) for name, value in self.buffers.items()]
        return arrays

    def to_bytes(self) -> bytes:
        stream = io.BytesIO()
        out = ByteWriter(stream)
        header = json.dumps(self._header(), sort_keys=True).encode("utf-8")
        out.raw(CHECKPOINT_MAGIC)
        out.put("HI", CHECKPOINT_VERSION, len(header))
        out.raw(header)
        arrays = self._arrays()
        out.put("I", len(arrays))
        for kind, name, value in arrays:
            encoded = name.encode("utf-8")
            payload = np.ascontiguousarray(value, dtype="<f4").tobytes()
            out.put("BH", int(kind), len(encoded))
            out.raw(encoded)
            out.put("BB", FLOAT32, value.ndim)
            out.put("%dI" % value.ndim, *value.shape)
            out.raw(payload)
            out.put("I", zlib.crc32(payload))
        return stream.getvalue()

    @staticmethod
    def from_bytes(data: bytes) -> "Checkpoint":
        """
        Parse a checkpoint.

        Raises:
            AdaBinError: If the data is corrupt, naming the byte offset of the failing record
        """
        reader = ByteReader(data, FailureReason.CORRUPT_CHECKPOINT, "checkpoint")
        reader.magic(CHECKPOINT_MAGIC)
        version, length = reader.get("HI")
        if version != CHECKPOINT_VERSION:
            raise reader.fail("Unsupported checkpoint version %d" % version)
        try:
            header = json.loads(reader.take(length).decode("utf-8"))
            config = RunConfig.from_json(json.dumps(header["config"]))
        except (KeyError, TypeError, ValueError, BaseValidationError) as e:
            raise reader.fail("Unreadable checkpoint header: %s" % e) from e
        tables: Dict[ArrayKind, Dict[str, np.ndarray]] = {kind: {} for kind in ArrayKind}
        (count,) = reader.get("I")
        for _ in range(count):
            kind, name, value = _read_array(reader)
            tables[kind][name] = value
        reader.finish()
        return Checkpoint(
            config=config,
            epoch=int(header.get("epoch", 0)),
            values=tables[ArrayKind.VALUE],
            momentum=tables[ArrayKind.MOMENTUM],
            buffers=tables[ArrayKind.BUFFER],
            rng_state=header.get("rng_state", {}),
            best_accuracy=float(header.get("best_accuracy", 0.0)),
            created=header.get("created", ""),
        )

    def save(self, path: str) -> int:
        """Write the checkpoint and return its size in bytes."""
        data = self.to_bytes()
        with open(path, "wb") as handle:
            handle.write(data)
        log.debug("Wrote checkpoint %s at epoch %d (%d bytes)", path, self.epoch, len(data))
        return len(data)


def _read_array(reader: ByteReader) -> Tuple[ArrayKind, str, np.ndarray]:
    start = reader.offset
    raw_kind, length = reader.get("BH")
    try:
        kind = ArrayKind(raw_kind)
    except ValueError as e:
        reader.offset = start
        raise reader.fail("Unknown record kind %d" % raw_kind) from e
    try:
        name = reader.take(length).decode("utf-8")
    except UnicodeDecodeError as e:
        reader.offset = start
        raise reader.fail("Record name is not utf-8") from e
    dtype, ndim = reader.get("BB")
    if dtype != FLOAT32:
        reader.offset = start
        raise reader.fail("Record %s has unsupported dtype %d" % (name, dtype))
    shape = reader.get("%dI" % ndim) if ndim else ()
    payload = reader.take(4 * int(np.prod(shape, dtype=np.int64)))
    (crc,) = reader.get("I")
    if zlib.crc32(payload) != crc:
        reader.offset = start
        raise reader.fail("Checksum mismatch in record %s" % name)
    return kind, name, np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint from disk.

    Raises:
        AdaBinError: If the file is corrupt, naming the byte offset of the failing record
    """
    with open(path, "rb") as handle:
        checkpoint = Checkpoint.from_bytes(handle.read())
    log.debug("Loaded checkpoint %s (epoch %d)", path, checkpoint.epoch)
    return checkpoint


def check_resumable(checkpoint: Checkpoint, config: RunConfig) -> None:
    """
    Verify that a run config can continue a checkpoint.

    Only the schedule length, output and logging settings may differ; anything that changes the
    model or the data stream contradicts the checkpoint.

    Raises:
        AdaBinError: If the configs disagree on a setting that shapes the run
    """
    mutable = {"epochs", "out_dir", "logfile_path", "data_dir", "prefetch", "profile"}
    saved = json.loads(checkpoint.config.to_json())
    current = json.loads(config.to_json())
    differ = sorted(key for key in saved if key not in mutable and saved[key] != current.get(key))
    if differ:
        raise AdaBinError(FailureReason.CONFIG_CONTRADICTION, "Resume config differs from checkpoint in: %s" % ", ".join(differ))
    if checkpoint.epoch > config.epochs:
        message = "Checkpoint has %d epochs but the run asks for %d" % (checkpoint.epoch, config.epochs)
        raise AdaBinError(FailureReason.CONFIG_CONTRADICTION, message)


def describe(checkpoint: Checkpoint) -> str:
    """One-line summary for log messages."""
    return "epoch %d, best accuracy %.4f, created %s" % (checkpoint.epoch, checkpoint.best_accuracy, checkpoint.created)
