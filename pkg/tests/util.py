# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
# pylint: disable=unsubscriptable-object

"""
Shared test utilities.
"""

import gzip
import os
import struct
from typing import Callable, Optional

import numpy as np

from adabin.data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES


def nested_conv(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Convolution written as plain loops, used as an independent oracle."""
    batch, channels, height, width = x.shape
    filters, _, kernel, _ = w.shape
    out_h = (height + 2 * pad - kernel) // stride + 1
    out_w = (width + 2 * pad - kernel) // stride + 1
    out = np.zeros((batch, filters, out_h, out_w), dtype=np.float64)
    for b in range(batch):
        for f in range(filters):
            for oy in range(out_h):
                for ox in range(out_w):
                    total = 0.0
                    for c in range(channels):
                        for i in range(kernel):
                            for j in range(kernel):
                                y, z = oy * stride + i - pad, ox * stride + j - pad
                                if 0 <= y < height and 0 <= z < width:
                                    total += float(x[b, c, y, z]) * float(w[f, c, i, j])
                    out[b, f, oy, ox] = total
    return out


def central_difference(function: Callable[[], float], values: np.ndarray, index: tuple, h: float = 1e-3) -> float:
    """Central finite difference of a scalar function with respect to one element, restoring it afterwards."""
    original = values[index]
    values[index] = original + h
    upper = function()
    values[index] = original - h
    lower = function()
    values[index] = original
    return (upper - lower) / (2.0 * h)


def hardtanh(u: np.ndarray) -> np.ndarray:
    return np.clip(u, -1.0, 1.0)


def ste_surrogate(a: np.ndarray, alpha: float, beta: float, anchor: np.ndarray) -> np.ndarray:
    """
    Straight-through surrogate of the activation binarizer, anchored at the forward branches.

    The anchor is the normalized input of the forward pass, held fixed while alpha and beta move, so
    the surrogate agrees with the binarized values at the anchor and has the clipped derivatives.
    """
    u = (a - beta) / alpha
    signs = np.where(anchor >= 0, 1.0, -1.0)
    return alpha * (hardtanh(u) + signs - hardtanh(anchor)) + beta


def write_idx(path: str, magic: int, data: np.ndarray, compress: bool = False) -> None:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", dim) for dim in data.shape)
    payload = header + np.ascontiguousarray(data, dtype=np.uint8).tobytes()
    if compress:
        with gzip.open(path, "wb") as handle:
            handle.write(payload)
    else:
        with open(path, "wb") as handle:
            handle.write(payload)


def write_mnist(directory: str, train: int = 64, test: int = 32, seed: int = 0, signal: bool = True) -> None:
    """
    Write a tiny synthetic MNIST tree in IDX format.

    With signal set, each class lights up its own row band, so a small network can learn it.
    """
    rng = np.random.default_rng(seed)
    for split, count in (("train", train), ("test", test)):
        labels = (np.arange(count) % 10).astype(np.uint8)
        rng.shuffle(labels)
        images = rng.integers(0, 40, size=(count, 28, 28)).astype(np.uint8)
        if signal:
            for index, label in enumerate(labels):
                images[index, 2 + 2 * label : 4 + 2 * label, :] = 255
        images_name, labels_name = MNIST_FILES[split]
        write_idx(os.path.join(directory, images_name), IDX_IMAGES_MAGIC, images)
        write_idx(os.path.join(directory, labels_name), IDX_LABELS_MAGIC, labels)


def write_cifar_batch(path: str, labels: np.ndarray, images: Optional[np.ndarray] = None) -> None:
    """Write records in CIFAR-10 binary format: one label byte, then 3072 pixel bytes as R, G and B planes."""
    if images is None:
        images = np.zeros((len(labels), 3, 32, 32), dtype=np.uint8)
    with open(path, "wb") as handle:
        for label, image in zip(labels, images):
            handle.write(bytes([int(label)]))
            handle.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
