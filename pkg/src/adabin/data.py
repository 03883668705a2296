# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Dataset loading, subsetting and augmentation.

CIFAR-10 is read from the binary batch files (3073-byte records: one label byte, then 1024 red,
1024 green and 1024 blue pixel bytes).  MNIST is read from IDX files, optionally gzip-compressed.
Images are kept as float32 in [0, 1]; per-channel normalization is applied when batches are drawn.
"""

from __future__ import annotations

import gzip
import logging
import os
import queue
import threading
from typing import Any, Iterable, Iterator, List, Optional, Tuple

import numpy as np
from attrs import define

from .interface import AdaBinError, DatasetKind, FailureReason
from .tensor import DTYPE, Tensor

log = logging.getLogger("adabin.data")

__all__ = [
    "CIFAR10_MEAN",
    "CIFAR10_STD",
    "MNIST_MEAN",
    "MNIST_STD",
    "Dataset",
    "read_cifar10_batch",
    "load_cifar10",
    "read_idx",
    "load_mnist",
    "load_dataset",
    "crop",
    "flip",
    "augment",
    "stratified_subset",
    "iterate_batches",
    "Prefetcher",
]

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)

CIFAR10_CLASSES = 10
CIFAR10_SIDE = 32
CIFAR10_RECORD = 1 + 3 * CIFAR10_SIDE * CIFAR10_SIDE
CIFAR10_TRAIN_FILES = ["data_batch_%d.bin" % index for index in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_BATCH_RECORDS = 10000

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
GZIP_MAGIC = b"\x1f\x8b"

CROP_PADDING = 4


@define(eq=False)
class Dataset:
    """
    Images and labels of one split.

    Attributes:
        images(Tensor): (N, C, H, W) float32 in [0, 1], before normalization
        labels(np.ndarray): (N,) int64 class indices
        split(str): "train" or "test"
        kind(DatasetKind): Source dataset, which decides augmentation
        mean(Tuple[float, ...]): Per-channel normalization mean
        std(Tuple[float, ...]): Per-channel normalization standard deviation
        classes(int): Number of classes
    """

    images: Tensor
    labels: np.ndarray
    split: str
    kind: DatasetKind
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    classes: int = 10

    def __attrs_post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise AdaBinError(FailureReason.SHAPE_MISMATCH, "%d images vs %d labels" % (self.images.shape[0], self.labels.shape[0]))
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise AdaBinError(FailureReason.LABEL_OUT_OF_RANGE, "Labels must lie in [0, %d)" % self.classes)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def normalize(self, images: Tensor) -> Tensor:
        mean = np.asarray(self.mean, dtype=DTYPE).reshape(1, -1, 1, 1)
        std = np.asarray(self.std, dtype=DTYPE).reshape(1, -1, 1, 1)
        return ((images - mean) / std).astype(DTYPE)

    def take(self, indices: Any) -> Dataset:
        """A new dataset holding the selected examples."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.split, self.kind, self.mean, self.std, self.classes)


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:2] == GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def read_cifar10_batch(path: str, records: Optional[int] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Read one CIFAR-10 binary batch file.

    Args:
        path(str): File to read
        records(int): Expected record count; None accepts any whole number of records

    Raises:
        AdaBinError: If the size is wrong (naming expected and actual bytes) or a label exceeds 9
    """
    with open(path, "rb") as handle:
        data = handle.read()
    if records is not None and len(data) != records * CIFAR10_RECORD:
        message = "%s: expected %d bytes, got %d" % (path, records * CIFAR10_RECORD, len(data))
        raise AdaBinError(FailureReason.DATASET_FORMAT, message)
    if len(data) % CIFAR10_RECORD:
        raise AdaBinError(
            FailureReason.DATASET_FORMAT, "%s: expected a multiple of %d bytes, got %d" % (path, CIFAR10_RECORD, len(data))
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= CIFAR10_CLASSES:
        raise AdaBinError(FailureReason.DATASET_FORMAT, "%s: label byte %d out of range" % (path, int(labels.max())))
    images = raw[:, 1:].reshape(-1, 3, CIFAR10_SIDE, CIFAR10_SIDE).astype(DTYPE) / DTYPE(255.0)
    return images, labels


def _cifar_root(directory: str) -> str:
    nested = os.path.join(directory, "cifar-10-batches-bin")
    return nested if os.path.isdir(nested) else directory


def load_cifar10(directory: str, records_per_batch: Optional[int] = CIFAR10_BATCH_RECORDS) -> Tuple[Dataset, Dataset]:
    """Load the five training batches and the test batch of CIFAR-10."""
    root = _cifar_root(directory)

    def split(files: List[str], name: str) -> Dataset:
        parts = [read_cifar10_batch(os.path.join(root, path), records_per_batch) for path in files]
        images = np.concatenate([part[0] for part in parts])
        labels = np.concatenate([part[1] for part in parts])
        return Dataset(images, labels, name, DatasetKind.CIFAR10, CIFAR10_MEAN, CIFAR10_STD, CIFAR10_CLASSES)

    train, test = split(CIFAR10_TRAIN_FILES, "train"), split([CIFAR10_TEST_FILE], "test")
    log.info("Loaded CIFAR-10 from %s: %d train, %d test", root, len(train), len(test))
    return train, test


def read_idx(path: str, magic: int) -> np.ndarray:
    """
    Read an IDX file of unsigned bytes with big-endian dimensions.

    Raises:
        AdaBinError: If the magic differs (naming the observed value) or the payload size is wrong
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise AdaBinError(FailureReason.DATASET_FORMAT, "%s: expected an IDX header, got %d bytes" % (path, len(data)))
    observed = int.from_bytes(data[:4], "big")
    if observed != magic:
        raise AdaBinError(FailureReason.DATASET_FORMAT, "%s: bad IDX magic 0x%08x, expected 0x%08x" % (path, observed, magic))
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise AdaBinError(FailureReason.DATASET_FORMAT, "%s: expected %d header bytes, got %d" % (path, header, len(data)))
    dims = tuple(int(d) for d in np.frombuffer(data[4:header], dtype=">u4"))
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise AdaBinError(FailureReason.DATASET_FORMAT, "%s: expected %d bytes, got %d" % (path, expected, len(data)))
    return np.frombuffer(data[header:], dtype=np.uint8).reshape(dims)


def _find(directory: str, name: str) -> str:
    for candidate in (name, name + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise AdaBinError(FailureReason.DATASET_FORMAT, "Missing MNIST file %s in %s" % (name, directory))


def load_mnist(directory: str) -> Tuple[Dataset, Dataset]:
    """Load the MNIST training and test splits as 1 x 28 x 28 images."""

    def split(name: str) -> Dataset:
        image_file, label_file = MNIST_FILES[name]
        images = read_idx(_find(directory, image_file), IDX_IMAGES_MAGIC)
        labels = read_idx(_find(directory, label_file), IDX_LABELS_MAGIC).astype(np.int64)
        scaled = images[:, None, :, :].astype(DTYPE) / DTYPE(255.0)
        return Dataset(scaled, labels, name, DatasetKind.MNIST, MNIST_MEAN, MNIST_STD, 10)

    train, test = split("train"), split("test")
    log.info("Loaded MNIST from %s: %d train, %d test", directory, len(train), len(test))
    return train, test


def load_dataset(kind: DatasetKind, directory: str) -> Tuple[Dataset, Dataset]:
    return load_cifar10(directory) if kind == DatasetKind.CIFAR10 else load_mnist(directory)


def crop(images: Tensor, offsets: np.ndarray, padding: int = CROP_PADDING) -> Tensor:
    """Zero-pad every image by padding and cut a window of the original size at the given (row, col) offsets."""
    _, _, height, width = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    rows = offsets[:, 0][:, None] + np.arange(height)[None, :]
    cols = offsets[:, 1][:, None] + np.arange(width)[None, :]
    index = np.arange(images.shape[0])[:, None, None, None]
    channel = np.arange(images.shape[1])[None, :, None, None]
    return padded[index, channel, rows[:, None, :, None], cols[:, None, None, :]]


def flip(images: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mirror images horizontally, all of them or those selected by mask."""
    mirrored = images[..., ::-1]
    if mask is None:
        return np.ascontiguousarray(mirrored)
    return np.where(mask[:, None, None, None], mirrored, images)


def augment(images: Tensor, kind: DatasetKind, rng: np.random.Generator) -> Tensor:
    """
    Training augmentation: for CIFAR-10, pad by 4, random crop back to size and flip with p=0.5.

    MNIST batches pass through unchanged.
    """
    if kind != DatasetKind.CIFAR10:
        return images
    offsets = rng.integers(0, 2 * CROP_PADDING + 1, size=(images.shape[0], 2))
    flips = rng.random(images.shape[0]) < 0.5
    return flip(crop(images, offsets), flips).astype(DTYPE)


def stratified_subset(labels: np.ndarray, size: int, seed: int) -> np.ndarray:
    """
    Sorted indices of a class-stratified random subset.

    Each class keeps its share of the data, rounded down, with leftover slots going to the
    classes with the largest remainders.

    Raises:
        AdaBinError: If size exceeds the number of examples
    """
    total = labels.shape[0]
    if size > total or size < 0:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Subset of %d requested from %d examples" % (size, total))
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * size / total
    quota = np.floor(exact).astype(np.int64)
    leftover = size - int(quota.sum())
    order = np.lexsort((classes, -(exact - quota)))
    quota[order[:leftover]] += 1
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(np.flatnonzero(labels == label), size=int(count), replace=False) for label, count in zip(classes, quota)]
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)


def iterate_batches(
    dataset: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None, train: bool = False, augmentation: bool = True
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """
    Normalized batches of a dataset.

    Training batches are shuffled and augmented with rng; evaluation batches come in order.
    """
    order = rng.permutation(len(dataset)) if train and rng is not None else np.arange(len(dataset))
    for start in range(0, len(dataset), batch_size):
        index = order[start : start + batch_size]
        images = dataset.images[index]
        if train and augmentation and rng is not None:
            images = augment(images, dataset.kind, rng)
        yield dataset.normalize(images), dataset.labels[index]


_DONE = object()


class Prefetcher:
    """
    Runs an iterator in a background thread, at most depth items ahead of the consumer.

    Items arrive in the producer's order, so a seeded producer stays deterministic.  An exception in
    the producer, including KeyboardInterrupt and SystemExit, is raised again in the consumer.
    """

    def __init__(self, source: Iterable[Any], depth: int = 1) -> None:
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._source = source
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="adabin-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item: Any) -> bool:
        while not self._stopped.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        ending: Any = _DONE
        try:
            for item in self._source:
                if not self._put(item):
                    return
        except BaseException as e:  # pylint: disable=broad-except
            ending = e
        finally:
            self._put(ending)

    def __iter__(self) -> Iterator[Any]:
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self) -> None:
        self._stopped.set()
        self._thread.join(timeout=5)
