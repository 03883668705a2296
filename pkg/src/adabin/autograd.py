# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Reverse-mode differentiation over a static layer graph.

A graph is an ordered list of nodes.  Each node computes its forward pass, saves whatever it needs
in a context, and implements its own backward rule, so quantizer nodes can substitute a
straight-through estimator for the true derivative.  Containers (sequential blocks, residual
units) are nodes that own child nodes.  Parameters are the trainable leaves.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from attrs import define, field
from ordered_set import OrderedSet

from .interface import AdaBinError, FailureReason, ParameterRole
from .quantize import EPSILON_ALPHA
from .tensor import DTYPE, Tensor

log = logging.getLogger("adabin.autograd")

__all__ = [
    "Parameter",
    "Node",
    "Graph",
    "softmax_cross_entropy",
    "forward",
    "backward",
    "sgd_step",
    "cosine_lr",
]


@define(eq=False)
class Parameter:
    """
    Trainable leaf with its gradient and optimizer state.

    Attributes:
        name(str): Dotted name, unique within a graph
        value(Tensor): Current value
        role(ParameterRole): Role tag, which decides weight decay and clamping
        trainable(bool): Frozen parameters keep their value through sgd_step
        latent(bool): Whether this is a latent real weight behind a binary layer
        grad(Tensor): Gradient from the most recent backward pass
        momentum(Tensor): Momentum buffer
    """

    name: str
    value: Tensor = field(converter=lambda v: np.array(v, dtype=DTYPE))
    role: ParameterRole
    trainable: bool = True
    latent: bool = False
    grad: Tensor = field(init=False)
    momentum: Tensor = field(init=False)

    def __attrs_post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, grad: Any) -> None:
        """Add to the gradient; the contribution must have the parameter's shape."""
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.value.shape:
            raise AdaBinError(
                FailureReason.SHAPE_MISMATCH,
                "Gradient for %s: %s vs %s" % (self.name, tuple(grad.shape), tuple(self.value.shape)),
            )
        self.grad = self.grad + grad


class Node(ABC):
    """A differentiable operation with a saved forward context."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.training = True
        self._ctx: Optional[Any] = None

    @abstractmethod
    def forward(self, x: Tensor) -> Tensor:
        """Compute the output and save the context needed by backward."""

    @abstractmethod
    def backward(self, grad: Tensor) -> Tensor:
        """Accumulate parameter gradients and return the gradient with respect to the input."""

    def parameters(self) -> List[Parameter]:
        """Parameters owned directly by this node."""
        return []

    def children(self) -> List[Node]:
        return []

    def buffers(self) -> Dict[str, Tensor]:
        """Non-trainable state that must survive a checkpoint, keyed by local name."""
        return {}

    def load_buffers(self, buffers: Dict[str, Tensor]) -> None:
        for key, value in buffers.items():
            current = self.buffers()[key]
            current[...] = value

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def train(self, mode: bool = True) -> None:
        self.training = mode
        for child in self.children():
            child.train(mode)

    def save(self, ctx: Any) -> None:
        self._ctx = ctx

    def context(self) -> Any:
        """Return the saved context, consuming it."""
        if self._ctx is None:
            raise AdaBinError(FailureReason.BACKWARD_BEFORE_FORWARD, "Backward called before forward on %s" % self.name)
        ctx, self._ctx = self._ctx, None
        return ctx

    def walk(self) -> Iterator[Node]:
        """This node and every descendant, depth first."""
        yield self
        for child in self.children():
            yield from child.walk()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def __repr__(self) -> str:
        return "%s(%s)" % (type(self).__name__, self.name)


class Graph:
    """
    A static, ordered layer graph ending in class logits.

    Attributes:
        nodes(List[Node]): Top-level nodes applied in order
        classes(int): Width of the logits
        metadata(Dict[str, Any]): Free-form description, e.g. the model config it was built from
    """

    def __init__(self, nodes: Sequence[Node], classes: int, metadata: Optional[Dict[str, Any]] = None) -> None:
        self.nodes = list(nodes)
        self.classes = classes
        self.metadata = metadata or {}
        self._loss_ctx: Optional[Tuple[Tensor, Tensor]] = None

    def walk(self) -> Iterator[Node]:
        for node in self.nodes:
            yield from node.walk()

    def parameters(self) -> OrderedSet[Parameter]:
        """Every parameter reachable from the graph, in registration order, without duplicates."""
        params: OrderedSet[Parameter] = OrderedSet()
        for node in self.walk():
            params.update(node.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {param.name: param for param in self.parameters()}

    def buffers(self) -> Dict[str, Tensor]:
        return {"%s.%s" % (node.name, key): value for node in self.walk() for key, value in node.buffers().items()}

    def load_buffers(self, buffers: Dict[str, Tensor]) -> None:
        for node in self.walk():
            local = {key: buffers["%s.%s" % (node.name, key)] for key in node.buffers()}
            node.load_buffers(local)

    def train(self, mode: bool = True) -> None:
        for node in self.nodes:
            node.train(mode)

    def eval(self) -> None:
        self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def infer(self, x: Tensor) -> Tensor:
        """Run the nodes forward and return the logits."""
        for node in self.nodes:
            x = node.forward(x)
        return x

    def propagate(self, grad: Tensor) -> Tensor:
        """Run every node backward from an upstream gradient on the logits."""
        for node in reversed(self.nodes):
            grad = node.backward(grad)
        return grad

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        shape = input_shape
        for node in self.nodes:
            shape = node.output_shape(shape)
        return shape


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tuple[float, Tensor]:
    """
    Mean softmax cross-entropy and its gradient with respect to the logits.

    Raises:
        AdaBinError: If a label is outside [0, classes)
    """
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise AdaBinError(FailureReason.SHAPE_MISMATCH, "Labels %s for logits %s" % (labels.shape, logits.shape))
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise AdaBinError(FailureReason.LABEL_OUT_OF_RANGE, "Labels must lie in [0, %d)" % classes)
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(batch), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    return loss, (grad / batch).astype(DTYPE)


def forward(graph: Graph, input: Tensor, labels: Iterable[int]) -> Tuple[float, Tensor]:  # pylint: disable=redefined-builtin
    """Compute the mean cross-entropy loss and the logits, saving context for backward."""
    logits = graph.infer(input)
    loss, grad = softmax_cross_entropy(logits, np.asarray(labels))
    graph._loss_ctx = (logits, grad)  # pylint: disable=protected-access
    return loss, logits


def backward(graph: Graph) -> None:
    """Populate the gradient of every reachable parameter from the last forward loss."""
    if graph._loss_ctx is None:  # pylint: disable=protected-access
        raise AdaBinError(FailureReason.BACKWARD_BEFORE_FORWARD)
    _, grad = graph._loss_ctx  # pylint: disable=protected-access
    graph._loss_ctx = None  # pylint: disable=protected-access
    graph.zero_grad()
    graph.propagate(grad)


def sgd_step(
    params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0, latent_clip: float = 0.0
) -> None:
    """
    Apply one SGD-with-momentum update.

    v <- momentum * v + grad (+ weight_decay * value, weights only), then value <- value - lr * v.
    Quantizer distances are clamped to at least EPSILON_ALPHA afterwards, and latent binary weights
    are clipped to [-latent_clip, latent_clip] when latent_clip is positive.
    """
    if lr < 0 or not math.isfinite(lr):
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Learning rate must be non-negative: %s" % lr)
    for param in params:
        if not param.trainable:
            continue
        step = param.grad
        if weight_decay and param.role == ParameterRole.WEIGHT:
            step = step + DTYPE(weight_decay) * param.value
        param.momentum = (DTYPE(momentum) * param.momentum + step).astype(DTYPE)
        param.value = (param.value - DTYPE(lr) * param.momentum).astype(DTYPE)
        if param.role == ParameterRole.QUANTIZER_ALPHA:
            param.value = np.maximum(param.value, DTYPE(EPSILON_ALPHA))
        if latent_clip > 0 and param.latent:
            param.value = np.clip(param.value, -latent_clip, latent_clip).astype(DTYPE)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Cosine annealing from lr0 at epoch 0 toward 0 at total_epochs."""
    if total_epochs <= 0:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Total epochs must be positive: %d" % total_epochs)
    if not 0 <= epoch < total_epochs:
        raise AdaBinError(FailureReason.INVALID_ARGUMENT, "Epoch %d outside [0, %d)" % (epoch, total_epochs))
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))
