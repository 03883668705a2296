# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
# pylint: disable=too-many-locals

"""
The train, eval, bench, export and inspect commands.

Each command takes already-resolved settings and returns a report object; the command line layer
only parses arguments, loads configuration and prints what comes back.
"""

import json
import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import cattrs
import numpy as np
from attrs import define, evolve, field, frozen

from .autograd import Graph, backward, cosine_lr, forward, sgd_step
from .bundle import BUNDLE_MAGIC, InferenceBundle, export_packed_model, load_bundle
from .checkpoint import Checkpoint, check_resumable, describe, load_checkpoint
from .config import RunConfig
from .costmodel import CostReport, canonical_cost, format_report, model_cost
from .data import Dataset, Prefetcher, iterate_batches, load_dataset, stratified_subset
from .interface import AdaBinError, FailureReason
from .layers import BinaryConv2d, Maxout
from .model import binary_convs, build_model
from .util import JsonLines, run_dirname

log = logging.getLogger("adabin.experiment")

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.jsonl"
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
EVAL_BATCH = 256
PARITY_IMAGES = 1000


def _to_json(value: Any) -> str:
    return json.dumps(cattrs.unstructure(value), indent="  ")


def _spawn(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for initialization and for the data stream."""
    init, stream = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(stream)


def load_splits(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """Load the configured dataset and apply the stratified subsets."""
    train, test = load_dataset(config.dataset, config.data_dir)
    if config.subset:
        train = train.take(stratified_subset(train.labels, config.subset, config.subset_seed))
    if config.test_subset:
        test = test.take(stratified_subset(test.labels, config.test_subset, config.subset_seed + 1))
    log.info("Using %d training and %d test examples", len(train), len(test))
    return train, test


def quantizer_state(graph: Graph) -> Dict[str, List[float]]:
    """Current (alpha_a, beta_a) of every binary convolution."""
    return {conv.name: [float(conv.act_alpha.value), float(conv.act_beta.value)] for conv in binary_convs(graph)}


def predict_logits(graph: Graph, dataset: Dataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Logits of the whole dataset, in order, with the graph in eval mode."""
    graph.eval()
    outputs = [graph.infer(images) for images, _ in iterate_batches(dataset, batch_size)]
    return np.concatenate(outputs) if outputs else np.zeros((0, graph.classes), dtype=np.float32)


def predict_bundle(bundle: InferenceBundle, dataset: Dataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    outputs = [bundle.forward(images) for images, _ in iterate_batches(dataset, batch_size)]
    return np.concatenate(outputs) if outputs else np.zeros((0, bundle.classes), dtype=np.float32)


@frozen
class EvalReport:
    """
    Accuracy of a model on one split.

    Attributes:
        examples(int): Number of examples evaluated
        top1(float): Fraction of examples whose highest logit is the label
        per_class(List[float]): Top-1 accuracy of each class, 0 for a class with no examples
        class_counts(List[int]): Number of examples of each class
        source(str): What was evaluated, a checkpoint or bundle path
    """

    examples: int
    top1: float
    per_class: List[float]
    class_counts: List[int]
    source: str = ""

    def to_json(self) -> str:
        return _to_json(self)


def accuracy_report(logits: np.ndarray, labels: np.ndarray, classes: int, source: str = "") -> EvalReport:
    predictions = np.argmax(logits, axis=1) if logits.size else np.zeros(0, dtype=np.int64)
    correct = predictions == labels
    counts = np.bincount(labels, minlength=classes)
    hits = np.bincount(labels[correct], minlength=classes)
    per_class = [float(hits[i] / counts[i]) if counts[i] else 0.0 for i in range(classes)]
    top1 = float(correct.mean()) if labels.size else 0.0
    return EvalReport(int(labels.size), top1, per_class, [int(count) for count in counts], source)


@define
class TrainResult:
    """Where a training run left its outputs, and how it ended."""

    run_dir: str
    epochs: int
    final_accuracy: float
    best_accuracy: float
    metrics: List[Dict[str, Any]] = field(factory=list)

    @property
    def last_checkpoint(self) -> str:
        return os.path.join(self.run_dir, LAST_CHECKPOINT)

    @property
    def best_checkpoint(self) -> str:
        return os.path.join(self.run_dir, BEST_CHECKPOINT)

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.run_dir, METRICS_FILE)


def _batches(config: RunConfig, dataset: Dataset, rng: np.random.Generator) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
    source = iterate_batches(dataset, config.batch_size, rng, train=True, augmentation=config.augment)
    return Prefetcher(source) if config.prefetch else source


def train_epoch(graph: Graph, config: RunConfig, dataset: Dataset, rng: np.random.Generator, lr: float) -> Dict[str, float]:
    """Run one epoch of SGD and return loss statistics."""
    graph.train()
    params = list(graph.parameters())
    batches = _batches(config, dataset, rng)
    total, count, first, last = 0.0, 0, None, None
    try:
        for step, (images, labels) in enumerate(batches):
            loss, _ = forward(graph, images, labels)
            backward(graph)
            sgd_step(params, lr, config.momentum, config.weight_decay, config.latent_clip)
            log.debug("Step %d: loss=%.6f", step, loss)
            total += loss * labels.shape[0]
            count += labels.shape[0]
            first = loss if first is None else first
            last = loss
    finally:
        if isinstance(batches, Prefetcher):
            batches.close()
    return {
        "train_loss": total / count if count else 0.0,
        "first_step_loss": first if first is not None else 0.0,
        "last_step_loss": last if last is not None else 0.0,
    }


def train(config: RunConfig, resume: Optional[str] = None, datasets: Optional[Tuple[Dataset, Dataset]] = None) -> TrainResult:
    """
    Train a model, writing metrics and checkpoints into a run directory.

    A new run gets a fresh directory under the configured output directory; a resumed run keeps
    writing into the directory of the checkpoint it continues.

    Raises:
        AdaBinError: If a resumed checkpoint contradicts the config, or the data cannot be loaded
    """
    log.info("Configuration: %s", config.to_json())
    checkpoint = load_checkpoint(resume) if resume else None
    if checkpoint:
        check_resumable(checkpoint, config)
        log.info("Resuming from %s (%s)", resume, describe(checkpoint))
    train_set, test_set = datasets if datasets else load_splits(config)
    if train_set.classes != config.classes:
        message = "Dataset has %d classes, model has %d" % (train_set.classes, config.classes)
        raise AdaBinError(FailureReason.CLASS_MISMATCH, message)

    init_rng, rng = _spawn(config.seed)
    graph = build_model(config.model_config(), init_rng)
    start, best = 0, 0.0
    if checkpoint:
        checkpoint.restore(graph)
        rng = checkpoint.generator()
        start, best = checkpoint.epoch, checkpoint.best_accuracy
        run_dir = os.path.dirname(os.path.abspath(resume))  # type: ignore
    else:
        run_dir = os.path.join(config.out_dir, run_dirname(config.architecture.value))
        os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, CONFIG_FILE), "w", encoding="utf-8") as handle:
        handle.write(config.to_json())

    result = TrainResult(run_dir, start, 0.0, best)
    with JsonLines(result.metrics_path, append=checkpoint is not None) as metrics:
        for epoch in range(start, config.epochs):
            lr = cosine_lr(epoch, config.epochs, config.lr0)
            losses = train_epoch(graph, config, train_set, rng, lr)
            accuracy = accuracy_report(predict_logits(graph, test_set), test_set.labels, config.classes).top1
            record = {"epoch": epoch + 1, "lr": lr, "test_accuracy": accuracy, "quantizers": quantizer_state(graph), **losses}
            metrics.write(record)
            result.metrics.append(record)
            log.info("Epoch %d/%d: loss=%.4f accuracy=%.4f lr=%.6f", epoch + 1, config.epochs, losses["train_loss"], accuracy, lr)
            saved = Checkpoint.capture(graph, config, epoch + 1, rng, max(best, accuracy))
            saved.save(result.last_checkpoint)
            if accuracy > best or not os.path.exists(result.best_checkpoint):
                best = max(best, accuracy)
                saved.save(result.best_checkpoint)
            result.epochs, result.final_accuracy, result.best_accuracy = epoch + 1, accuracy, best
    log.info("Finished %s: final accuracy %.4f, best %.4f", run_dir, result.final_accuracy, result.best_accuracy)
    return result


def _is_bundle(path: str) -> bool:
    with open(path, "rb") as handle:
        return handle.read(len(BUNDLE_MAGIC)) == BUNDLE_MAGIC


def evaluate(
    path: str, config: RunConfig, dump_logits: Optional[str] = None, dataset: Optional[Dataset] = None
) -> EvalReport:
    """
    Evaluate a checkpoint or an inference bundle on the test split.

    The dataset and subsets come from the checkpoint's own config when one is given, so the result
    matches the accuracy logged during training; only the data directory is taken from config.

    Raises:
        AdaBinError: If the model's class count differs from the dataset's
    """
    if _is_bundle(path):
        model: Union[Graph, InferenceBundle] = load_bundle(path)
        settings = config
        classes = model.classes
    else:
        checkpoint = load_checkpoint(path)
        settings = evolve(checkpoint.config, data_dir=config.data_dir)
        model = checkpoint.model()
        classes = model.classes
    test = dataset if dataset is not None else load_splits(settings)[1]
    if classes != test.classes:
        raise AdaBinError(FailureReason.CLASS_MISMATCH, "Model has %d classes, dataset has %d" % (classes, test.classes))
    logits = predict_bundle(model, test) if isinstance(model, InferenceBundle) else predict_logits(model, test)
    if dump_logits:
        np.save(dump_logits, logits)
        log.info("Wrote logits to %s", dump_logits)
    report = accuracy_report(logits, test.labels, classes, path)
    log.info("Top-1 accuracy of %s: %.4f over %d examples", path, report.top1, report.examples)
    return report


@frozen
class BenchReport:
    """
    Cost of a model and the canonical self-test row.

    Attributes:
        architecture(str): Architecture id of the model
        summary(Dict[str, float]): Model totals, see CostReport.summary()
        layers(List[Dict[str, Any]]): Per-layer costs
        canonical(Dict[str, float]): The canonical row and its residuals against the published claims
    """

    architecture: str
    summary: Dict[str, float]
    layers: List[Dict[str, Any]]
    canonical: Dict[str, float]

    def to_json(self) -> str:
        return _to_json(self)


def bench_graph(graph: Graph, architecture: str) -> Tuple[BenchReport, str]:
    """Cost report of a graph as an object and as an aligned text table."""
    report: CostReport = model_cost(graph)
    _, canonical = canonical_cost()
    text = format_report(report)
    text += "\ncanonical n=c=256 k=3 14x14: extra_ops=%.2f%% extra_params=%.2f%% speedup=%.2fx memory_saving=%.2fx" % (
        canonical["extra_ops_pct"],
        canonical["extra_params_pct"],
        canonical["speedup"],
        canonical["memory_saving"],
    )
    layers = [cattrs.unstructure(layer) for layer in report.layers]
    return BenchReport(architecture, report.summary(), layers, canonical), text


def bench(config: RunConfig, checkpoint_path: Optional[str] = None) -> Tuple[BenchReport, str]:
    """Cost report for the configured model, or for the model stored in a checkpoint."""
    if checkpoint_path:
        checkpoint = load_checkpoint(checkpoint_path)
        graph, settings = checkpoint.model(), checkpoint.config
    else:
        graph, settings = build_model(config.model_config()), config
    log.info("Configuration: %s", settings.to_json())
    return bench_graph(graph, settings.architecture.value)


@frozen
class ExportReport:
    """
    Result of packing a checkpoint into an inference bundle.

    Attributes:
        bundle_path(str): Where the bundle was written
        size_bytes(int): Size of the bundle file
        predicted_bytes(float): Parameter storage predicted by the cost model
        size_ratio(float): size_bytes / predicted_bytes
        images(int): Number of test images used for the parity check, 0 if skipped
        agreement(float): Fraction of those images where bundle and graph predict the same class
        graph_accuracy(float): Top-1 accuracy of the training graph on those images
        bundle_accuracy(float): Top-1 accuracy of the bundle on those images
    """

    bundle_path: str
    size_bytes: int
    predicted_bytes: float
    size_ratio: float
    images: int = 0
    agreement: float = 1.0
    graph_accuracy: float = 0.0
    bundle_accuracy: float = 0.0

    @property
    def parity(self) -> bool:
        return self.agreement == 1.0

    def to_json(self) -> str:
        return _to_json(self)


def export(
    checkpoint_path: str, bundle_path: str, config: RunConfig, dataset: Optional[Dataset] = None, images: int = PARITY_IMAGES
) -> ExportReport:
    """
    Pack a checkpoint into an inference bundle and verify it against the training graph.

    The parity check runs on the first images of the test split; it is skipped when images is 0.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    graph = checkpoint.model()
    bundle = export_packed_model(graph)
    size = bundle.save(bundle_path)
    predicted = model_cost(graph).params_bytes
    report = ExportReport(bundle_path, size, predicted, size / predicted if predicted else 0.0)
    if images:
        settings = evolve(checkpoint.config, data_dir=config.data_dir)
        test = dataset if dataset is not None else load_splits(settings)[1]
        test = test.take(np.arange(min(images, len(test))))
        graph_predictions = np.argmax(predict_logits(graph, test), axis=1)
        bundle_predictions = np.argmax(predict_bundle(load_bundle(bundle_path), test), axis=1)
        report = evolve(
            report,
            images=len(test),
            agreement=float(np.mean(graph_predictions == bundle_predictions)) if len(test) else 1.0,
            graph_accuracy=float(np.mean(graph_predictions == test.labels)) if len(test) else 0.0,
            bundle_accuracy=float(np.mean(bundle_predictions == test.labels)) if len(test) else 0.0,
        )
    if report.parity:
        log.info("Exported %s: %d bytes, %.3fx the cost model prediction", bundle_path, size, report.size_ratio)
    else:
        log.error("Bundle %s disagrees with the training graph on %.2f%% of images", bundle_path, 100.0 * (1.0 - report.agreement))
    return report


@frozen
class LayerQuantizers:
    """
    Quantizer state of one binary convolution.

    Attributes:
        name(str): Layer name
        alpha_a(float): Activation distance
        beta_a(float): Activation center
        low(float): Lower activation value, beta_a - alpha_a
        high(float): Upper activation value, beta_a + alpha_a
        all_positive(bool): Whether both activation values are positive
        weight_alpha(Dict[str, float]): min, mean and max of the per-filter weight distances
        weight_beta(Dict[str, float]): min, mean and max of the per-filter weight centers
    """

    name: str
    alpha_a: float
    beta_a: float
    low: float
    high: float
    all_positive: bool
    weight_alpha: Dict[str, float]
    weight_beta: Dict[str, float]


@frozen
class GammaRange:
    """Range of the Maxout slopes of one layer."""

    name: str
    plus: Tuple[float, float]
    minus: Tuple[float, float]


@frozen
class InspectReport:
    """Quantizer and Maxout state of a model, one entry per layer in forward order."""

    layers: List[LayerQuantizers]
    gammas: List[GammaRange]

    @property
    def all_positive(self) -> List[str]:
        return [layer.name for layer in self.layers if layer.all_positive]

    def to_json(self) -> str:
        return _to_json(self)

    def to_text(self) -> str:
        columns = ("layer", "alpha_a", "beta_a", "low", "high", "alpha_w min/mean/max", "beta_w min/mean/max", "flag")
        header = "%-32s %9s %9s %9s %9s  %-25s %-25s %s" % columns
        lines = [header, "-" * len(header)]
        for layer in self.layers:
            lines.append(
                "%-32s %9.4f %9.4f %9.4f %9.4f  %-25s %-25s %s"
                % (
                    layer.name,
                    layer.alpha_a,
                    layer.beta_a,
                    layer.low,
                    layer.high,
                    _stats(layer.weight_alpha),
                    _stats(layer.weight_beta),
                    "all-positive" if layer.all_positive else "",
                )
            )
        if self.gammas:
            lines.append("")
            lines.append("%-32s %-21s %-21s" % ("maxout", "gamma+ min/max", "gamma- min/max"))
            for gamma in self.gammas:
                values = (gamma.name, gamma.plus[0], gamma.plus[1], gamma.minus[0], gamma.minus[1])
                lines.append("%-32s %9.4f/%-11.4f %9.4f/%-11.4f" % values)
        return "\n".join(lines)


def _stats(values: Dict[str, float]) -> str:
    return "%.3f/%.3f/%.3f" % (values["min"], values["mean"], values["max"])


def _summary(values: np.ndarray) -> Dict[str, float]:
    return {"min": float(values.min()), "mean": float(values.mean()), "max": float(values.max())}


def _layer_quantizers(conv: BinaryConv2d) -> LayerQuantizers:
    spec = conv.activation_spec()
    weights = conv.binarized_weight().spec
    return LayerQuantizers(
        name=conv.name,
        alpha_a=float(spec.alpha),
        beta_a=float(spec.beta),
        low=float(spec.low),
        high=float(spec.high),
        all_positive=spec.all_positive,
        weight_alpha=_summary(np.asarray(weights.alpha)),
        weight_beta=_summary(np.asarray(weights.beta)),
    )


def inspect_graph(graph: Graph) -> InspectReport:
    """Report the quantizers of every binary convolution and the slopes of every Maxout."""
    layers = [_layer_quantizers(conv) for conv in binary_convs(graph)]
    gammas = [
        GammaRange(
            node.name,
            (float(node.gamma_plus.value.min()), float(node.gamma_plus.value.max())),
            (float(node.gamma_minus.value.min()), float(node.gamma_minus.value.max())),
        )
        for node in graph.walk()
        if isinstance(node, Maxout)
    ]
    report = InspectReport(layers, gammas)
    for name in report.all_positive:
        log.info("Layer %s has an entirely positive activation set", name)
    return report


def inspect(config: RunConfig, checkpoint_path: Optional[str] = None) -> InspectReport:
    """Inspect a checkpoint, or a freshly initialized model when no checkpoint is given."""
    if checkpoint_path:
        graph = load_checkpoint(checkpoint_path).model()
    else:
        graph = build_model(config.model_config(), _spawn(config.seed)[0])
    return inspect_graph(graph)
