# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

import json
import math
import os

import numpy as np
import pytest
from attrs import evolve

from adabin.bundle import load_bundle
from adabin.checkpoint import Checkpoint, load_checkpoint
from adabin.config import RunConfig
from adabin.data import MNIST_MEAN, MNIST_STD, Dataset
from adabin.experiment import (
    BEST_CHECKPOINT,
    CONFIG_FILE,
    LAST_CHECKPOINT,
    METRICS_FILE,
    accuracy_report,
    bench,
    evaluate,
    export,
    inspect,
    load_splits,
    predict_logits,
    train,
)
from adabin.interface import AdaBinError, DatasetKind, FailureReason
from adabin.model import binary_convs, build_model
from adabin.util import read_jsonl

from .util import write_mnist


@pytest.fixture
def settings(tmp_path):
    data_dir = str(tmp_path / "mnist")
    os.makedirs(data_dir)
    write_mnist(data_dir, train=64, test=32)
    return RunConfig(
        architecture="smallcnn-adabin",
        dataset=DatasetKind.MNIST,
        data_dir=data_dir,
        width=0.25,
        epochs=2,
        batch_size=16,
        lr0=0.05,
        out_dir=str(tmp_path / "runs"),
        seed=1,
    )


class TestAccuracyReport:
    """
    Unit tests for accuracy_report.
    """

    def test_hand_computed(self):
        logits = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        report = accuracy_report(logits, np.array([0, 1, 1, 0]), 3, "x")
        assert report.examples == 4
        assert report.top1 == 0.75
        assert report.per_class == [1.0, 0.5, 0.0]
        assert report.class_counts == [2, 2, 0]
        assert json.loads(report.to_json())["source"] == "x"

    def test_empty(self):
        report = accuracy_report(np.zeros((0, 10)), np.zeros(0, dtype=np.int64), 10)
        assert report.examples == 0
        assert report.top1 == 0.0


class TestLoadSplits:
    """
    Unit tests for load_splits.
    """

    def test_subsets(self, settings):
        train_set, test_set = load_splits(evolve(settings, subset=20, test_subset=10))
        assert len(train_set) == 20
        assert len(test_set) == 10

    def test_full(self, settings):
        train_set, test_set = load_splits(settings)
        assert len(train_set) == 64
        assert len(test_set) == 32


class TestTrain:
    """
    Unit tests for train.
    """

    def test_outputs(self, settings):
        result = train(settings)
        assert result.epochs == 2
        assert os.path.exists(result.last_checkpoint)
        assert os.path.exists(result.best_checkpoint)
        assert os.path.basename(result.last_checkpoint) == LAST_CHECKPOINT
        assert os.path.basename(result.best_checkpoint) == BEST_CHECKPOINT
        with open(os.path.join(result.run_dir, CONFIG_FILE), "r", encoding="utf-8") as handle:
            assert RunConfig.from_json(handle.read()) == settings
        records = read_jsonl(os.path.join(result.run_dir, METRICS_FILE))
        assert [record["epoch"] for record in records] == [1, 2]
        assert records[0]["lr"] == pytest.approx(0.05)
        assert records[1]["lr"] == pytest.approx(0.025)
        for record in records:
            assert math.isfinite(record["train_loss"])
            assert 0.0 <= record["test_accuracy"] <= 1.0
            names = [conv.name for conv in binary_convs(load_checkpoint(result.last_checkpoint).model())]
            assert sorted(record["quantizers"]) == sorted(names)
        assert result.final_accuracy == records[-1]["test_accuracy"]
        assert result.best_accuracy == max(record["test_accuracy"] for record in records)
        assert load_checkpoint(result.last_checkpoint).epoch == 2

    def test_deterministic(self, settings, tmp_path):
        left = train(evolve(settings, out_dir=str(tmp_path / "left")))
        right = train(evolve(settings, out_dir=str(tmp_path / "right"), prefetch=False))
        assert read_jsonl(left.metrics_path) == read_jsonl(right.metrics_path)
        left_values, right_values = load_checkpoint(left.last_checkpoint).values, load_checkpoint(right.last_checkpoint).values
        for a, b in zip(left_values.items(), right_values.items()):
            assert a[0] == b[0]
            assert np.array_equal(a[1], b[1])

    def test_seed_changes_run(self, settings, tmp_path):
        left = train(evolve(settings, epochs=1, out_dir=str(tmp_path / "left")))
        right = train(evolve(settings, epochs=1, seed=2, out_dir=str(tmp_path / "right")))
        assert read_jsonl(left.metrics_path) != read_jsonl(right.metrics_path)

    def test_resume(self, settings):
        first = train(evolve(settings, epochs=1))
        resumed = train(settings, resume=first.last_checkpoint)
        assert resumed.run_dir == os.path.dirname(os.path.abspath(first.last_checkpoint))
        assert resumed.epochs == 2
        assert [record["epoch"] for record in read_jsonl(resumed.metrics_path)] == [1, 2]
        assert load_checkpoint(resumed.last_checkpoint).epoch == 2

    def test_resume_contradiction(self, settings):
        first = train(evolve(settings, epochs=1))
        with pytest.raises(AdaBinError) as e:
            train(evolve(settings, seed=9), resume=first.last_checkpoint)
        assert e.value.reason == FailureReason.CONFIG_CONTRADICTION

    def test_class_mismatch(self, settings):
        images = np.zeros((4, 1, 28, 28), dtype=np.float32)
        labels = np.array([0, 1, 2, 3])
        dataset = Dataset(images, labels, "train", DatasetKind.MNIST, MNIST_MEAN, MNIST_STD, 5)
        with pytest.raises(AdaBinError, match=r"Dataset has 5 classes, model has 10") as e:
            train(settings, datasets=(dataset, dataset))
        assert e.value.reason == FailureReason.CLASS_MISMATCH


class TestEvaluateExport:
    """
    Unit tests for evaluate and export.
    """

    def test_evaluate_checkpoint(self, settings, tmp_path):
        result = train(settings)
        logits = str(tmp_path / "logits.npy")
        report = evaluate(result.last_checkpoint, settings, dump_logits=logits)
        assert report.examples == 32
        assert report.top1 == pytest.approx(result.final_accuracy)
        assert sum(report.class_counts) == 32
        assert np.load(logits).shape == (32, 10)

    def test_evaluate_uses_checkpoint_config(self, settings):
        result = train(evolve(settings, epochs=1, test_subset=10))
        report = evaluate(result.last_checkpoint, evolve(settings, test_subset=0))
        assert report.examples == 10

    def test_export(self, settings, tmp_path):
        result = train(settings)
        path = str(tmp_path / "model.adbn")
        report = export(result.last_checkpoint, path, settings)
        assert report.size_bytes == os.path.getsize(path)
        assert report.predicted_bytes > 0
        assert report.images == 32
        assert report.parity
        assert report.graph_accuracy == pytest.approx(result.final_accuracy)
        assert report.bundle_accuracy == pytest.approx(report.graph_accuracy)
        assert load_bundle(path).classes == 10
        assert evaluate(path, settings).top1 == pytest.approx(report.bundle_accuracy)

    def test_export_without_parity(self, settings, tmp_path):
        result = train(evolve(settings, epochs=1))
        report = export(result.last_checkpoint, str(tmp_path / "model.adbn"), settings, images=0)
        assert report.images == 0
        assert report.parity


class TestBenchInspect:
    """
    Unit tests for bench and inspect.
    """

    def test_bench_config(self):
        report, text = bench(RunConfig())
        assert report.architecture == "resnet20-adabin"
        assert len([layer for layer in report.layers if layer["kind"] == "adabin"]) == 18
        assert report.summary["speedup"] > 1.0
        assert report.canonical["speedup"] == pytest.approx(61.44, abs=0.01)
        assert "canonical n=c=256 k=3 14x14" in text
        assert json.loads(report.to_json())["architecture"] == "resnet20-adabin"

    def test_bench_checkpoint(self, settings):
        result = train(evolve(settings, epochs=1))
        report, _ = bench(RunConfig(), result.last_checkpoint)
        assert report.architecture == "smallcnn-adabin"
        assert len([layer for layer in report.layers if layer["kind"] == "adabin"]) == 4

    def test_inspect_fresh(self, settings):
        report = inspect(settings)
        assert len(report.layers) == 4
        for layer in report.layers:
            assert layer.alpha_a == 1.0
            assert layer.beta_a == 0.0
            assert layer.low == -1.0
            assert layer.high == 1.0
            assert not layer.all_positive
        assert report.all_positive == []
        assert len(report.gammas) == 5
        assert report.gammas[0].plus == (1.0, 1.0)
        assert report.gammas[0].minus == (0.25, 0.25)

    def test_inspect_all_positive(self, settings, tmp_path):
        result = train(evolve(settings, epochs=1))
        checkpoint = load_checkpoint(result.last_checkpoint)
        graph = checkpoint.model()
        conv = binary_convs(graph)[1]
        conv.act_alpha.value = np.float32(0.5)
        conv.act_beta.value = np.float32(2.0)
        path = str(tmp_path / "edited.ckpt")
        Checkpoint.capture(graph, checkpoint.config, checkpoint.epoch, checkpoint.generator()).save(path)
        report = inspect(settings, path)
        assert report.all_positive == [conv.name]
        assert report.layers[1].low == 1.5
        assert report.layers[1].high == 2.5
        assert "all-positive" in report.to_text()
        assert json.loads(report.to_json())["layers"][1]["all_positive"] is True


@pytest.mark.slow
class TestSmoke:
    """
    Short end-to-end runs over several seeds.
    """

    def test_loss_decreases(self, tmp_path):
        data_dir = str(tmp_path / "mnist")
        os.makedirs(data_dir)
        write_mnist(data_dir, train=1024, test=64)
        decreased = 0
        for seed in range(5):
            settings = RunConfig(
                architecture="smallcnn-adabin",
                dataset=DatasetKind.MNIST,
                data_dir=data_dir,
                subset=512,
                epochs=1,
                batch_size=32,
                seed=seed,
                out_dir=str(tmp_path / ("runs%d" % seed)),
            )
            (record,) = train(settings).metrics
            decreased += record["last_step_loss"] < record["first_step_loss"]
        assert decreased >= 4

    def test_random_init_is_chance(self, tmp_path):
        data_dir = str(tmp_path / "mnist")
        os.makedirs(data_dir)
        write_mnist(data_dir, train=16, test=500)
        accuracies = []
        for seed in range(5):
            settings = RunConfig(architecture="smallcnn-adabin", dataset=DatasetKind.MNIST, data_dir=data_dir, seed=seed)
            graph = build_model(settings.model_config(), np.random.default_rng(seed))
            test_set = load_splits(settings)[1]
            accuracies.append(accuracy_report(predict_logits(graph, test_set), test_set.labels, 10).top1)
        assert 0.05 <= float(np.mean(accuracies)) <= 0.20
