# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

import numpy as np
import pytest

from adabin.autograd import Graph
from adabin.costmodel import (
    BOPS_PER_OP,
    CANONICAL_SHAPE,
    CostReport,
    canonical_cost,
    conv_cost,
    conv_mode,
    format_report,
    model_cost,
)
from adabin.interface import ActivationMode, AdaBinError, ConvMode, FailureReason, WeightMode
from adabin.layers import BatchNorm2d, BinaryConv2d, Conv2d, Flatten, GlobalAvgPool, Linear
from adabin.model import ModelConfig, binary_convs, build_model


class TestConvCost:
    """
    Unit tests for conv_cost.
    """

    def test_single_mac(self):
        cost = conv_cost(1, 1, 1, 1, 1, ConvMode.FLOAT)
        assert cost.float_ops == 2
        assert cost.binary_ops == 0
        assert cost.ops == 2

    def test_canonical_overheads(self):
        cost = conv_cost(*CANONICAL_SHAPE, ConvMode.ADABIN)
        report = CostReport([cost])
        assert 100.0 * report.extra_ops_ratio == pytest.approx(2.74, abs=0.2)
        assert 100.0 * report.extra_params_ratio == pytest.approx(1.37, abs=0.1)
        assert report.speedup == pytest.approx(60.85, abs=1.5)
        assert report.memory_saving == pytest.approx(31.0, abs=1.0)

    def test_sign_binary_ratio(self):
        sign = conv_cost(*CANONICAL_SHAPE, ConvMode.SIGN_BINARY)
        float_ = conv_cost(*CANONICAL_SHAPE, ConvMode.FLOAT)
        assert sign.binary_ops / BOPS_PER_OP / float_.float_ops == pytest.approx(1.0 / 64)
        assert sign.ops / float_.ops == pytest.approx(1.0 / 64, rel=0.02)

    def test_monotonic(self):
        for shape in [(16, 16, 3, 32, 32), (64, 32, 3, 8, 8), (10, 128, 1, 1, 1)]:
            adabin = conv_cost(*shape, ConvMode.ADABIN)
            sign = conv_cost(*shape, ConvMode.SIGN_BINARY)
            float_ = conv_cost(*shape, ConvMode.FLOAT)
            assert adabin.ops >= sign.ops
            assert adabin.total_param_bits >= sign.total_param_bits
            assert adabin.ops < float_.ops
            assert sign.ops < float_.ops

    def test_exact_terms(self):
        cost = conv_cost(2, 3, 3, 4, 5, ConvMode.ADABIN)
        assert cost.binary_ops == 2 * 2 * 3 * 9 * 20
        assert cost.float_ops == 2 * 20
        assert cost.extra_float_ops == 2 * 2 * 20
        assert cost.params_bits == 2 * 3 * 9 + 32 * 2
        assert cost.extra_param_bits == 32 * 2 + 64
        assert cost.reference_param_bits == 32 * 2 * 3 * 9

    def test_nonpositive(self):
        with pytest.raises(AdaBinError, match=r"must be positive") as e:
            conv_cost(0, 1, 1, 1, 1, ConvMode.FLOAT)
        assert e.value.reason == FailureReason.INVALID_ARGUMENT

    def test_conv_mode(self):
        rng = np.random.default_rng(0)
        assert conv_mode(Conv2d("c", 1, 1, 1, 1, 0, rng)) == ConvMode.FLOAT
        assert conv_mode(BinaryConv2d("c", 1, 1, 1, 1, 0, rng)) == ConvMode.ADABIN
        sign = BinaryConv2d("c", 1, 1, 1, 1, 0, rng, weight_mode=WeightMode.SCALED_SIGN, activation_mode=ActivationMode.SIGN)
        assert conv_mode(sign) == ConvMode.SIGN_BINARY
        mixed = BinaryConv2d("c", 1, 1, 1, 1, 0, rng, weight_mode=WeightMode.SCALED_SIGN, activation_mode=ActivationMode.ADABIN)
        assert conv_mode(mixed) == ConvMode.ADABIN


class TestModelCost:
    """
    Unit tests for model_cost and the canonical self-test row.
    """

    def test_all_float(self):
        rng = np.random.default_rng(1)
        head = [GlobalAvgPool("pool"), Flatten("flat"), Linear("fc", 8, 10, rng)]
        graph = Graph([Conv2d("conv", 3, 8, 3, 1, 1, rng), BatchNorm2d("bn", 8)] + head, 10)
        report = model_cost(graph, (3, 8, 8))
        assert report.speedup == pytest.approx(1.0)
        assert report.memory_saving == pytest.approx(1.0)
        assert report.binary_ops == 0

    def test_resnet20_additive(self):
        graph = build_model(ModelConfig(), np.random.default_rng(0))
        report = model_cost(graph)
        assert report.float_ops == sum(layer.float_ops for layer in report.layers)
        assert report.binary_ops == sum(layer.binary_ops for layer in report.layers)
        assert report.ops == pytest.approx(sum(layer.ops for layer in report.layers))
        convs = {layer.name: layer for layer in report.layers if layer.kind == ConvMode.ADABIN.value}
        assert len(convs) == len(binary_convs(graph)) == 18
        first = convs["stage1.block0.unit0.conv"]
        assert first == conv_cost(16, 16, 3, 32, 32, ConvMode.ADABIN, "stage1.block0.unit0.conv")
        down = convs["stage2.block0.unit0.conv"]
        assert down == conv_cost(32, 16, 3, 16, 16, ConvMode.ADABIN, "stage2.block0.unit0.conv")
        assert report.speedup > 1.0
        assert report.memory_saving > 1.0

    def test_input_shape_from_metadata(self):
        graph = build_model(ModelConfig(architecture="smallcnn-adabin", in_channels=1, image_size=28), np.random.default_rng(0))
        assert model_cost(graph).binary_ops == model_cost(graph, (1, 28, 28)).binary_ops

    def test_canonical(self):
        report, values = canonical_cost()
        assert len(report.layers) == 1
        assert values["extra_ops_pct"] == pytest.approx(2.7397, abs=1e-3)
        assert values["extra_params_pct"] == pytest.approx(1.3806, abs=1e-3)
        assert values["speedup"] == pytest.approx(61.44, abs=0.01)
        assert values["memory_saving"] == pytest.approx(31.13, abs=0.01)
        assert values["speedup_residual"] == pytest.approx(values["speedup"] - 60.85)
        assert abs(values["memory_saving_residual"]) < 1.0

    def test_format_report(self):
        report = CostReport([conv_cost(2, 3, 3, 4, 5, ConvMode.ADABIN, "only")])
        text = format_report(report)
        lines = text.splitlines()
        assert lines[0].startswith("layer")
        assert lines[2].startswith("only")
        assert lines[-2].startswith("total")
        assert "speedup=" in lines[-1]

    def test_summary(self):
        summary = CostReport([conv_cost(*CANONICAL_SHAPE, ConvMode.ADABIN)]).summary()
        assert summary["bops"] == 2 * 256 * 256 * 9 * 196
        assert summary["extra_ops_pct"] == pytest.approx(2.7397, abs=1e-3)
