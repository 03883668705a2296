# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

import math

import numpy as np
import pytest

from adabin.bitkernel import unpack
from adabin.interface import AdaBinError, AlphaGradMode, FailureReason, Granularity, WeightMode
from adabin.quantize import (
    EPSILON_ALPHA,
    BinarySpec,
    activation_binarize_backward,
    activation_binarize_forward,
    adabin_quantize,
    equalize_weights,
    kld_numeric,
    scaled_sign_spec,
    weight_binarize_backward,
    weight_binarize_forward,
)

from .util import central_difference, hardtanh, ste_surrogate


def _array(*values):
    return np.array(values, dtype=np.float32)


def _away_from_kinks(u: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    return (np.abs(np.abs(u) - 1.0) > margin) & (np.abs(u) > margin)


class TestBinarySpec:
    """
    Unit tests for BinarySpec.
    """

    def test_per_layer(self):
        spec = BinarySpec.per_layer(0.4, 0.1)
        assert spec.granularity == Granularity.PER_LAYER
        assert float(spec.low) == pytest.approx(-0.3)
        assert float(spec.high) == pytest.approx(0.5)
        assert not spec.all_positive

    def test_per_filter(self):
        spec = BinarySpec.per_filter([1.0, 0.5], [0.0, 2.0])
        assert spec.granularity == Granularity.PER_FILTER
        assert spec.low.tolist() == [-1.0, 1.5]
        assert not spec.all_positive

    def test_all_positive(self):
        assert BinarySpec.per_layer(0.5, 2.0).all_positive
        assert not BinarySpec.per_layer(2.0, 2.0).all_positive

    def test_invalid(self):
        with pytest.raises(AdaBinError, match=r"must not be negative"):
            BinarySpec.per_layer(-1.0, 0.0)
        with pytest.raises(AdaBinError, match=r"must be finite"):
            BinarySpec.per_layer(float("inf"), 0.0)
        with pytest.raises(AdaBinError, match=r"Per-layer spec needs scalars"):
            BinarySpec.per_layer([1.0], [0.0])
        with pytest.raises(AdaBinError, match=r"Per-filter spec needs vectors"):
            BinarySpec.per_filter(1.0, 0.0)
        with pytest.raises(AdaBinError) as e:
            BinarySpec.per_filter([1.0, 1.0], [0.0])
        assert e.value.reason == FailureReason.SHAPE_MISMATCH

    def test_shaped_for_mismatch(self):
        with pytest.raises(AdaBinError, match=r"Spec for 2 filters"):
            BinarySpec.per_filter([1.0, 1.0], [0.0, 0.0]).shaped_for(np.zeros((3, 1, 1, 1), dtype=np.float32))


class TestAdabinQuantize:
    """
    Unit tests for adabin_quantize.
    """

    def test_shifted_set(self):
        pair = adabin_quantize(_array(-0.5, 0.7), BinarySpec.per_layer(0.4, 0.1))
        assert np.allclose(pair.dequantized, [-0.3, 0.5])
        assert pair.signs.tolist() == [-1.0, 1.0]

    def test_sign_equivalence(self):
        x = _array(-2.0, -0.1, 0.0, 0.1, 3.0)
        pair = adabin_quantize(x, BinarySpec.per_layer(1.0, 0.0))
        assert pair.dequantized.tolist() == [-1.0, -1.0, 1.0, 1.0, 1.0]

    def test_ties_go_up(self):
        pair = adabin_quantize(_array(0.1, 0.1), BinarySpec.per_layer(0.4, 0.1))
        assert np.allclose(pair.dequantized, [0.5, 0.5])

    def test_reconstruction_identity(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((6, 3, 3, 3)).astype(np.float32)
        pair = adabin_quantize(w, equalize_weights(w))
        alpha, beta = pair.spec.shaped_for(w)
        bits = unpack(pair.bits)
        assert np.array_equal(bits, pair.signs)
        assert np.array_equal((alpha * bits + beta).astype(np.float32), pair.dequantized)

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(100).astype(np.float32)
        spec = BinarySpec.per_layer(0.7, 0.2)
        once = adabin_quantize(x, spec)
        twice = adabin_quantize(once.dequantized, spec)
        assert np.array_equal(once.dequantized, twice.dequantized)


class TestEqualizeWeights:
    """
    Unit tests for equalize_weights and the scaled-sign set.
    """

    def test_symmetric_filter(self):
        spec = equalize_weights(_array(-3.0, -1.0, 1.0, 3.0).reshape(1, 1, 2, 2))
        assert spec.granularity == Granularity.PER_FILTER
        assert float(spec.beta[0]) == 0.0
        assert float(spec.alpha[0]) == pytest.approx(math.sqrt(5.0), rel=1e-6)

    def test_constant_filter(self):
        w = np.full((1, 1, 2, 2), 5.0, dtype=np.float32)
        spec = equalize_weights(w)
        assert float(spec.beta[0]) == 5.0
        assert float(spec.alpha[0]) == 0.0
        assert np.all(adabin_quantize(w, spec).dequantized == 5.0)

    def test_lossless_two_values(self):
        w = _array(1.5, 2.5, 2.5, 1.5, 1.5, 2.5).reshape(1, 1, 2, 3)
        spec = equalize_weights(w)
        assert float(spec.beta[0]) == pytest.approx(2.0)
        assert float(spec.alpha[0]) == pytest.approx(0.5)
        assert np.allclose(adabin_quantize(w, spec).dequantized, w)

    def test_shift_scale_equivariance(self):
        rng = np.random.default_rng(12)
        w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        base = equalize_weights(w)
        moved = equalize_weights(2.5 * w + 0.75)
        assert np.allclose(moved.alpha, 2.5 * base.alpha, rtol=1e-5)
        assert np.allclose(moved.beta, 2.5 * base.beta + 0.75, rtol=1e-5, atol=1e-6)

    def test_scaled_sign_spec(self):
        spec = scaled_sign_spec(_array(-3.0, -1.0, 1.0, 5.0).reshape(1, 1, 2, 2))
        assert float(spec.alpha[0]) == pytest.approx(2.5)
        assert float(spec.beta[0]) == 0.0


class TestActivationBinarizer:
    """
    Unit tests for the activation binarizer.
    """

    def test_forward_sign(self):
        pair, _ = activation_binarize_forward(_array(-2.0, -0.3, 0.0, 0.9), BinarySpec.per_layer(1.0, 0.0))
        assert pair.dequantized.tolist() == [-1.0, -1.0, 1.0, 1.0]

    def test_forward_shifted(self):
        pair, _ = activation_binarize_forward(_array(0.5, 3.0), BinarySpec.per_layer(2.0, 1.0))
        assert pair.dequantized.tolist() == [-1.0, 3.0]

    def test_forward_matches_hardtanh_composite(self):
        rng = np.random.default_rng(13)
        a = rng.normal(0.0, 2.0, 100000).astype(np.float32)
        alpha = rng.uniform(0.01, 3.0, 100000).astype(np.float32)
        beta = rng.normal(0.0, 1.0, 100000).astype(np.float32)
        composite = alpha * np.where(hardtanh((a - beta) / alpha) >= 0, 1.0, -1.0) + beta
        branch = np.where(a >= beta, beta + alpha, beta - alpha)
        assert np.allclose(composite, branch)
        for index in range(0, 100000, 9973):
            pair, _ = activation_binarize_forward(a[index : index + 1], BinarySpec.per_layer(alpha[index], beta[index]))
            assert pair.dequantized[0] == pytest.approx(branch[index], rel=1e-6, abs=1e-6)

    def test_forward_rejects(self):
        with pytest.raises(AdaBinError, match=r"below") as e:
            activation_binarize_forward(_array(1.0), BinarySpec.per_layer(EPSILON_ALPHA / 2, 0.0))
        assert e.value.reason == FailureReason.INVALID_VALUE
        with pytest.raises(AdaBinError, match=r"per-layer binary set"):
            activation_binarize_forward(_array(1.0), BinarySpec.per_filter([1.0], [0.0]))

    def test_backward_inside(self):
        _, ctx = activation_binarize_forward(_array(0.5), BinarySpec.per_layer(1.0, 0.0))
        grad, d_alpha, d_beta = activation_binarize_backward(_array(1.0), ctx)
        assert grad.tolist() == [1.0]
        assert d_alpha == pytest.approx(0.5)
        assert d_beta == 0.0

    def test_backward_outside(self):
        _, ctx = activation_binarize_forward(_array(5.0), BinarySpec.per_layer(1.0, 0.0))
        grad, d_alpha, d_beta = activation_binarize_backward(_array(1.0), ctx)
        assert grad.tolist() == [0.0]
        assert d_alpha == pytest.approx(1.0)
        assert d_beta == pytest.approx(1.0)

    def test_backward_modes_agree_when_centered(self):
        rng = np.random.default_rng(14)
        a = rng.normal(0.0, 1.5, 64).astype(np.float32)
        upstream = rng.standard_normal(64).astype(np.float32)
        _, ctx = activation_binarize_forward(a, BinarySpec.per_layer(0.8, 0.0))
        consistent = activation_binarize_backward(upstream, ctx, AlphaGradMode.CONSISTENT)
        paper = activation_binarize_backward(upstream, ctx, AlphaGradMode.PAPER)
        assert consistent[1] == pytest.approx(paper[1], rel=1e-5)

    def test_backward_paper_mode(self):
        _, ctx = activation_binarize_forward(_array(1.5), BinarySpec.per_layer(1.0, 1.0))
        _, consistent, _ = activation_binarize_backward(_array(1.0), ctx, AlphaGradMode.CONSISTENT)
        _, paper, _ = activation_binarize_backward(_array(1.0), ctx, AlphaGradMode.PAPER)
        assert consistent == pytest.approx(1.0 - 0.5)
        assert paper == pytest.approx(1.0 - 1.5)

    def test_backward_missing_context(self):
        with pytest.raises(AdaBinError) as e:
            activation_binarize_backward(_array(1.0), None)
        assert e.value.reason == FailureReason.MISSING_CONTEXT

    @pytest.mark.parametrize("alpha,beta", [(1.0, 0.0), (0.6, 0.3), (1.7, -0.4)])
    def test_backward_matches_finite_differences(self, alpha, beta):
        rng = np.random.default_rng(15)
        a = rng.normal(beta, 1.5 * alpha, 2000)
        a = a[_away_from_kinks((a - beta) / alpha)][:1000]
        assert a.shape[0] == 1000
        upstream = rng.standard_normal(a.shape[0])
        anchor = (a - beta) / alpha
        _, ctx = activation_binarize_forward(a.astype(np.float32), BinarySpec.per_layer(alpha, beta))
        grad, d_alpha, d_beta = activation_binarize_backward(upstream.astype(np.float32), ctx)

        params = np.array([alpha, beta], dtype=np.float64)

        def loss() -> float:
            return float(np.sum(upstream * ste_surrogate(a, params[0], params[1], anchor)))

        assert central_difference(loss, params, (0,), 1e-5) == pytest.approx(d_alpha, rel=1e-4, abs=1e-4)
        assert central_difference(loss, params, (1,), 1e-5) == pytest.approx(d_beta, rel=1e-4, abs=1e-4)
        for index in range(a.shape[0]):
            assert central_difference(loss, a, (index,), 1e-5) == pytest.approx(float(grad[index]), rel=1e-4, abs=1e-4)


class TestWeightBinarizer:
    """
    Unit tests for the weight binarizer.
    """

    def test_forward_modes(self):
        rng = np.random.default_rng(16)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        pair, _ = weight_binarize_forward(w, WeightMode.ADABIN)
        assert np.allclose(pair.spec.beta, w.reshape(3, -1).mean(axis=1), atol=1e-6)
        pair, _ = weight_binarize_forward(w, WeightMode.SCALED_SIGN)
        assert np.all(pair.spec.beta == 0.0)
        assert np.allclose(np.abs(pair.dequantized).reshape(3, -1).max(axis=1), np.abs(w).reshape(3, -1).mean(axis=1))
        spec = BinarySpec.per_filter([0.5, 1.0, 2.0], [0.0, 0.1, -0.1])
        pair, _ = weight_binarize_forward(w, WeightMode.ADABIN_LEARNABLE, spec)
        assert pair.spec is spec

    def test_forward_learnable_needs_spec(self):
        with pytest.raises(AdaBinError, match=r"Learnable weight sets need a spec"):
            weight_binarize_forward(np.zeros((1, 1, 1, 1), dtype=np.float32), WeightMode.ADABIN_LEARNABLE)

    def test_backward_missing_context(self):
        with pytest.raises(AdaBinError) as e:
            weight_binarize_backward(np.zeros((1, 1, 1, 1), dtype=np.float32), None)
        assert e.value.reason == FailureReason.MISSING_CONTEXT

    def test_backward_derived_set_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        base = np.linspace(-1.9, 1.9, 18)
        w = np.stack([rng.permutation(base) * 0.3 + 0.1, rng.permutation(base) * 0.5 - 0.2]).reshape(2, 2, 3, 3)
        upstream = rng.standard_normal(w.shape)
        mean = w.reshape(2, -1).mean(axis=1).reshape(-1, 1, 1, 1)
        std = w.reshape(2, -1).std(axis=1).reshape(-1, 1, 1, 1)
        anchor = (w - mean) / std
        assert np.all(_away_from_kinks(anchor, 1e-2))
        _, ctx = weight_binarize_forward(w.astype(np.float32), WeightMode.ADABIN)
        grad, d_alpha, d_beta = weight_binarize_backward(upstream.astype(np.float32), ctx)
        assert not np.any(d_alpha) and not np.any(d_beta)

        def loss() -> float:
            beta = w.reshape(2, -1).mean(axis=1).reshape(-1, 1, 1, 1)
            alpha = w.reshape(2, -1).std(axis=1).reshape(-1, 1, 1, 1)
            u = (w - beta) / alpha
            surrogate = alpha * (hardtanh(u) + np.where(anchor >= 0, 1.0, -1.0) - hardtanh(anchor)) + beta
            return float(np.sum(upstream * surrogate))

        for index in [(0, 0, 0, 0), (0, 1, 2, 1), (1, 0, 1, 1), (1, 1, 2, 2)]:
            assert central_difference(loss, w, index, 1e-5) == pytest.approx(float(grad[index]), rel=1e-3, abs=1e-4)

    def test_backward_scaled_sign(self):
        w = _array(-2.0, -0.5, 0.5, 3.0).reshape(1, 1, 2, 2)
        upstream = _array(1.0, 1.0, 1.0, 1.0).reshape(1, 1, 2, 2)
        _, ctx = weight_binarize_forward(w, WeightMode.SCALED_SIGN)
        grad, _, _ = weight_binarize_backward(upstream, ctx)
        # alpha is 1.5 and the signed upstream sum cancels, so only the clipped window contributes
        assert np.allclose(grad.reshape(-1), [0.0, 1.5, 1.5, 0.0])

    def test_backward_learnable(self):
        rng = np.random.default_rng(18)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        upstream = rng.standard_normal(w.shape).astype(np.float32)
        spec = BinarySpec.per_filter([0.5, 1.0, 2.0], [0.0, 0.1, -0.1])
        _, ctx = weight_binarize_forward(w, WeightMode.ADABIN_LEARNABLE, spec)
        grad, d_alpha, d_beta = weight_binarize_backward(upstream, ctx)
        u = (w - spec.beta.reshape(-1, 1, 1, 1)) / spec.alpha.reshape(-1, 1, 1, 1)
        inside = np.abs(u) <= 1.0
        assert d_alpha.shape == (3,)
        assert d_beta.shape == (3,)
        assert np.allclose(grad, upstream * inside)
        expected_beta = (upstream * ~inside).reshape(3, -1).sum(axis=1)
        assert np.allclose(d_beta, expected_beta, rtol=1e-5, atol=1e-5)

    def test_backward_constant_filter_passes_through(self):
        w = np.full((1, 1, 2, 2), 5.0, dtype=np.float32)
        upstream = _array(1.0, -2.0, 3.0, -4.0).reshape(1, 1, 2, 2)
        _, ctx = weight_binarize_forward(w, WeightMode.ADABIN)
        grad, _, _ = weight_binarize_backward(upstream, ctx)
        assert np.array_equal(grad, upstream)


class TestKldNumeric:
    """
    Unit tests for kld_numeric.
    """

    def test_identical_distributions(self):
        samples = np.concatenate([np.full(500, -0.5), np.full(500, 1.5)])
        assert kld_numeric(samples, BinarySpec.per_layer(1.0, 0.5)) == pytest.approx(0.0, abs=1e-6)

    def test_closer_set_scores_lower(self):
        samples = np.random.default_rng(19).standard_normal(100000)
        assert kld_numeric(samples, BinarySpec.per_layer(1.0, 0.0)) < kld_numeric(samples, BinarySpec.per_layer(3.0, 0.0))

    def test_grid_minimum_near_standard_deviation(self):
        samples = np.random.default_rng(20).standard_normal(100000)
        grid = np.arange(0.1, 3.0001, 0.05)
        scores = [kld_numeric(samples, BinarySpec.per_layer(alpha, 0.0)) for alpha in grid]
        assert abs(grid[int(np.argmin(scores))] - 1.0) <= 0.15

    def test_errors(self):
        with pytest.raises(AdaBinError, match=r"at least one sample"):
            kld_numeric(np.zeros(0), BinarySpec.per_layer(1.0, 0.0))
        with pytest.raises(AdaBinError, match=r"at least 8 bins"):
            kld_numeric(np.zeros(5), BinarySpec.per_layer(1.0, 0.0), bins=4)
        with pytest.raises(AdaBinError, match=r"single binary set"):
            kld_numeric(np.zeros(5), BinarySpec.per_filter([1.0, 1.0], [0.0, 0.0]))
