"""Adaptive-mask fusion: mask algebra, attention blocks, and gradients."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from amfnet.amf import (
    AdaptiveMaskFusion,
    AdaptiveMaskGenerator,
    AdaptiveWeights,
    ChannelAttention,
    SpatialAttention,
    make_adaptive_masks,
    masked_fuse,
    weights_from_logits,
)
from amfnet.core import GridError

from oracles import fuse_oracle, gradcheck_module, softmax_pair_oracle


def rand_mask(rng, shape):
    return torch.from_numpy(rng.integers(0, 2, size=shape).astype(np.float32))


class TestWeightsFromLogits:
    def test_symmetric_logits(self):
        w = weights_from_logits(torch.zeros(1, 2))
        assert w.w_rgb.item() == pytest.approx(0.5, abs=1e-6)
        assert w.w_depth.item() == pytest.approx(0.5, abs=1e-6)

    def test_closed_form(self):
        # e^2 / (e^2 + 1) = 0.880797..., frozen from the scalar oracle
        expected = softmax_pair_oracle(2.0, 0.0)
        assert expected[0] == pytest.approx(0.8808, abs=1e-4)
        w = weights_from_logits(torch.tensor([[2.0, 0.0]]))
        assert w.w_rgb.item() == pytest.approx(expected[0], abs=1e-6)
        assert w.w_depth.item() == pytest.approx(expected[1], abs=1e-6)

    def test_rejects_bad_shape(self):
        with pytest.raises(GridError):
            weights_from_logits(torch.zeros(1, 3))


class TestAdaptiveMaskGenerator:
    def test_weights_sum_to_one(self):
        torch.manual_seed(0)
        amg = AdaptiveMaskGenerator(8).eval()
        w = amg(torch.randn(5, 8, 6, 6), torch.randn(5, 8, 6, 6))
        assert torch.allclose(w.w_rgb + w.w_depth, torch.ones(5), atol=1e-6)

    def test_batch_size_one_in_training_mode(self):
        torch.manual_seed(0)
        amg = AdaptiveMaskGenerator(4).train()
        w = amg(torch.randn(1, 4, 5, 5), torch.randn(1, 4, 5, 5))
        assert w.w_rgb.shape == (1,)
        assert float(w.w_rgb + w.w_depth) == pytest.approx(1.0, abs=1e-6)

    def test_rejects_shape_mismatch(self):
        amg = AdaptiveMaskGenerator(4)
        with pytest.raises(GridError):
            amg(torch.randn(1, 4, 5, 5), torch.randn(1, 4, 4, 5))


class TestMakeAdaptiveMasks:
    def test_all_zero_mask_passthrough(self):
        w = AdaptiveWeights(torch.tensor([0.3]), torch.tensor([0.7]))
        pair = make_adaptive_masks(w, torch.zeros(1, 1, 3, 3))
        assert torch.equal(pair.m_depth, torch.zeros(1, 1, 3, 3))
        assert torch.equal(pair.m_rgb, torch.ones(1, 1, 3, 3))

    def test_all_one_mask_broadcast(self):
        w = AdaptiveWeights(torch.tensor([0.7]), torch.tensor([0.3]))
        pair = make_adaptive_masks(w, torch.ones(1, 1, 2, 2))
        assert torch.allclose(pair.m_depth, torch.full((1, 1, 2, 2), 0.3))
        assert torch.allclose(pair.m_rgb, torch.full((1, 1, 2, 2), 0.7))

    def test_mixed_mask_elementwise(self):
        w = AdaptiveWeights(torch.tensor([0.75]), torch.tensor([0.25]))
        mask = torch.tensor([[[[0.0, 1.0]]]])
        pair = make_adaptive_masks(w, mask)
        assert pair.m_depth.flatten().tolist() == [0.0, 0.25]
        assert pair.m_rgb.flatten().tolist() == [1.0, 0.75]

    def test_rejects_weights_out_of_range(self):
        w = AdaptiveWeights(torch.tensor([-0.1]), torch.tensor([1.1]))
        with pytest.raises(GridError):
            make_adaptive_masks(w, torch.ones(1, 1, 2, 2))

    def test_rejects_non_binary_mask(self):
        w = AdaptiveWeights(torch.tensor([0.5]), torch.tensor([0.5]))
        with pytest.raises(GridError):
            make_adaptive_masks(w, torch.full((1, 1, 2, 2), 0.5))

    @settings(max_examples=50, deadline=None)
    @given(w_depth=st.floats(0, 1), seed=st.integers(0, 1000))
    def test_partition_of_unity(self, w_depth, seed):
        rng = np.random.default_rng(seed)
        mask = rand_mask(rng, (1, 1, 4, 6))
        w = AdaptiveWeights(torch.tensor([1 - w_depth]), torch.tensor([w_depth]))
        pair = make_adaptive_masks(w, mask)
        assert torch.allclose(pair.m_rgb + pair.m_depth, torch.ones_like(mask), atol=1e-6)


class TestMaskedFuse:
    def test_untrusted_is_rgb_bitwise(self):
        rng = np.random.default_rng(0)
        rgb = torch.randn(2, 4, 5, 5)
        depth = torch.randn(2, 4, 5, 5)
        w = AdaptiveWeights(torch.tensor([0.4, 0.1]), torch.tensor([0.6, 0.9]))
        fused = masked_fuse(rgb, depth, make_adaptive_masks(w, torch.zeros(2, 1, 5, 5)))
        assert torch.equal(fused, rgb)

    def test_full_trust_full_weight_is_depth(self):
        rgb = torch.randn(1, 3, 4, 4)
        depth = torch.randn(1, 3, 4, 4)
        w = AdaptiveWeights(torch.tensor([0.0]), torch.tensor([1.0]))
        fused = masked_fuse(rgb, depth, make_adaptive_masks(w, torch.ones(1, 1, 4, 4)))
        assert torch.equal(fused, depth)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(42)
        rgb = rng.standard_normal((4, 3, 3))
        depth = rng.standard_normal((4, 3, 3))
        mask = rng.integers(0, 2, size=(3, 3)).astype(np.float64)
        w_depth = 0.37
        expected = fuse_oracle(rgb, depth, w_depth, mask)
        w = AdaptiveWeights(
            torch.tensor([1 - w_depth], dtype=torch.float64),
            torch.tensor([w_depth], dtype=torch.float64),
        )
        pair = make_adaptive_masks(w, torch.from_numpy(mask)[None, None])
        fused = masked_fuse(torch.from_numpy(rgb)[None], torch.from_numpy(depth)[None], pair)
        np.testing.assert_allclose(fused[0].numpy(), expected, rtol=1e-12)

    def test_convexity(self):
        rng = np.random.default_rng(9)
        rgb = torch.from_numpy(rng.standard_normal((1, 4, 6, 6)))
        depth = torch.from_numpy(rng.standard_normal((1, 4, 6, 6)))
        w = AdaptiveWeights(torch.tensor([0.35]), torch.tensor([0.65]))
        pair = make_adaptive_masks(w, rand_mask(rng, (1, 1, 6, 6)).double())
        fused = masked_fuse(rgb, depth, pair)
        lo = torch.minimum(rgb, depth) - 1e-12
        hi = torch.maximum(rgb, depth) + 1e-12
        assert bool(((fused >= lo) & (fused <= hi)).all())

    def test_rejects_shape_mismatch(self):
        w = AdaptiveWeights(torch.tensor([0.5]), torch.tensor([0.5]))
        pair = make_adaptive_masks(w, torch.ones(1, 1, 4, 4))
        with pytest.raises(GridError):
            masked_fuse(torch.randn(1, 3, 4, 4), torch.randn(1, 3, 5, 4), pair)


class TestChannelAttention:
    def test_zero_in_zero_out(self):
        torch.manual_seed(0)
        ca = ChannelAttention(8, reduction=4).eval()
        assert torch.equal(ca(torch.zeros(1, 8, 3, 3)), torch.zeros(1, 8, 3, 3))

    def test_contracts_magnitude(self):
        torch.manual_seed(1)
        ca = ChannelAttention(16, reduction=4).eval()
        x = torch.randn(2, 16, 5, 5)
        out = ca(x)
        assert bool((out.abs() <= x.abs() + 1e-7).all())

    def test_rejects_too_few_channels(self):
        with pytest.raises(GridError):
            ChannelAttention(8, reduction=16)

    def test_gradcheck(self):
        torch.manual_seed(2)
        ca = ChannelAttention(4, reduction=2)
        gradcheck_module(ca, (torch.randn(2, 4, 3, 3),), step=1e-3, rtol=1e-3)


class TestSpatialAttention:
    def test_zero_in_zero_out(self):
        torch.manual_seed(0)
        sa = SpatialAttention(4, kernel=3).eval()
        assert torch.equal(sa(torch.zeros(1, 4, 5, 5)), torch.zeros(1, 4, 5, 5))

    def test_contracts_magnitude(self):
        torch.manual_seed(1)
        sa = SpatialAttention(8, kernel=7).eval()
        x = torch.randn(2, 8, 9, 9)
        out = sa(x)
        assert bool((out.abs() <= x.abs() + 1e-7).all())

    def test_rejects_even_kernel(self):
        with pytest.raises(GridError):
            SpatialAttention(4, kernel=4)

    def test_gradcheck(self):
        torch.manual_seed(3)
        sa = SpatialAttention(3, kernel=3)
        gradcheck_module(sa, (torch.randn(2, 3, 4, 4),), step=1e-3, rtol=1e-3)


class TestAdaptiveMaskFusion:
    def test_zero_mask_pre_attention_is_rgb(self):
        torch.manual_seed(0)
        amf = AdaptiveMaskFusion(8).eval()
        rgb = torch.randn(2, 8, 6, 6)
        depth = torch.randn(2, 8, 6, 6)
        record = {}
        amf(rgb, depth, torch.zeros(2, 1, 6, 6), record=record)
        assert torch.equal(record["fused"], rgb)

    def test_output_shape(self):
        torch.manual_seed(0)
        amf = AdaptiveMaskFusion(8).eval()
        rng = np.random.default_rng(0)
        out = amf(torch.randn(3, 8, 5, 7), torch.randn(3, 8, 5, 7), rand_mask(rng, (3, 1, 5, 7)))
        assert out.shape == (3, 8, 5, 7)

    def test_composite_equals_manual_composition(self):
        torch.manual_seed(4)
        amf = AdaptiveMaskFusion(8).eval()
        rng = np.random.default_rng(1)
        rgb = torch.randn(2, 8, 6, 6)
        depth = torch.randn(2, 8, 6, 6)
        mask = rand_mask(rng, (2, 1, 6, 6))
        weights = amf.amg(rgb, depth)
        pair = make_adaptive_masks(weights, mask)
        manual = amf.spatial_attn(amf.channel_attn(masked_fuse(rgb, depth, pair)))
        assert torch.equal(amf(rgb, depth, mask), manual)

    def test_batch_independence(self):
        torch.manual_seed(5)
        amf = AdaptiveMaskFusion(4).eval()
        rng = np.random.default_rng(2)
        rgb = torch.randn(3, 4, 5, 5)
        depth = torch.randn(3, 4, 5, 5)
        mask = rand_mask(rng, (3, 1, 5, 5))
        batched = amf(rgb, depth, mask)
        for b in range(3):
            single = amf(rgb[b : b + 1], depth[b : b + 1], mask[b : b + 1])
            assert torch.allclose(batched[b], single[0], atol=1e-6)

    def test_gradcheck_full_module(self):
        torch.manual_seed(6)
        amf = AdaptiveMaskFusion(4)
        rng = np.random.default_rng(3)
        inputs = (torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 4), rand_mask(rng, (2, 1, 4, 4)))
        gradcheck_module(amf, inputs, step=1e-3, rtol=1e-3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_amg_weights_always_partition(seed):
    torch.manual_seed(seed)
    amg = AdaptiveMaskGenerator(6).eval()
    rgb = torch.randn(4, 6, 3, 3)
    depth = torch.randn(4, 6, 3, 3)
    w = amg(rgb, depth)
    assert torch.allclose(w.w_rgb + w.w_depth, torch.ones(4), atol=1e-6)
    assert bool(((w.w_rgb >= 0) & (w.w_rgb <= 1)).all())
