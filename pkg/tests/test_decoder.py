"""Decoder stages: CBR blocks, the dual residual block, and upsampling."""

import pytest
import torch

from amfnet.core import GridError
from amfnet.decoder import ConvBnRelu, Decoder, DecoderStage, DualResidualBlock, TransposedConvBnRelu

from oracles import gradcheck_module


class TestConvBnRelu:
    def test_output_non_negative(self):
        torch.manual_seed(0)
        cbr = ConvBnRelu(4, 6).train()
        out = cbr(torch.randn(2, 4, 5, 5))
        assert bool((out >= 0).all())

    def test_same_padding_preserves_shape(self):
        torch.manual_seed(0)
        cbr = ConvBnRelu(4, 4, kernel=3, stride=1).eval()
        assert cbr(torch.randn(1, 4, 7, 9)).shape == (1, 4, 7, 9)

    def test_rejects_even_kernel(self):
        with pytest.raises(GridError):
            ConvBnRelu(4, 4, kernel=2)

    def test_gradcheck(self):
        torch.manual_seed(1)
        cbr = ConvBnRelu(3, 4)
        gradcheck_module(cbr, (torch.randn(2, 3, 4, 4),), step=1e-5, rtol=1e-3)


class TestDualResidualBlock:
    def test_shape_preserved(self):
        torch.manual_seed(0)
        block = DualResidualBlock(8).eval()
        assert block(torch.randn(2, 8, 6, 6)).shape == (2, 8, 6, 6)

    def test_matches_four_branch_formula(self):
        torch.manual_seed(1)
        block = DualResidualBlock(6).eval()
        x = torch.randn(2, 6, 5, 5)
        a = block.cbr1(x)
        b = a + block.cbr2(a)
        manual = block.cbr3(b) + block.cbr4(x)
        assert torch.equal(block(x), manual)

    def test_zero_input_zero_output_with_zero_shifts(self):
        # freshly initialized BN has zero shift and unit scale; conv has no bias
        torch.manual_seed(2)
        block = DualResidualBlock(4).eval()
        out = block(torch.zeros(1, 4, 4, 4))
        assert torch.equal(out, torch.zeros(1, 4, 4, 4))

    def test_gradcheck(self):
        torch.manual_seed(3)
        block = DualResidualBlock(3)
        gradcheck_module(block, (torch.randn(1, 3, 4, 4),), step=1e-5, rtol=1e-3)


class TestDecoderStage:
    def test_doubles_spatial_9x16(self):
        torch.manual_seed(0)
        stage = DecoderStage(8, 4).eval()
        assert stage(torch.randn(1, 8, 9, 16)).shape == (1, 4, 18, 32)

    def test_doubles_spatial_18x32(self):
        torch.manual_seed(0)
        stage = DecoderStage(8, 8).eval()
        assert stage(torch.randn(1, 8, 18, 32)).shape == (1, 8, 36, 64)

    def test_transposed_cbr_exact_doubling(self):
        torch.manual_seed(0)
        up = TransposedConvBnRelu(4, 4).eval()
        for h, w in [(3, 5), (9, 16), (10, 10)]:
            assert up(torch.randn(1, 4, h, w)).shape == (1, 4, 2 * h, 2 * w)


class TestDecoder:
    def test_five_stage_chain_restores_input_resolution(self):
        # shape propagation over five doublings: 9x16 -> 288x512
        torch.manual_seed(0)
        channels = (8, 8, 8, 8, 8)
        dec = Decoder(channels).eval()
        shapes = []
        x = torch.randn(1, 8, 9, 16)
        with torch.no_grad():
            for stage in dec.stages:
                x = stage(x)
                shapes.append(tuple(x.shape[2:]))
        assert shapes == [(18, 32), (36, 64), (72, 128), (144, 256), (288, 512)]

    def test_channel_schedule_mirrors_encoder(self):
        torch.manual_seed(0)
        dec = Decoder((8, 32, 64, 128, 256)).eval()
        x = torch.randn(1, 256, 2, 2)
        outs = []
        with torch.no_grad():
            for stage in dec.stages:
                x = stage(x)
                outs.append(x.shape[1])
        assert outs == [128, 64, 32, 8, 8]

    def test_skip_addition_and_shape_check(self):
        torch.manual_seed(0)
        dec = Decoder((8, 8, 8, 8, 8)).eval()
        x = torch.randn(1, 8, 2, 2)
        skips = [torch.randn(1, 8, 4, 4), None, None, None, None]
        with torch.no_grad():
            out_with = dec(x, skips=skips)
            base = dec(x)
        assert out_with.shape == base.shape
        assert not torch.equal(out_with, base)
        with pytest.raises(GridError):
            dec(x, skips=[torch.randn(1, 8, 3, 3), None, None, None, None])

    def test_all_parameters_receive_gradients(self):
        torch.manual_seed(0)
        dec = Decoder((8, 8, 8, 8, 8)).train()
        out = dec(torch.randn(2, 8, 2, 2))
        out.pow(2).mean().backward()
        for name, p in dec.named_parameters():
            assert p.grad is not None and bool(torch.isfinite(p.grad).all()), name
