"""Full network assembly, ablation variants, and the loss contract."""

import math

import numpy as np
import pytest
import torch

from amfnet.core import GridError
from amfnet.network import (
    VARIANT_ROWS,
    AblationSpec,
    AMFNet,
    NetworkConfig,
    build_network,
    build_variant,
    parameter_count,
    segmentation_loss,
)

from oracles import cross_entropy_oracle


def desk_net_config(variant="J", input_hw=(64, 64)):
    return NetworkConfig(
        variant=AblationSpec.parse(variant),
        input_hw=input_hw,
        width_multiplier=0.125,
        depth_divisor=1000.0,
    )


def reference_plain_addition_forward(net: AMFNet, rgb, depth):
    """Manual re-wiring with explicit element-wise additions at every stage."""
    depth_in = (depth / net.config.depth_divisor).clamp(0.0, 1.0)
    depth_feats = net.depth_encoder(depth_in)
    fused = []
    feed = rgb
    for n in range(1, 6):
        rgb_feat = net.rgb_encoder.run_stage(n, feed)
        f = rgb_feat + depth_feats[n - 1]
        fused.append(f)
        feed = f
    x = fused[4]
    for i, stage in enumerate(net.decoder.stages):
        x = stage(x)
        if i < 4:
            x = x + fused[3 - i]
    return net.head(x)


class TestAblationSpec:
    def test_table_rows(self):
        assert AblationSpec.from_row("A").to_string() == "AAAAA"
        assert AblationSpec.from_row("J").to_string() == "+++++"
        assert AblationSpec.from_row("B").to_string() == "AAAA+"
        assert AblationSpec.from_row("F").to_string() == "+AAAA"
        assert AblationSpec.from_row("H").to_string() == "AA+++"

    def test_string_round_trip(self):
        for row in VARIANT_ROWS:
            spec = AblationSpec.from_row(row)
            assert AblationSpec.from_string(spec.to_string()) == spec
            assert spec.row == row

    def test_parse_accepts_both_forms(self):
        assert AblationSpec.parse("G") == AblationSpec.parse("AAA++")

    def test_rejects_garbage(self):
        with pytest.raises(GridError):
            AblationSpec.parse("K")
        with pytest.raises(GridError):
            AblationSpec.parse("++")


class TestForward:
    def test_paper_resolution_logits_shape(self):
        net = build_network(desk_net_config("J", (288, 512)), seed=0).eval()
        rgb = torch.rand(1, 3, 288, 512)
        depth = torch.randint(0, 4000, (1, 1, 288, 512)).float()
        with torch.no_grad():
            logits = net(rgb, depth)
        assert logits.shape == (1, 3, 288, 512)

    def test_zero_depth_fusion_is_rgb_at_every_stage(self):
        net = build_network(desk_net_config("J"), seed=1).eval()
        rgb = torch.rand(2, 3, 64, 64)
        depth = torch.zeros(2, 1, 64, 64)
        record = {}
        with torch.no_grad():
            net(rgb, depth, record=record)
        for n in range(1, 6):
            stage = record[f"stage{n}"]
            assert torch.equal(stage["fused"], stage["rgb_feat"]), f"stage {n}"

    def test_variant_a_equals_substitution_oracle_bitwise(self):
        net = build_network(desk_net_config("A"), seed=7).eval()
        rgb = torch.rand(2, 3, 64, 64)
        depth = torch.randint(0, 3000, (2, 1, 64, 64)).float()
        with torch.no_grad():
            assert torch.equal(net(rgb, depth), reference_plain_addition_forward(net, rgb, depth))

    def test_fixed_seed_is_bitwise_reproducible(self):
        cfg = desk_net_config("J")
        rgb = torch.rand(1, 3, 64, 64)
        depth = torch.randint(0, 3000, (1, 1, 64, 64)).float()
        outs = []
        for _ in range(2):
            net = build_network(cfg, seed=3).eval()
            with torch.no_grad():
                outs.append(net(rgb, depth))
        assert torch.equal(outs[0], outs[1])

    def test_rejects_misaligned_inputs(self):
        net = build_network(desk_net_config("A"), seed=0)
        with pytest.raises(GridError, match="aligned"):
            net(torch.rand(1, 3, 64, 64), torch.rand(2, 1, 64, 64))

    def test_rejects_wrong_resolution(self):
        net = build_network(desk_net_config("A"), seed=0)
        with pytest.raises(GridError):
            net(torch.rand(1, 3, 96, 128), torch.rand(1, 1, 96, 128))

    def test_rejects_non_finite(self):
        net = build_network(desk_net_config("A"), seed=0)
        rgb = torch.full((1, 3, 64, 64), float("nan"))
        with pytest.raises(GridError, match="non-finite"):
            net(rgb, torch.zeros(1, 1, 64, 64))


class TestBuildVariant:
    def test_parameter_count_grows_with_each_added_stage(self):
        cfg = desk_net_config("A")
        nested = ["A", "B", "G", "H", "I", "J"]
        counts = [parameter_count(build_variant(v, cfg, seed=0)) for v in nested]
        assert counts == sorted(counts)
        assert len(set(counts)) == len(counts)

    def test_all_table_rows_constructible(self):
        cfg = desk_net_config("A")
        base = parameter_count(build_variant("A", cfg, seed=0))
        for row in VARIANT_ROWS:
            net = build_variant(row, cfg, seed=0)
            if row != "A":
                assert parameter_count(net) > base, row

    def test_b_differs_from_a_only_in_stage5_fusion(self):
        cfg = desk_net_config("A")
        names_a = {n for n, _ in build_variant("A", cfg, seed=0).named_parameters()}
        names_b = {n for n, _ in build_variant("B", cfg, seed=0).named_parameters()}
        assert names_a <= names_b
        extra = names_b - names_a
        assert extra and all(n.startswith("fusions.4.") for n in extra)


class TestLoss:
    def test_peaked_logits_drive_loss_to_zero(self):
        labels = torch.randint(0, 3, (1, 4, 4))
        logits = torch.full((1, 3, 4, 4), -50.0)
        logits.scatter_(1, labels.unsqueeze(1), 50.0)
        assert float(segmentation_loss(logits, labels)) < 1e-6

    def test_uniform_logits_give_ln3(self):
        logits = torch.zeros(1, 3, 4, 4)
        labels = torch.randint(0, 3, (1, 4, 4))
        assert float(segmentation_loss(logits, labels)) == pytest.approx(math.log(3), abs=1e-6)

    def test_matches_scalar_summation_oracle(self):
        rng = np.random.default_rng(13)
        logits = rng.standard_normal((3, 4, 4)).astype(np.float32)
        labels = rng.integers(0, 3, size=(4, 4))
        weights = (1.0, 2.0, 0.5)
        expected = cross_entropy_oracle(logits, labels, weights)
        got = segmentation_loss(
            torch.from_numpy(logits)[None], torch.from_numpy(labels)[None], weights
        )
        assert float(got) == pytest.approx(expected, rel=1e-5)

    def test_rejects_invalid_label(self):
        with pytest.raises(GridError):
            segmentation_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), 3))

    def test_rejects_weight_count_mismatch(self):
        with pytest.raises(GridError):
            segmentation_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 2).long(), (1.0, 1.0))


class TestConfig:
    def test_fingerprint_stable_and_sensitive(self):
        a = desk_net_config("J")
        b = desk_net_config("J")
        c = desk_net_config("A")
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_round_trip_via_dict(self):
        cfg = desk_net_config("G", (96, 128))
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects_indivisible_resolution(self):
        with pytest.raises(GridError):
            NetworkConfig(input_hw=(100, 128))
