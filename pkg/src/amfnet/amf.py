"""Adaptive-mask fusion of RGB and depth feature maps.

The fusion weights each branch with a complementary pair of adaptive
masks derived from a per-sample softmax weight pair and the binary
depth-validity mask: wherever depth is invalid the depth mask is exactly
zero and the RGB branch passes through bitwise-unchanged.  The fused map
is then refined by channel attention and spatial attention.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import GridError


class AdaptiveWeights(NamedTuple):
    """Per-sample softmax pair; w_rgb + w_depth = 1."""

    w_rgb: torch.Tensor  # (B,)
    w_depth: torch.Tensor  # (B,)


class AdaptiveMaskPair(NamedTuple):
    """Complementary weight masks at a stage's resolution; m_rgb + m_depth = 1."""

    m_rgb: torch.Tensor  # (B, 1, H, W)
    m_depth: torch.Tensor  # (B, 1, H, W)


def weights_from_logits(logits: torch.Tensor) -> AdaptiveWeights:
    """Softmax over the 2-logit dimension; column 0 is RGB, column 1 depth."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise GridError(f"expected logits of shape (B, 2), got {tuple(logits.shape)}")
    w = torch.softmax(logits, dim=1)
    return AdaptiveWeights(w_rgb=w[:, 0], w_depth=w[:, 1])


def _flex_bn1d(bn: nn.BatchNorm1d, x: torch.Tensor) -> torch.Tensor:
    # Batch statistics are undefined for a single sample; fall back to the
    # running statistics without updating them.
    if bn.training and x.shape[0] == 1:
        return F.batch_norm(
            x, bn.running_mean, bn.running_var, bn.weight, bn.bias,
            training=False, eps=bn.eps,
        )
    return bn(x)


class AdaptiveMaskGenerator(nn.Module):
    """Produces the per-sample (RGB, depth) weight pair from pooled features.

    Channel-concatenates the two branches, global-average-pools, then runs
    two FC-BN-ReLU layers and an FC-BN-Softmax layer with two outputs.
    """

    def __init__(self, channels: int):
        super().__init__()
        c = 2 * channels
        h1 = max(1, c // 4)
        h2 = max(1, h1 // 4)
        self.fc1 = nn.Linear(c, h1)
        self.bn1 = nn.BatchNorm1d(h1)
        self.fc2 = nn.Linear(h1, h2)
        self.bn2 = nn.BatchNorm1d(h2)
        self.fc3 = nn.Linear(h2, 2)
        self.bn3 = nn.BatchNorm1d(2)

    def forward(self, rgb_feat: torch.Tensor, depth_feat: torch.Tensor) -> AdaptiveWeights:
        if rgb_feat.shape != depth_feat.shape:
            raise GridError(
                f"rgb features {tuple(rgb_feat.shape)} and depth features "
                f"{tuple(depth_feat.shape)} must have identical shapes"
            )
        x = torch.cat([rgb_feat, depth_feat], dim=1)
        x = x.mean(dim=(2, 3))
        x = F.relu(_flex_bn1d(self.bn1, self.fc1(x)))
        x = F.relu(_flex_bn1d(self.bn2, self.fc2(x)))
        logits = _flex_bn1d(self.bn3, self.fc3(x))
        return weights_from_logits(logits)


def make_adaptive_masks(weights: AdaptiveWeights, mask: torch.Tensor) -> AdaptiveMaskPair:
    """m_depth = w_depth * mask, m_rgb = 1 - m_depth.

    The subtraction from an all-one map makes the pair a partition of unity
    and leaves m_rgb exactly 1 wherever the mask marks depth invalid.
    """
    w_depth = weights.w_depth
    for w in (weights.w_rgb, w_depth):
        if bool((w < 0).any()) or bool((w > 1).any()):
            raise GridError("adaptive weights must lie in [0, 1]")
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise GridError("mask must be binary")
    m_depth = w_depth.view(-1, 1, 1, 1) * mask
    m_rgb = 1.0 - m_depth
    return AdaptiveMaskPair(m_rgb=m_rgb, m_depth=m_depth)


def masked_fuse(rgb_feat: torch.Tensor, depth_feat: torch.Tensor, masks: AdaptiveMaskPair) -> torch.Tensor:
    """fused = rgb ⊙ m_rgb + depth ⊙ m_depth, masks broadcast over channels."""
    if rgb_feat.shape != depth_feat.shape:
        raise GridError("rgb and depth features must have identical shapes")
    if masks.m_rgb.shape[-2:] != rgb_feat.shape[-2:]:
        raise GridError(
            f"mask spatial shape {tuple(masks.m_rgb.shape[-2:])} does not match "
            f"features {tuple(rgb_feat.shape[-2:])}"
        )
    return rgb_feat * masks.m_rgb + depth_feat * masks.m_depth


class ChannelAttention(nn.Module):
    """Squeeze-style channel reweighting: GAP -> FC-BN-ReLU -> FC -> Sigmoid."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            raise GridError(f"channels ({channels}) must be >= reduction ({reduction})")
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = x.mean(dim=(2, 3))
        w = F.relu(_flex_bn1d(self.bn, self.fc1(w)))
        w = torch.sigmoid(self.fc2(w))
        return x * w.unsqueeze(-1).unsqueeze(-1)


class SpatialAttention(nn.Module):
    """Spatial reweighting: conv to one channel -> sigmoid -> broadcast scale."""

    def __init__(self, channels: int, kernel: int = 7):
        super().__init__()
        if kernel % 2 == 0 or kernel <= 0:
            raise GridError(f"spatial attention kernel must be odd and positive, got {kernel}")
        self.conv = nn.Conv2d(channels, 1, kernel_size=kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.sigmoid(self.conv(x))


class AdaptiveMaskFusion(nn.Module):
    """Full fusion block: adaptive masks -> masked fuse -> channel + spatial attention.

    `record`, when given, captures the per-sample weights, depth-mask
    statistics, and the pre-attention fusion result for inspection.
    """

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.amg = AdaptiveMaskGenerator(channels)
        self.channel_attn = ChannelAttention(channels, min(reduction, channels))
        self.spatial_attn = SpatialAttention(channels, spatial_kernel)

    def forward(
        self,
        rgb_feat: torch.Tensor,
        depth_feat: torch.Tensor,
        mask: torch.Tensor,
        record: Optional[dict] = None,
    ) -> torch.Tensor:
        weights = self.amg(rgb_feat, depth_feat)
        masks = make_adaptive_masks(weights, mask)
        fused = masked_fuse(rgb_feat, depth_feat, masks)
        if record is not None:
            record["w_rgb"] = weights.w_rgb.detach()
            record["w_depth"] = weights.w_depth.detach()
            record["m_depth_mean"] = float(masks.m_depth.mean())
            record["m_depth_min"] = float(masks.m_depth.min())
            record["m_depth_max"] = float(masks.m_depth.max())
            record["rgb_feat"] = rgb_feat.detach()
            record["fused"] = fused.detach()
        return self.spatial_attn(self.channel_attn(fused))
