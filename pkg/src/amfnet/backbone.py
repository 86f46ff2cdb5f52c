"""Five-stage RGB/depth encoders in the BotNet-50 style.

Stage 1 is a 7x7 stride-2 convolution; stage 2 max-pools then runs the
first bottleneck group; stages 3-4 are stride-2 bottleneck groups; stage 5
replaces the bottleneck's 3x3 convolution with multi-head self-attention
over 2D relative position encodings, downsampling by average pooling.
A width multiplier scales every stage for desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import STAGE_COUNT, GridError


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (64, 256, 512, 1024, 2048)
    width_multiplier: float = 1.0
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)  # bottleneck groups, stages 2..5
    use_mhsa_stage5: bool = True
    mhsa_heads: int = 4

    def __post_init__(self):
        if self.in_channels <= 0:
            raise GridError("in_channels must be positive")
        if len(self.stage_channels) != STAGE_COUNT or any(c <= 0 for c in self.stage_channels):
            raise GridError(f"stage_channels must be {STAGE_COUNT} positive integers")
        if len(self.stage_depths) != STAGE_COUNT - 1 or any(d <= 0 for d in self.stage_depths):
            raise GridError("stage_depths must be 4 positive integers (stages 2..5)")
        if self.width_multiplier <= 0:
            raise GridError("width_multiplier must be positive")
        if self.mhsa_heads <= 0:
            raise GridError("mhsa_heads must be positive")
        self.scaled_channels()  # validate the >= 8 floor early

    def scaled_channels(self) -> tuple[int, ...]:
        scaled = tuple(round(c * self.width_multiplier) for c in self.stage_channels)
        if any(c < 8 for c in scaled):
            raise GridError(
                f"width_multiplier {self.width_multiplier} scales some stage below 8 channels: {scaled}"
            )
        return scaled


def _rel_logits_1d(q: torch.Tensor, rel_k: torch.Tensor) -> torch.Tensor:
    """Relative-position logits along the last spatial axis.

    q: (N, H, W, d), rel_k: (2W - 1, d).  Returns (N, H, W, W) where
    out[n, i, j, j'] = q[n, i, j] . rel_k[j' - j + W - 1].
    """
    n, h, w, _ = q.shape
    x = q @ rel_k.transpose(0, 1)  # (N, H, W, 2W-1)
    # pad-and-reshape converts relative offsets to absolute key positions
    x = x.reshape(n * h, w, 2 * w - 1)
    x = F.pad(x, (0, 1)).flatten(1)
    x = F.pad(x, (0, w - 1)).reshape(n * h, w + 1, 2 * w - 1)
    x = x[:, :w, w - 1:]
    return x.reshape(n, h, w, w)


class MultiHeadSelfAttention2d(nn.Module):
    """Global 2D self-attention with decomposed relative position encodings.

    The encodings are sized for a fixed feature resolution; `stride=2`
    average-pools the output as in the BotNet stage-5 block.
    """

    def __init__(self, channels: int, heads: int, feat_hw: tuple[int, int], stride: int = 1):
        super().__init__()
        if channels % heads != 0:
            raise GridError(f"channels ({channels}) must be divisible by heads ({heads})")
        if stride not in (1, 2):
            raise GridError(f"stride must be 1 or 2, got {stride}")
        self.heads = heads
        self.dim_head = channels // heads
        self.feat_hw = tuple(feat_hw)
        self.scale = self.dim_head**-0.5
        self.qkv = nn.Conv2d(channels, 3 * channels, kernel_size=1, bias=False)
        h, w = feat_hw
        self.height_rel = nn.Parameter(torch.empty(2 * h - 1, self.dim_head))
        self.width_rel = nn.Parameter(torch.empty(2 * w - 1, self.dim_head))
        nn.init.trunc_normal_(self.height_rel, std=self.scale)
        nn.init.trunc_normal_(self.width_rel, std=self.scale)
        self.pool = nn.AvgPool2d(2, 2) if stride == 2 else nn.Identity()

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Post-softmax attention, shape (B * heads, HW, HW); rows sum to 1."""
        q, k, _ = self._qkv(x)
        return self._attend(q, k)

    def _qkv(self, x: torch.Tensor):
        b, c, h, w = x.shape
        if (h, w) != self.feat_hw:
            raise GridError(f"input spatial shape {(h, w)} does not match encoding size {self.feat_hw}")
        q, k, v = self.qkv(x).chunk(3, dim=1)
        shape = (b * self.heads, self.dim_head, h * w)
        return q.reshape(shape), k.reshape(shape), v.reshape(shape)

    def _attend(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        n = q.shape[0]
        h, w = self.feat_hw
        qt = q.transpose(1, 2)  # (N, HW, d)
        logits = (qt @ k) * self.scale
        qg = qt.reshape(n, h, w, self.dim_head)
        w_logits = _rel_logits_1d(qg, self.width_rel).unsqueeze(3)  # (N, H, W, 1, W')
        h_logits = _rel_logits_1d(qg.transpose(1, 2), self.height_rel)
        h_logits = h_logits.permute(0, 2, 1, 3).unsqueeze(4)  # (N, H, W, H', 1)
        logits = logits + (w_logits + h_logits).reshape(n, h * w, h * w)
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self._qkv(x)
        attn = self._attend(q, k)
        out = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(b, c, h, w)
        return self.pool(out)


class Bottleneck(nn.Module):
    """1x1 reduce -> 3x3 conv or self-attention -> 1x1 expand, with shortcut."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        mhsa_heads: Optional[int] = None,
        feat_hw: Optional[tuple[int, int]] = None,
    ):
        super().__init__()
        width = max(1, out_channels // 4)
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        if mhsa_heads is not None:
            if feat_hw is None:
                raise GridError("self-attention bottleneck requires the stage feature size")
            self.mid = MultiHeadSelfAttention2d(width, mhsa_heads, feat_hw, stride=stride)
        else:
            self.mid = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.mid(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    """Five-stage encoder; stage n output has stride 2^n and the configured width."""

    def __init__(self, config: EncoderConfig, input_hw: tuple[int, int]):
        super().__init__()
        h, w = input_hw
        if h % 32 != 0 or w % 32 != 0:
            raise GridError(f"input resolution must be divisible by 32, got {input_hw}")
        self.config = config
        self.input_hw = (h, w)
        c = config.scaled_channels()
        depths = config.stage_depths

        stage1 = nn.Sequential(
            nn.Conv2d(config.in_channels, c[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c[0]),
            nn.ReLU(inplace=True),
        )
        stage2 = nn.Sequential(
            nn.MaxPool2d(3, stride=2, padding=1),
            *self._group(c[0], c[1], stride=1, depth=depths[0]),
        )
        stage3 = nn.Sequential(*self._group(c[1], c[2], stride=2, depth=depths[1]))
        stage4 = nn.Sequential(*self._group(c[2], c[3], stride=2, depth=depths[2]))
        if config.use_mhsa_stage5:
            blocks = [Bottleneck(c[3], c[4], stride=2, mhsa_heads=config.mhsa_heads, feat_hw=(h // 16, w // 16))]
            blocks += [
                Bottleneck(c[4], c[4], mhsa_heads=config.mhsa_heads, feat_hw=(h // 32, w // 32))
                for _ in range(depths[3] - 1)
            ]
            stage5 = nn.Sequential(*blocks)
        else:
            stage5 = nn.Sequential(*self._group(c[3], c[4], stride=2, depth=depths[3]))
        self.stages = nn.ModuleList([stage1, stage2, stage3, stage4, stage5])

    @staticmethod
    def _group(in_channels: int, out_channels: int, stride: int, depth: int) -> list[nn.Module]:
        blocks = [Bottleneck(in_channels, out_channels, stride=stride)]
        blocks += [Bottleneck(out_channels, out_channels) for _ in range(depth - 1)]
        return blocks

    def run_stage(self, n: int, x: torch.Tensor) -> torch.Tensor:
        return self.stages[n - 1](x)

    def forward(
        self, x: torch.Tensor, injected: Optional[dict[int, torch.Tensor]] = None
    ) -> tuple[torch.Tensor, ...]:
        """Run all five stages; `injected[n]` replaces stage n's output as the
        input of stage n+1.  Returns the raw per-stage outputs."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise GridError(
                f"expected input of shape (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if tuple(x.shape[2:]) != self.input_hw:
            raise GridError(f"input spatial shape {tuple(x.shape[2:])} != configured {self.input_hw}")
        injected = injected or {}
        for n in injected:
            if not 1 <= n <= STAGE_COUNT - 1:
                raise GridError(f"injection is only meaningful for stages 1..4, got stage {n}")
        outputs = []
        feed = x
        for n in range(1, STAGE_COUNT + 1):
            out = self.run_stage(n, feed)
            outputs.append(out)
            feed = out
            if n in injected:
                sub = injected[n]
                if sub.shape != out.shape:
                    raise GridError(
                        f"injected map for stage {n} has shape {tuple(sub.shape)}, "
                        f"expected {tuple(out.shape)}"
                    )
                feed = sub
        return tuple(outputs)


def init_weights(module: nn.Module) -> None:
    """He fan-out for convolutions; unit scale, zero shift for norms."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
