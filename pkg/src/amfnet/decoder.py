"""Five-stage decoder: dual residual block -> channel attention -> transposed CBR.

Every stage doubles the spatial resolution with a kernel-2 stride-2
transposed convolution, so the five-stage chain restores the network
input resolution from the stride-32 bottleneck.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn

from .amf import ChannelAttention
from .core import GridError


class ConvBnRelu(nn.Module):
    """Convolution -> batch norm -> ReLU; output is non-negative."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        if kernel % 2 == 0:
            raise GridError(f"same-padding requires an odd kernel, got {kernel}")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.bn(self.conv(x)))


class TransposedConvBnRelu(nn.Module):
    """Transposed CBR with kernel 2, stride 2: exact x2 upsampling, no overlap."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.bn(self.conv(x)))


class DualResidualBlock(nn.Module):
    """Four CBR layers with an inner residual and an outer skip.

    With a = CBR1(x) and b = a + CBR2(a), the output is CBR3(b) + CBR4(x).
    CBR4 carries the skip branch with a 1x1 kernel.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.cbr1 = ConvBnRelu(channels, channels)
        self.cbr2 = ConvBnRelu(channels, channels)
        self.cbr3 = ConvBnRelu(channels, channels)
        self.cbr4 = ConvBnRelu(channels, channels, kernel=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.cbr1(x)
        b = a + self.cbr2(a)
        return self.cbr3(b) + self.cbr4(x)


class DecoderStage(nn.Module):
    """Dual residual block -> channel attention -> transposed CBR (x2 upsample)."""

    def __init__(self, in_channels: int, out_channels: int, reduction: int = 16):
        super().__init__()
        self.block = DualResidualBlock(in_channels)
        self.channel_attn = ChannelAttention(in_channels, min(reduction, in_channels))
        self.up = TransposedConvBnRelu(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(self.channel_attn(self.block(x)))


class Decoder(nn.Module):
    """Five decoder stages walking the encoder channel schedule in reverse.

    `skips`, when given, are added to the corresponding stage outputs
    (resolution-matched encoder-side fusion results); entry i pairs with
    stage i and may be None.
    """

    def __init__(self, encoder_channels: Sequence[int], reduction: int = 16):
        super().__init__()
        if len(encoder_channels) != 5:
            raise GridError("decoder needs the five encoder stage channel counts")
        c1, c2, c3, c4, c5 = encoder_channels
        ins = (c5, c4, c3, c2, c1)
        outs = (c4, c3, c2, c1, c1)
        self.stages = nn.ModuleList(
            DecoderStage(i, o, reduction=reduction) for i, o in zip(ins, outs)
        )
        self.out_channels = outs[-1]

    def forward(self, x: torch.Tensor, skips: Optional[Sequence[Optional[torch.Tensor]]] = None) -> torch.Tensor:
        if skips is not None and len(skips) != len(self.stages):
            raise GridError(f"expected {len(self.stages)} skip slots, got {len(skips)}")
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if skips is not None and skips[i] is not None:
                if skips[i].shape != x.shape:
                    raise GridError(
                        f"skip {i} shape {tuple(skips[i].shape)} does not match "
                        f"stage output {tuple(x.shape)}"
                    )
                x = x + skips[i]
        return x
