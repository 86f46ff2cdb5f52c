"""Full network assembly and the stage-fusion ablation variants.

Both encoders run over the input pair; at each stage the RGB and depth
features are fused either by an adaptive-mask fusion block or by plain
element-wise addition, per the variant.  The fused stage-n map feeds RGB
encoder stage n+1 and is added to the resolution-matched decoder stage
output; the stage-5 fused map seeds the decoder.  A 1x1 head produces
3-class logits at the input resolution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .amf import AdaptiveMaskFusion
from .backbone import Encoder, EncoderConfig, init_weights
from .core import NUM_CLASSES, STAGE_COUNT, GridError
from .decoder import Decoder
from .maskgen import nearest_indices, stage_shapes

_TABLE_ROWS = {
    "A": (False, False, False, False, False),
    "B": (False, False, False, False, True),
    "C": (False, False, False, True, False),
    "D": (False, False, True, False, False),
    "E": (False, True, False, False, False),
    "F": (True, False, False, False, False),
    "G": (False, False, False, True, True),
    "H": (False, False, True, True, True),
    "I": (False, True, True, True, True),
    "J": (True, True, True, True, True),
}
VARIANT_ROWS = tuple(_TABLE_ROWS)


@dataclass(frozen=True)
class AblationSpec:
    """Which of the five encoder stages fuse through an adaptive-mask block.

    Stages without one fuse by plain element-wise addition.  Serializes as
    a 5-character string over {+, A} read stage 1 to 5, '+' meaning the
    adaptive block is present (variant J = "+++++", variant A = "AAAAA").
    """

    amf_at_stage: tuple[bool, bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.amf_at_stage) != STAGE_COUNT:
            raise GridError(f"variant needs {STAGE_COUNT} stage flags")

    @classmethod
    def from_row(cls, row: str) -> "AblationSpec":
        try:
            return cls(_TABLE_ROWS[row.upper()])
        except KeyError:
            raise GridError(f"unknown variant row {row!r}; expected one of {''.join(VARIANT_ROWS)}") from None

    @classmethod
    def from_string(cls, s: str) -> "AblationSpec":
        if len(s) != STAGE_COUNT or any(c not in "+A" for c in s):
            raise GridError(f"variant string must be 5 characters over {{+, A}}, got {s!r}")
        return cls(tuple(c == "+" for c in s))

    @classmethod
    def parse(cls, s: str) -> "AblationSpec":
        """Accepts either a row letter (A..J) or a 5-character stage string."""
        if len(s) == 1:
            return cls.from_row(s)
        return cls.from_string(s)

    def to_string(self) -> str:
        return "".join("+" if f else "A" for f in self.amf_at_stage)

    @property
    def row(self) -> Optional[str]:
        for name, flags in _TABLE_ROWS.items():
            if flags == self.amf_at_stage:
                return name
        return None


@dataclass(frozen=True)
class NetworkConfig:
    variant: AblationSpec = field(default_factory=lambda: AblationSpec.from_row("J"))
    input_hw: tuple[int, int] = (288, 512)
    width_multiplier: float = 1.0
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    use_mhsa_stage5: bool = True
    mhsa_heads: int = 4
    num_classes: int = NUM_CLASSES
    channel_attention_reduction: int = 16
    spatial_attention_kernel: int = 7
    depth_divisor: float = 1000.0

    def __post_init__(self):
        if self.input_hw[0] % 32 != 0 or self.input_hw[1] % 32 != 0:
            raise GridError(f"input resolution must be divisible by 32, got {self.input_hw}")
        if self.depth_divisor <= 0:
            raise GridError("depth_divisor must be positive")

    def encoder_config(self, in_channels: int) -> EncoderConfig:
        return EncoderConfig(
            in_channels=in_channels,
            width_multiplier=self.width_multiplier,
            stage_depths=self.stage_depths,
            use_mhsa_stage5=self.use_mhsa_stage5,
            mhsa_heads=self.mhsa_heads,
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.to_string(),
            "input_hw": list(self.input_hw),
            "width_multiplier": self.width_multiplier,
            "stage_depths": list(self.stage_depths),
            "use_mhsa_stage5": self.use_mhsa_stage5,
            "mhsa_heads": self.mhsa_heads,
            "num_classes": self.num_classes,
            "channel_attention_reduction": self.channel_attention_reduction,
            "spatial_attention_kernel": self.spatial_attention_kernel,
            "depth_divisor": self.depth_divisor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            variant=AblationSpec.from_string(d["variant"]),
            input_hw=tuple(d["input_hw"]),
            width_multiplier=d["width_multiplier"],
            stage_depths=tuple(d["stage_depths"]),
            use_mhsa_stage5=d["use_mhsa_stage5"],
            mhsa_heads=d["mhsa_heads"],
            num_classes=d["num_classes"],
            channel_attention_reduction=d["channel_attention_reduction"],
            spatial_attention_kernel=d["spatial_attention_kernel"],
            depth_divisor=d["depth_divisor"],
        )

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_variant(self, variant: AblationSpec) -> "NetworkConfig":
        return replace(self, variant=variant)


class PlainAdditionFusion(nn.Module):
    """Parameter-free stage fusion: element-wise addition, mask ignored."""

    def forward(self, rgb_feat, depth_feat, mask=None, record=None):
        fused = rgb_feat + depth_feat
        if record is not None:
            record["rgb_feat"] = rgb_feat.detach()
            record["fused"] = fused.detach()
        return fused


class AMFNet(nn.Module):
    """Two-encoder one-decoder segmentation network with per-stage fusion."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.rgb_encoder = Encoder(config.encoder_config(3), config.input_hw)
        self.depth_encoder = Encoder(config.encoder_config(1), config.input_hw)
        channels = self.rgb_encoder.config.scaled_channels()
        self.fusions = nn.ModuleList(
            AdaptiveMaskFusion(
                channels[n],
                reduction=config.channel_attention_reduction,
                spatial_kernel=config.spatial_attention_kernel,
            )
            if config.variant.amf_at_stage[n]
            else PlainAdditionFusion()
            for n in range(STAGE_COUNT)
        )
        self.decoder = Decoder(channels, reduction=config.channel_attention_reduction)
        self.head = nn.Conv2d(self.decoder.out_channels, config.num_classes, kernel_size=1)
        self.apply(init_weights)
        shapes = stage_shapes(config.input_hw)
        h, w = config.input_hw
        for i, (sh, sw) in enumerate(shapes):
            self.register_buffer(f"_rows_{i}", torch.from_numpy(nearest_indices(h, sh)), persistent=False)
            self.register_buffer(f"_cols_{i}", torch.from_numpy(nearest_indices(w, sw)), persistent=False)

    def mask_pyramid(self, mask: torch.Tensor) -> list[torch.Tensor]:
        """Nearest-neighbor downsamples of a (B, 1, H, W) mask per stage."""
        levels = []
        for i in range(STAGE_COUNT):
            rows = getattr(self, f"_rows_{i}")
            cols = getattr(self, f"_cols_{i}")
            levels.append(mask.index_select(2, rows).index_select(3, cols))
        return levels

    def _check_inputs(self, rgb: torch.Tensor, depth: torch.Tensor) -> None:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise GridError(f"expected rgb of shape (B, 3, H, W), got {tuple(rgb.shape)}")
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise GridError(f"expected depth of shape (B, 1, H, W), got {tuple(depth.shape)}")
        if rgb.shape[0] != depth.shape[0] or rgb.shape[2:] != depth.shape[2:]:
            raise GridError(
                f"rgb {tuple(rgb.shape)} and depth {tuple(depth.shape)} are not aligned"
            )
        if tuple(rgb.shape[2:]) != self.config.input_hw:
            raise GridError(
                f"input spatial shape {tuple(rgb.shape[2:])} != configured {self.config.input_hw} "
                "(resolution must be divisible by 32 and match the build)"
            )
        if not bool(torch.isfinite(rgb).all()) or not bool(torch.isfinite(depth).all()):
            raise GridError("network inputs contain non-finite values")

    def forward(
        self,
        rgb: torch.Tensor,
        depth: torch.Tensor,
        record: Optional[dict] = None,
    ) -> torch.Tensor:
        """Map a raw (rgb, depth) pair to (B, num_classes, H, W) logits.

        `depth` carries raw sensor values; the validity mask and the
        normalized encoder input are derived here.  `record`, when given,
        collects per-stage fusion diagnostics under keys "stage1".."stage5".
        """
        self._check_inputs(rgb, depth)
        mask = (depth > 0).to(rgb.dtype)
        pyramid = self.mask_pyramid(mask)
        depth_in = (depth / self.config.depth_divisor).clamp(0.0, 1.0)

        depth_feats = self.depth_encoder(depth_in)
        fused = []
        feed = rgb
        for n in range(STAGE_COUNT):
            rgb_feat = self.rgb_encoder.run_stage(n + 1, feed)
            stage_record = None
            if record is not None:
                stage_record = record.setdefault(f"stage{n + 1}", {})
            f = self.fusions[n](rgb_feat, depth_feats[n], pyramid[n], record=stage_record)
            fused.append(f)
            feed = f
        skips = [fused[3], fused[2], fused[1], fused[0], None]
        out = self.decoder(fused[4], skips=skips)
        return self.head(out)


def build_network(config: NetworkConfig, seed: int = 0) -> AMFNet:
    """Construct a network with deterministic parameter initialization."""
    torch.manual_seed(seed)
    return AMFNet(config)


def build_variant(variant: AblationSpec | str, config: NetworkConfig, seed: int = 0) -> AMFNet:
    """Build a network whose stage fusion wiring follows `variant`."""
    if isinstance(variant, str):
        variant = AblationSpec.parse(variant)
    return build_network(config.with_variant(variant), seed=seed)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def segmentation_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: Optional[tuple[float, ...]] = None,
) -> torch.Tensor:
    """Weighted per-pixel cross-entropy, background included as a class.

    The mean is normalized by the total weight of the pixels present, so
    unit weights reduce to the plain per-pixel mean.
    """
    if logits.ndim != 4:
        raise GridError(f"expected logits of shape (B, C, H, W), got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise GridError(f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    num_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise GridError(f"label indices must lie in [0, {num_classes})")
    weight = None
    if class_weights is not None:
        if len(class_weights) != num_classes:
            raise GridError(f"need {num_classes} class weights, got {len(class_weights)}")
        weight = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    return F.cross_entropy(logits, labels.long(), weight=weight)
