"""Shared domain types and numeric conventions.

Grids are exchanged in channels-major (C, H, W) order.  Image-side types
wrap numpy arrays and validate their invariants once at construction and
are immutable afterwards; network-side feature maps are plain float32
torch tensors (float64 only inside numerical oracles).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NUM_CLASSES = 3  # 0 background, 1 drivable road, 2 negative obstacle
STAGE_COUNT = 5
STAGE_STRIDES = (2, 4, 8, 16, 32)

#: Network-side activation block, channels-major. Batched tensors prepend a
#: leading batch axis: (B, C, H, W).
FeatureMap = torch.Tensor


class GridError(ValueError):
    """A grid value or shape violates its domain contract."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise GridError(msg)


@dataclass(frozen=True)
class RGBImage:
    """3-channel intensity grid, values in [0, 1], shape (3, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        _require(d.ndim == 3 and d.shape[0] == 3, f"rgb shape must be (3, H, W), got {d.shape}")
        _require(d.shape[1] > 0 and d.shape[2] > 0, "rgb spatial dims must be positive")
        _require(bool(np.isfinite(d).all()), "rgb contains non-finite values")
        _require(bool((d >= 0).all() and (d <= 1).all()), "rgb values must lie in [0, 1]")
        d.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class DepthImage:
    """Raw 1-channel depth readings, sensor-native units (mm for DRNO files).

    A value of 0 means "no valid measurement", never "distance zero".
    """

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        _require(d.ndim == 2, f"depth shape must be (H, W), got {d.shape}")
        _require(d.shape[0] > 0 and d.shape[1] > 0, "depth spatial dims must be positive")
        _require(bool(np.isfinite(d).all()), "depth contains non-finite values")
        _require(bool((d >= 0).all()), "depth values must be >= 0")
        d.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Mask:
    """Binary depth-validity map, shape (H, W), every element exactly 0 or 1."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        _require(d.ndim == 2, f"mask shape must be (H, W), got {d.shape}")
        _require(bool(np.isin(d, (0, 1)).all()), "mask elements must be exactly 0 or 1")
        d.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class MaskPyramid:
    """The five per-stage downsamples M1..M5 of a validity mask."""

    levels: tuple[Mask, ...]

    def __post_init__(self):
        _require(len(self.levels) == STAGE_COUNT, f"pyramid needs {STAGE_COUNT} levels, got {len(self.levels)}")

    def __getitem__(self, i: int) -> Mask:
        return self.levels[i]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices in {0, 1, 2}, shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        _require(d.ndim == 2, f"label map shape must be (H, W), got {d.shape}")
        _require(bool(np.isin(d, range(NUM_CLASSES)).all()), "label indices must lie in {0, 1, 2}")
        d.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def validate_stage_index(n: int) -> int:
    """Encoder/decoder stages are numbered 1..5."""
    if not 1 <= n <= STAGE_COUNT:
        raise GridError(f"stage index must lie in [1, {STAGE_COUNT}], got {n}")
    return n


def normalize_depth(raw: DepthImage | np.ndarray, divisor: float) -> FeatureMap:
    """Scale raw depth into a bounded 1-channel input feature map.

    output = raw / divisor, clamped to [0, 1].  Zeros stay exactly zero, so
    invalid pixels remain distinguishable after normalization.
    """
    if divisor <= 0:
        raise GridError(f"divisor must be positive, got {divisor}")
    data = raw.data if isinstance(raw, DepthImage) else np.asarray(raw)
    if not np.isfinite(data).all():
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise GridError(f"depth contains {bad} non-finite value(s)")
    out = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32)) / float(divisor)
    return out.clamp_(0.0, 1.0).unsqueeze(0)
