"""Binary depth-validity mask and its five-level stage-resolution pyramid.

The mask is a hard threshold at zero: a pixel is trusted iff the sensor
returned a positive reading.  Pyramid levels are nearest-neighbor
downsamples matched to the encoder stage output shapes.
"""

from __future__ import annotations

import numpy as np

from .core import STAGE_STRIDES, DepthImage, GridError, Mask, MaskPyramid


def generate_mask(depth: DepthImage | np.ndarray) -> Mask:
    """Threshold depth at zero: mask = 1 where depth > 0, else 0."""
    data = depth.data if isinstance(depth, DepthImage) else np.asarray(depth)
    if data.ndim != 2:
        raise GridError(f"depth shape must be (H, W), got {data.shape}")
    if not np.isfinite(data).all():
        raise GridError("depth contains non-finite values")
    if (data < 0).any():
        raise GridError("negative depth violates the sensor contract")
    return Mask((data > 0).astype(np.uint8))


def nearest_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Source index per target index: floor(t * src/dst).

    Floor resolves exact ties toward the smaller index, which makes the
    brute-force resampling oracle exact.
    """
    if dst_len <= 0 or src_len <= 0:
        raise GridError("lengths must be positive")
    scale = src_len / dst_len
    idx = np.floor(np.arange(dst_len) * scale).astype(np.int64)
    return np.minimum(idx, src_len - 1)


def resample_nearest(data: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a 2-D grid to `shape` (downsampling only)."""
    h, w = shape
    if h > data.shape[0] or w > data.shape[1]:
        raise GridError(f"target shape {shape} exceeds source {data.shape}; pyramid is downsampling-only")
    rows = nearest_indices(data.shape[0], h)
    cols = nearest_indices(data.shape[1], w)
    return data[np.ix_(rows, cols)]


def stage_shapes(input_hw: tuple[int, int]) -> list[tuple[int, int]]:
    """Encoder stage output shapes for an input divisible by 32."""
    h, w = input_hw
    if h % 32 != 0 or w % 32 != 0:
        raise GridError(f"input resolution must be divisible by 32, got {input_hw}")
    return [(h // s, w // s) for s in STAGE_STRIDES]


def build_pyramid(mask: Mask, shapes: list[tuple[int, int]] | None = None) -> MaskPyramid:
    """Downsample a mask to the five encoder stage resolutions.

    `shapes` defaults to the stride-2,4,8,16,32 schedule of the mask's own
    resolution.  Selection never averages, so binary values survive.
    """
    if shapes is None:
        shapes = stage_shapes(mask.shape)
    if len(shapes) != len(STAGE_STRIDES):
        raise GridError(f"expected {len(STAGE_STRIDES)} stage shapes, got {len(shapes)}")
    for (h0, w0), (h1, w1) in zip(shapes, shapes[1:]):
        if not (h1 < h0 and w1 < w0):
            raise GridError("stage shapes must be strictly decreasing in both dimensions")
    levels = tuple(Mask(resample_nearest(mask.data, s)) for s in shapes)
    return MaskPyramid(levels)
