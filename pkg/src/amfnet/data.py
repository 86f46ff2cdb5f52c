"""Dataset access in DRNO layout, deterministic splits, and synthetic scenes.

On-disk layout: root/{rgb,depth,labels}/<id>.png with 8-bit 3-channel RGB,
16-bit single-channel depth (millimeters, 0 = invalid), and 8-bit indexed
labels {0 background, 1 drivable road, 2 negative obstacle}.  A
manifest.json at the root lists sample ids per split.

The synthetic generator renders a textured road band with dark obstacle
depressions and equally dark distractor patches at road depth, so class 2
is separable through depth but ambiguous from RGB alone.  Invalid-depth
regions are contiguous zero blobs with an exact pixel count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .core import DepthImage, GridError, LabelMap, Mask, RGBImage

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Sample:
    """Aligned (RGB, depth, label) triple."""

    rgb: RGBImage
    depth: DepthImage
    label: LabelMap
    id: str

    def __post_init__(self):
        shapes = {(self.rgb.height, self.rgb.width), self.depth.data.shape, self.label.data.shape}
        if len(shapes) != 1:
            raise GridError(f"sample {self.id!r}: rgb/depth/label shapes differ: {shapes}")


@dataclass(frozen=True)
class SynthParams:
    resolution: tuple[int, int] = (96, 128)
    invalid_fraction: float = 0.0
    road_fraction: float = 0.5
    obstacle_count: int = 2
    obstacle_scale: float = 1.0
    obstacle_shape: str = "ellipse"  # or "box"
    distractor_count: int | None = None  # None: one per obstacle
    texture_level: float = 1.0
    noise_level: float = 0.04
    seed: int = 0

    def __post_init__(self):
        h, w = self.resolution
        if h % 32 != 0 or w % 32 != 0:
            raise GridError(f"resolution must be divisible by 32, got {self.resolution}")
        if not 0.0 <= self.invalid_fraction <= 1.0:
            raise GridError("invalid_fraction must lie in [0, 1]")
        if not 0.0 < self.road_fraction < 1.0:
            raise GridError("road_fraction must lie in (0, 1)")
        if self.obstacle_count < 0:
            raise GridError("obstacle_count must be non-negative")
        if self.obstacle_scale <= 0:
            raise GridError("obstacle_scale must be positive")
        if self.obstacle_shape not in ("ellipse", "box"):
            raise GridError(f"obstacle_shape must be 'ellipse' or 'box', got {self.obstacle_shape!r}")
        if self.texture_level < 0:
            raise GridError("texture_level must be non-negative")
        if self.noise_level < 0:
            raise GridError("noise_level must be non-negative")


# ---------------------------------------------------------------------------
# file IO

def _paths(root: str | Path, sample_id: str) -> dict[str, Path]:
    root = Path(root)
    return {kind: root / kind / f"{sample_id}.png" for kind in ("rgb", "depth", "labels")}


def load_sample(root: str | Path, sample_id: str) -> Sample:
    paths = _paths(root, sample_id)
    for kind, p in paths.items():
        if not p.exists():
            raise GridError(f"missing {kind} file: {p}")

    rgb_raw = np.asarray(Image.open(paths["rgb"]).convert("RGB"), dtype=np.uint8)
    rgb = rgb_raw.astype(np.float32).transpose(2, 0, 1) / 255.0

    depth_img = Image.open(paths["depth"])
    depth_raw = np.asarray(depth_img)
    if depth_raw.ndim != 2:
        raise GridError(f"depth file is not single-channel: {paths['depth']}")
    if depth_raw.min() < 0 or depth_raw.max() > np.iinfo(np.uint16).max:
        raise GridError(f"depth file exceeds the 16-bit range: {paths['depth']}")
    depth = depth_raw.astype(np.uint16)

    label_raw = np.asarray(Image.open(paths["labels"]))
    if label_raw.ndim != 2:
        raise GridError(f"label file is not single-channel: {paths['labels']}")
    try:
        label = LabelMap(label_raw.astype(np.uint8))
    except GridError as e:
        raise GridError(f"illegal label index in {paths['labels']}: {e}") from None

    if not (rgb.shape[1:] == depth.shape == label.data.shape):
        raise GridError(
            f"shape mismatch for sample {sample_id!r}: rgb {rgb.shape[1:]}, "
            f"depth {depth.shape}, labels {label.data.shape}"
        )
    return Sample(RGBImage(rgb), DepthImage(depth), label, sample_id)


def save_sample(root: str | Path, sample: Sample) -> None:
    paths = _paths(root, sample.id)
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(sample.rgb.data * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb8, mode="RGB").save(paths["rgb"])
    depth = np.asarray(sample.depth.data)
    if depth.max() > np.iinfo(np.uint16).max:
        raise GridError("depth exceeds the 16-bit file range")
    Image.fromarray(np.round(depth).astype(np.uint16)).save(paths["depth"])
    Image.fromarray(sample.label.data.astype(np.uint8), mode="L").save(paths["labels"])


def write_manifest(root: str | Path, splits: dict[str, list[str]]) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(splits, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root: str | Path) -> dict[str, list[str]]:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise GridError(f"missing manifest: {path}")
    splits = json.loads(path.read_text())
    for name in SPLIT_NAMES:
        if name not in splits:
            raise GridError(f"manifest {path} lacks the {name!r} split")
    return splits


def load_split(root: str | Path, split: str) -> list[Sample]:
    ids = read_manifest(root)[split]
    return [load_sample(root, i) for i in ids]


# ---------------------------------------------------------------------------
# splits

def split_ids(
    ids: Sequence[str], seed: int, ratios: tuple[float, float, float] = (0.5, 0.25, 0.25)
) -> tuple[list[str], list[str], list[str]]:
    """Deterministic three-way partition with largest-remainder rounding."""
    ids = list(ids)
    if not ids:
        raise GridError("cannot split an empty id list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise GridError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    n = len(ids)
    exact = [n * r for r in ratios]
    sizes = [math.floor(e) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    for _ in range(n - sum(sizes)):
        i = max(range(3), key=lambda j: (remainders[j], -j))  # ties to the earlier split
        sizes[i] += 1
        remainders[i] = -1.0
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# ---------------------------------------------------------------------------
# synthetic scenes

def _grow_invalid_blobs(rng: np.random.Generator, shape: tuple[int, int], target: int) -> np.ndarray:
    """Mark exactly `target` pixels invalid, grown as contiguous blobs."""
    h, w = shape
    invalid = np.zeros((h, w), dtype=bool)
    count = 0
    typical = max(120, target // 8)
    while count < target:
        remaining = np.flatnonzero(~invalid.ravel())
        start = int(rng.choice(remaining))
        frontier = [(start // w, start % w)]
        goal = min(target - count, max(1, int(typical * rng.uniform(0.6, 1.4))))
        grown = 0
        while frontier and grown < goal:
            i = int(rng.integers(len(frontier)))
            frontier[i], frontier[-1] = frontier[-1], frontier[i]
            r, c = frontier.pop()
            if invalid[r, c]:
                continue
            invalid[r, c] = True
            grown += 1
            count += 1
            if r > 0 and not invalid[r - 1, c]:
                frontier.append((r - 1, c))
            if r < h - 1 and not invalid[r + 1, c]:
                frontier.append((r + 1, c))
            if c > 0 and not invalid[r, c - 1]:
                frontier.append((r, c - 1))
            if c < w - 1 and not invalid[r, c + 1]:
                frontier.append((r, c + 1))
    return invalid


def _blob(shape: str, h: int, w: int, center: tuple[int, int], radii: tuple[int, int]) -> np.ndarray:
    cy, cx = center
    ry, rx = radii
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    if shape == "box":
        return (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def synth_scene(params: SynthParams) -> Sample:
    """Render one deterministic RGB-D-label triple from `params`."""
    rng = np.random.default_rng(params.seed)
    h, w = params.resolution
    horizon = h - int(round(params.road_fraction * h))
    horizon = min(max(horizon, 1), h - 1)

    label = np.zeros((h, w), dtype=np.uint8)
    label[horizon:] = 1

    rows = np.arange(h, dtype=np.float32)[:, None]
    tex = params.texture_level
    rgb = np.empty((h, w), dtype=np.float32)
    rgb[:horizon] = 0.62 + tex * 0.13 * (rows[:horizon] / max(1, horizon - 1))
    road_t = (rows[horizon:] - horizon) / max(1, h - 1 - horizon)
    rgb[horizon:] = 0.45 + tex * (0.04 * np.sin(rows[horizon:] * (2 * np.pi / 9.0)) + 0.02 * road_t)
    rgb = np.repeat(rgb[None], 3, axis=0)

    depth = np.empty((h, w), dtype=np.float32)
    depth[:horizon] = 20000.0 + 4000.0 * rng.standard_normal((horizon, w)).clip(-2, 2) * 0.1
    depth[horizon:] = 12000.0 - 9500.0 * road_t  # nearer toward the bottom edge

    road_area = (h - horizon) * w

    def place(count: int, deepen: float, shade: float, mark: int | None) -> int:
        used = 0
        scale = params.obstacle_scale
        for _ in range(count):
            ry = max(2, int(scale * rng.integers(max(2, h // 32), max(3, h // 14))))
            rx = max(2, int(scale * rng.integers(max(2, w // 32), max(3, w // 14))))
            used += int(math.pi * ry * rx)
            if used > road_area:
                raise GridError(
                    f"requested obstacle area ({used} px) exceeds the road area ({road_area} px)"
                )
            lo, hi = horizon + ry, h - ry
            if lo >= hi:
                raise GridError("road band too narrow for the requested obstacles")
            cy = int(rng.integers(lo, hi))
            cx = int(rng.integers(rx, w - rx))
            blob = _blob(params.obstacle_shape, h, w, (cy, cx), (ry, rx))
            rgb[:, blob] = shade + 0.03 * rng.standard_normal()
            depth[blob] += deepen
            if mark is not None:
                label[blob] = mark
        return used

    # distractors first so real obstacles overwrite overlapping labels
    distractors = params.obstacle_count if params.distractor_count is None else params.distractor_count
    place(distractors, deepen=0.0, shade=0.20, mark=None)
    place(params.obstacle_count, deepen=3000.0, shade=0.13, mark=2)

    if params.noise_level > 0:
        rgb = rgb + rng.normal(0.0, params.noise_level, rgb.shape).astype(np.float32)
        depth = depth * (1.0 + rng.normal(0.0, 0.01, depth.shape).astype(np.float32))
    rgb = rgb.clip(0.0, 1.0)

    depth = np.round(depth).clip(1, np.iinfo(np.uint16).max).astype(np.uint16)
    target = math.ceil(params.invalid_fraction * h * w)
    if target:
        depth[_grow_invalid_blobs(rng, (h, w), target)] = 0

    rgb = np.round(rgb * 255.0).astype(np.float32) / 255.0  # match the 8-bit file round trip
    return Sample(RGBImage(rgb), DepthImage(depth), LabelMap(label), id=f"synth-{params.seed}")


def generate_corpus(
    root: str | Path,
    count: int,
    params: SynthParams,
    ratios: tuple[float, float, float] = (0.5, 0.25, 0.25),
) -> dict[str, list[str]]:
    """Write `count` samples in DRNO layout plus a per-split manifest."""
    if count <= 0:
        raise GridError("corpus size must be positive")
    root = Path(root)
    seeds = np.random.SeedSequence(params.seed).generate_state(count)
    ids = []
    for i in range(count):
        sample = synth_scene(replace(params, seed=int(seeds[i])))
        sample_id = f"{i:05d}"
        save_sample(root, Sample(sample.rgb, sample.depth, sample.label, sample_id))
        ids.append(sample_id)
    train, val, test = split_ids(ids, seed=params.seed, ratios=ratios)
    splits = {"train": train, "val": val, "test": test}
    write_manifest(root, splits)
    return splits


# ---------------------------------------------------------------------------
# tensors and augmentation

def horizontal_flip(sample: Sample) -> Sample:
    return Sample(
        RGBImage(sample.rgb.data[:, :, ::-1].copy()),
        DepthImage(sample.depth.data[:, ::-1].copy()),
        LabelMap(sample.label.data[:, ::-1].copy()),
        sample.id,
    )


def collate(samples: Iterable[Sample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into (rgb, raw depth, label) batch tensors."""
    rgbs, depths, labels = [], [], []
    for s in samples:
        rgbs.append(torch.from_numpy(s.rgb.data.astype(np.float32)))
        depths.append(torch.from_numpy(s.depth.data.astype(np.float32)).unsqueeze(0))
        labels.append(torch.from_numpy(s.label.data.astype(np.int64)))
    return torch.stack(rgbs), torch.stack(depths), torch.stack(labels)


def depth_divisor_for(samples: Iterable[Sample], percentile: float = 99.0) -> float:
    """Normalization divisor: the given percentile of all valid depth readings."""
    values = [s.depth.data[s.depth.data > 0] for s in samples]
    stacked = np.concatenate([v.ravel() for v in values]) if values else np.empty(0)
    if stacked.size == 0:
        return 1000.0
    return float(np.percentile(stacked, percentile))


def mask_of(sample: Sample) -> Mask:
    from .maskgen import generate_mask

    return generate_mask(sample.depth)
