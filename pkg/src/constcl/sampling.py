"""Two-view clip sampling, temporal slice selection and context subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .heads import ContextSet
from .regions import Region
from .tensor import Tensor, reshape, slice_


@dataclass
class SamplingConfig:
    strategy: str = "center"
    context_length: int = 4
    clip_length: int = 16
    frame_stride: int = 2
    out_size: list[int] = field(default_factory=lambda: [32, 32])
    crop_area: list[float] = field(default_factory=lambda: [0.3, 1.0])
    crop_aspect: list[float] = field(default_factory=lambda: [0.5, 2.0])
    flip_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in ("random", "center", "nearest"):
            raise ValueError(f"unknown temporal sampling strategy {self.strategy!r}")
        if self.context_length < 0:
            raise ValueError("context_length must be >= 0")
        if self.clip_length < 1 or self.frame_stride < 1:
            raise ValueError("clip_length and frame_stride must be positive")
        if not 0 < self.crop_area[0] <= self.crop_area[1] <= 1:
            raise ValueError(f"crop_area {self.crop_area} must lie in (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    @property
    def span(self) -> int:
        return (self.clip_length - 1) * self.frame_stride + 1


@dataclass(frozen=True)
class AugmentRecord:
    """One crop rectangle (source pixels), one output size and one flip for a whole clip."""

    crop_y: int
    crop_x: int
    crop_h: int
    crop_w: int
    out_h: int
    out_w: int
    flip: bool


@dataclass
class VideoClip:
    frames: np.ndarray
    source_start: int
    frame_stride: int
    augment: AugmentRecord


@dataclass
class ViewPair:
    x: VideoClip
    x_prime: VideoClip
    video_index: int = 0


def _resize_indices(start: int, length: int, out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = start + (np.arange(out) + 0.5) * length / out - 0.5
    pos = np.clip(pos, start, start + length - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, start + length - 1)
    return lo, hi, pos - lo


def apply_augmentation(frames: np.ndarray, aug: AugmentRecord) -> np.ndarray:
    """Crop, bilinearly resize and optionally flip ``frames [T, H, W, 3]`` (or a single frame)."""
    y0, y1, ly = _resize_indices(aug.crop_y, aug.crop_h, aug.out_h)
    x0, x1, lx = _resize_indices(aug.crop_x, aug.crop_w, aug.out_w)
    ly = ly[:, None, None]
    lx = lx[None, :, None]
    f = frames
    top = f[..., y0, :, :][..., x0, :] * (1 - lx) + f[..., y0, :, :][..., x1, :] * lx
    bottom = f[..., y1, :, :][..., x0, :] * (1 - lx) + f[..., y1, :, :][..., x1, :] * lx
    out = top * (1 - ly) + bottom * ly
    if aug.flip:
        out = out[..., :, ::-1, :]
    return np.ascontiguousarray(out, dtype=frames.dtype)


def transform_region(region: Region, aug: AugmentRecord, frame_size: tuple[int, int], t: int) -> Region | None:
    """Map a normalized box on the source frame into the augmented clip; ``None`` if cropped away."""
    height, width = frame_size
    x0 = (region.xmin * width - aug.crop_x) / aug.crop_w
    x1 = (region.xmax * width - aug.crop_x) / aug.crop_w
    y0 = (region.ymin * height - aug.crop_y) / aug.crop_h
    y1 = (region.ymax * height - aug.crop_y) / aug.crop_h
    x0, x1 = max(x0, 0.0), min(x1, 1.0)
    y0, y1 = max(y0, 0.0), min(y1, 1.0)
    if x1 - x0 <= 1e-6 or y1 - y0 <= 1e-6:
        return None
    if aug.flip:
        x0, x1 = 1.0 - x1, 1.0 - x0
    return Region(t, x0, y0, x1, y1)


def sample_augmentation(frame_size: tuple[int, int], config: SamplingConfig, rng: np.random.Generator) -> AugmentRecord:
    height, width = frame_size
    out_h, out_w = config.out_size
    lo_a, hi_a = config.crop_area
    for _ in range(20):
        area = rng.uniform(lo_a, hi_a) * height * width
        aspect = math.exp(rng.uniform(math.log(config.crop_aspect[0]), math.log(config.crop_aspect[1])))
        w = int(round(math.sqrt(area * aspect)))
        h = int(round(math.sqrt(area / aspect)))
        if 1 <= w <= width and 1 <= h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            break
    else:
        y, x, h, w = 0, 0, height, width
    flip = bool(rng.uniform() < config.flip_prob)
    return AugmentRecord(y, x, h, w, out_h, out_w, flip)


def sample_view_pair(video: np.ndarray, config: SamplingConfig, rng: np.random.Generator,
                     video_index: int = 0) -> ViewPair:
    """Two independently placed and augmented clips from ``video [T, H, W, 3]``."""
    n_frames, height, width = video.shape[:3]
    span = config.span
    if n_frames < span:
        raise ValueError(f"video has {n_frames} frames, a clip spans {span}")
    clips = []
    for _ in range(2):
        start = int(rng.integers(0, n_frames - span + 1))
        aug = sample_augmentation((height, width), config, rng)
        raw = video[start:start + span:config.frame_stride]
        clips.append(VideoClip(apply_augmentation(raw, aug), start, config.frame_stride, aug))
    return ViewPair(clips[0], clips[1], video_index)


def select_slice_pair(strategy: str, frames_a, frames_b, rng: np.random.Generator | None = None) -> tuple[int, int]:
    """Pick one feature frame per view.

    ``frames_a``/``frames_b`` give the source-video frame each feature frame
    maps to (ascending). ``nearest`` returns the pair with the smallest
    mapped distance, earliest ``(t_a, t_b)`` on ties.
    """
    fa = np.asarray(frames_a)
    fb = np.asarray(frames_b)
    if fa.size == 0 or fb.size == 0:
        raise ValueError("select_slice_pair: empty feature map")
    if strategy == "center":
        return fa.size // 2, fb.size // 2
    if strategy == "random":
        if rng is None:
            raise ValueError("random slice selection needs an rng")
        return int(rng.integers(fa.size)), int(rng.integers(fb.size))
    if strategy != "nearest":
        raise ValueError(f"unknown strategy {strategy!r}")
    best = (math.inf, 0, 0)
    for ta, frame in enumerate(fa):
        j = int(np.searchsorted(fb, frame))
        for tb in (j - 1, j):
            if 0 <= tb < fb.size:
                d = abs(int(frame) - int(fb[tb]))
                if d < best[0]:
                    best = (d, ta, tb)
    return best[1], best[2]


def sample_context_frames(feature: Tensor, center: int, length: int) -> ContextSet:
    """Tokens from ``length`` frames of ``feature [T, H, W, C]`` around ``center``.

    The window is shifted (not truncated) to stay inside the clip.
    """
    t_len, height, width, c = feature.shape
    if not 0 <= length <= t_len:
        raise ValueError(f"context length {length} outside [0, {t_len}]")
    if length == 0:
        return ContextSet(Tensor(np.zeros((0, c), dtype=feature.dtype)), np.zeros((0, 3)))
    start = min(max(center - length // 2, 0), t_len - length)
    window = slice_(feature, [start], [start + length])
    tokens = reshape(window, (length * height * width, c))
    grid = np.stack(np.meshgrid(np.arange(start, start + length), np.arange(height), np.arange(width),
                                indexing="ij"), axis=-1).reshape(-1, 3)
    return ContextSet(tokens, grid.astype(np.float64))
