"""Region priors: random boxes, SLIC superpixels and Felzenszwalb-Huttenlocher segments."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Region:
    """A box on one frame, in normalized ``[0, 1]`` image coordinates."""

    t: int
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (0.0 <= self.xmin < self.xmax <= 1.0 and 0.0 <= self.ymin < self.ymax <= 1.0):
            raise ValueError(f"invalid region box {self}")
        if self.t < 0:
            raise ValueError(f"negative frame index in {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.ymin + self.ymax), 0.5 * (self.xmin + self.xmax)


@dataclass
class RegionGenConfig:
    method: str = "random"
    boxes_per_frame: int = 8
    aspect_range: list[float] = field(default_factory=lambda: [0.5, 2.0])
    size_range: list[float] = field(default_factory=lambda: [0.1, 0.5])
    size_mode: str = "area"
    slic_k: int = 16
    slic_compactness: float = 10.0
    slic_iters: int = 10
    fh_scale: float = 500.0
    fh_min_size: int = 500
    box_filter: list[float] = field(default_factory=lambda: [0.05, 0.7])
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("random", "slic", "fh"):
            raise ValueError(f"unknown region method {self.method!r}")
        for name in ("aspect_range", "size_range", "box_filter"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {[lo, hi]}")
        if self.size_mode not in ("area", "side"):
            raise ValueError(f"unknown size_mode {self.size_mode!r}")
        if self.boxes_per_frame < 1 or self.slic_k < 1 or self.fh_min_size < 1 or self.fh_scale <= 0:
            raise ValueError("region counts and scales must be positive")


# ---------------------------------------------------------------------------
# random boxes


def gen_random_boxes(frame: tuple[int, int], config: RegionGenConfig, rng: np.random.Generator,
                     t: int = 0) -> list[Region]:
    """Rejection-sample ``boxes_per_frame`` boxes with bounded aspect ratio and size.

    Aspect ratio is pixel width over pixel height, drawn log-uniformly. Size is
    the area fraction of the frame (``size_mode="area"``) or the side length of
    the equal-area square as a fraction of the frame side (``"side"``).
    """
    height, width = frame
    lo_a, hi_a = config.aspect_range
    lo_s, hi_s = config.size_range
    boxes: list[Region] = []
    while len(boxes) < config.boxes_per_frame:
        aspect = math.exp(rng.uniform(math.log(lo_a), math.log(hi_a)))
        size = rng.uniform(lo_s, hi_s)
        area = size if config.size_mode == "area" else size * size
        w = math.sqrt(area * aspect * height / width)
        h = math.sqrt(area / aspect * width / height)
        # w, h are normalized; pixel aspect is (w * width) / (h * height) = aspect
        if w > 1.0 or h > 1.0:
            continue
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        boxes.append(Region(t, x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0)))
    return boxes


# ---------------------------------------------------------------------------
# SLIC


def _grid_centers(height: int, width: int, k: int) -> np.ndarray:
    step = math.sqrt(height * width / k)
    rows = max(1, int(round(height / step)))
    cols = max(1, int(round(width / step)))
    ys = (np.arange(rows) + 0.5) * height / rows
    xs = (np.arange(cols) + 0.5) * width / cols
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1) - 0.5


def _relabel(labels: np.ndarray) -> np.ndarray:
    _, inverse = np.unique(labels, return_inverse=True)
    return inverse.reshape(labels.shape).astype(np.int64)


def slic_segment(image: np.ndarray, k: int = 16, compactness: float = 10.0, iters: int = 10,
                 enforce_connectivity: bool = True) -> np.ndarray:
    """SLIC superpixels on an RGB image with values in ``[0, 1]``.

    Distance is ``||color|| + (compactness / S) * ||xy||`` with grid step
    ``S = sqrt(H*W/k)``; each center only claims pixels in its ``2S x 2S``
    window. One assignment pass runs on the initial grid, followed by
    ``iters`` rounds of center update and reassignment.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    if k > height * width:
        raise ValueError(f"slic: k={k} exceeds pixel count {height * width}")
    step = math.sqrt(height * width / k)
    centers_yx = _grid_centers(height, width, k)
    yi, xi = np.clip(np.round(centers_yx).astype(int), 0, [height - 1, width - 1]).T
    centers_rgb = image[yi, xi].copy()
    yy, xx = np.mgrid[0:height, 0:width]
    weight = compactness / step

    def assign():
        best = np.full((height, width), np.inf)
        labels = np.zeros((height, width), dtype=np.int64)
        for c, ((cy, cx), rgb) in enumerate(zip(centers_yx, centers_rgb)):
            y0, y1 = max(0, int(math.floor(cy - step))), min(height, int(math.ceil(cy + step)) + 1)
            x0, x1 = max(0, int(math.floor(cx - step))), min(width, int(math.ceil(cx + step)) + 1)
            patch = image[y0:y1, x0:x1]
            dc = np.sqrt(((patch - rgb) ** 2).sum(-1))
            ds = np.sqrt((yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2)
            d = dc + weight * ds
            win = d < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1][win] = d[win]
            labels[y0:y1, x0:x1][win] = c
        # pixels outside every window fall back to the nearest center in xy
        orphan = ~np.isfinite(best)
        if orphan.any():
            d = (yy[orphan][:, None] - centers_yx[:, 0]) ** 2 + (xx[orphan][:, None] - centers_yx[:, 1]) ** 2
            labels[orphan] = d.argmin(1)
        return labels

    labels = assign()
    for _ in range(iters):
        for c in range(len(centers_yx)):
            mask = labels == c
            if mask.any():
                centers_yx[c] = yy[mask].mean(), xx[mask].mean()
                centers_rgb[c] = image[mask].mean(0)
        labels = assign()
    if enforce_connectivity:
        labels = _enforce_connectivity(labels)
    return _relabel(labels)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge every non-largest connected piece of a label into its largest adjacent label."""
    labels = labels.copy()
    changed = True
    while changed:
        changed = False
        for lab in np.unique(labels):
            comps, n = ndimage.label(labels == lab)
            if n <= 1:
                continue
            sizes = ndimage.sum(np.ones_like(comps), comps, index=np.arange(1, n + 1))
            keep = int(np.argmax(sizes)) + 1
            for piece in range(1, n + 1):
                if piece == keep:
                    continue
                mask = comps == piece
                ring = ndimage.binary_dilation(mask) & ~mask
                neighbours = labels[ring]
                neighbours = neighbours[neighbours != lab]
                if neighbours.size == 0:
                    continue
                cand, _ = np.unique(neighbours, return_counts=True)
                label_sizes = np.array([(labels == c).sum() for c in cand])
                labels[mask] = cand[int(np.argmax(label_sizes))]
                changed = True
    return labels


# ---------------------------------------------------------------------------
# Felzenszwalb-Huttenlocher


def grid_edges(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-connected grid edges ``(a, b, weight)`` with Euclidean color weights."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    height, width = image.shape[:2]
    idx = np.arange(height * width).reshape(height, width)
    src, dst = [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        ys = slice(0, height - dy)
        if dx >= 0:
            a = idx[ys, 0:width - dx]
            b = idx[dy:, dx:]
        else:
            a = idx[ys, -dx:]
            b = idx[dy:, :width + dx]
        src.append(a.ravel())
        dst.append(b.ravel())
    a = np.concatenate(src)
    b = np.concatenate(dst)
    flat = image.reshape(-1, image.shape[-1])
    w = np.sqrt(((flat[a] - flat[b]) ** 2).sum(-1))
    return a, b, w


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int, weight: float) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def fh_segment(image: np.ndarray, scale: float, min_size: int) -> np.ndarray:
    """Graph-based segmentation of an image (values on any consistent scale).

    Edges are processed in nondecreasing weight order; two components merge
    when the edge weight does not exceed either component's internal
    difference plus ``scale / size``. Components smaller than ``min_size``
    are then merged across their lowest-weight edges.
    """
    if scale <= 0 or min_size < 1:
        raise ValueError(f"fh: need scale > 0 and min_size >= 1, got {scale}, {min_size}")
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    a, b, w = grid_edges(image)
    order = np.argsort(w, kind="stable")
    a, b, w = a[order].tolist(), b[order].tolist(), w[order].tolist()
    ds = _DisjointSet(height * width)
    for u, v, wt in zip(a, b, w):
        ru, rv = ds.find(u), ds.find(v)
        if ru == rv:
            continue
        if wt <= min(ds.internal[ru] + scale / ds.size[ru], ds.internal[rv] + scale / ds.size[rv]):
            ds.union(ru, rv, wt)
    for u, v in zip(a, b):
        ru, rv = ds.find(u), ds.find(v)
        if ru != rv and (ds.size[ru] < min_size or ds.size[rv] < min_size):
            ds.union(ru, rv, ds.internal[ru])
    roots = np.array([ds.find(i) for i in range(height * width)])
    return _relabel(roots.reshape(height, width))


# ---------------------------------------------------------------------------
# segments to boxes


def segments_to_boxes(labels: np.ndarray, ratio_range: Iterable[float] = (0.05, 0.7), t: int = 0) -> list[Region]:
    """Minimal bounding box per label, kept when width and height ratios lie in ``ratio_range``."""
    lo, hi = ratio_range
    labels = np.asarray(labels)
    height, width = labels.shape
    boxes = []
    for sl in ndimage.find_objects(labels + 1):
        if sl is None:
            continue
        ys, xs = sl
        bw = (xs.stop - xs.start) / width
        bh = (ys.stop - ys.start) / height
        if lo <= bw <= hi and lo <= bh <= hi:
            boxes.append(Region(t, xs.start / width, ys.start / height, xs.stop / width, ys.stop / height))
    return boxes


def generate_regions(frame: np.ndarray, config: RegionGenConfig, rng: np.random.Generator, t: int = 0) -> list[Region]:
    """Region priors for one ``[H, W, 3]`` frame with values in ``[0, 1]``."""
    if config.method == "random":
        return gen_random_boxes(frame.shape[:2], config, rng, t)
    if config.method == "slic":
        labels = slic_segment(frame, config.slic_k, config.slic_compactness, config.slic_iters)
    else:
        labels = fh_segment(np.asarray(frame) * 255.0, config.fh_scale, config.fh_min_size)
    return segments_to_boxes(labels, config.box_filter, t)


# ---------------------------------------------------------------------------
# box files


def region_to_json(region: Region, **extra) -> dict:
    return {"frame": region.t, "xmin": region.xmin, "ymin": region.ymin, "xmax": region.xmax,
            "ymax": region.ymax, **extra}


def write_box_file(path: str | os.PathLike, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_box_file(path: str | os.PathLike) -> list[dict]:
    """Parse a box file; each row keeps its extra keys and gains a ``region``."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                row["region"] = Region(int(row["frame"]), row["xmin"], row["ymin"], row["xmax"], row["ymax"])
            except KeyError as e:
                raise ValueError(f"{path}:{lineno}: missing key {e}") from None
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            out.append(row)
    return out
