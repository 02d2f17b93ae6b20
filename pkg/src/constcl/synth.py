"""Procedural moving-sprite videos and frozen-feature probes.

Videos show sprites (squares, discs, triangles) drifting over a static
textured background. Sprites reflect off the canvas borders. The class
label is the direction bin of the sprites' mean initial velocity.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import cstt
from .regions import Region, read_box_file, region_to_json, write_box_file
from .sampling import AugmentRecord, SamplingConfig, apply_augmentation, sample_view_pair, transform_region

SHAPES = ("square", "disc", "triangle")


@dataclass
class Sprite:
    shape: str
    color: tuple[float, float, float]
    size: float
    y: float
    x: float
    vy: float
    vx: float


@dataclass
class SpriteWorld:
    height: int = 40
    width: int = 40
    sprite_count: int = 4
    num_classes: int = 4
    length: int = 40
    size_range: list[float] = field(default_factory=lambda: [7.0, 11.0])
    speed_range: list[float] = field(default_factory=lambda: [0.4, 0.8])
    direction_jitter: float = 0.35
    texture_strength: float = 0.25
    background_seed: int = -1
    palette: str = "spread"
    shapes: list[str] = field(default_factory=lambda: list(SHAPES))
    static: bool = False


@dataclass
class LabeledVideo:
    frames: np.ndarray
    boxes: list[list[tuple[int, Region]]]
    label: int
    sprites: list[Sprite]

    def gt_regions(self, frame: int) -> dict[int, Region]:
        return {ident: r for ident, r in self.boxes[frame]}


def direction_label(vy: float, vx: float, num_classes: int) -> int:
    angle = math.atan2(-vy, vx) % (2 * math.pi)
    return int(round(angle / (2 * math.pi / num_classes))) % num_classes


def render_sprite(canvas: np.ndarray, sprite: Sprite) -> None:
    """Paint ``sprite`` in place; a pixel is covered when its center lies inside the shape."""
    height, width = canvas.shape[:2]
    y0, x0 = int(math.floor(sprite.y)), int(math.floor(sprite.x))
    y1 = min(height, int(math.ceil(sprite.y + sprite.size)) + 1)
    x1 = min(width, int(math.ceil(sprite.x + sprite.size)) + 1)
    y0, x0 = max(y0, 0), max(x0, 0)
    yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
    u = (xx - sprite.x) / sprite.size
    v = (yy - sprite.y) / sprite.size
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    if sprite.shape == "disc":
        inside &= (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif sprite.shape == "triangle":
        inside &= np.abs(u - 0.5) <= 0.5 * v
    canvas[y0:y1, x0:x1][inside] = sprite.color


def _texture(rng: np.random.Generator, height: int, width: int, strength: float) -> np.ndarray:
    noise = rng.normal(size=(height, width, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(3, 3, 0))
    smooth /= np.abs(smooth).max() + 1e-12
    base = rng.uniform(0.3, 0.7, size=3)
    return np.clip(base + strength * smooth, 0, 1)


def _advance(sprite: Sprite, world: SpriteWorld) -> None:
    for pos, vel, extent in (("y", "vy", world.height), ("x", "vx", world.width)):
        p = getattr(sprite, pos) + getattr(sprite, vel)
        hi = extent - sprite.size
        if p < 0:
            p, flip = -p, True
        elif p > hi:
            p, flip = 2 * hi - p, True
        else:
            flip = False
        setattr(sprite, pos, min(max(p, 0.0), hi))
        if flip:
            setattr(sprite, vel, -getattr(sprite, vel))


def generate_sprite_video(world: SpriteWorld, seed: int, label: int | None = None) -> LabeledVideo:
    """Render one video. With ``label`` given, sprites drift in that class direction."""
    rng = np.random.default_rng(seed)
    lo, hi = world.size_range
    if hi > min(world.height, world.width) or lo <= 0:
        raise ValueError(f"sprite sizes {world.size_range} do not fit a {world.height}x{world.width} canvas")
    if label is None:
        label = int(rng.integers(world.num_classes))
    theta = 2 * math.pi * label / world.num_classes
    sprites = []
    for i in range(world.sprite_count):
        size = float(rng.uniform(lo, hi))
        if world.palette == "random":
            hue = float(rng.uniform())
        else:
            hue = (i / world.sprite_count + rng.uniform(-0.08, 0.08)) % 1.0
        color = tuple(float(c) for c in _hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0)))
        if world.static:
            vy = vx = 0.0
        else:
            speed = rng.uniform(*world.speed_range)
            ang = theta + rng.uniform(-world.direction_jitter, world.direction_jitter)
            vy, vx = -speed * math.sin(ang), speed * math.cos(ang)
        sprites.append(Sprite(
            shape=str(world.shapes[int(rng.integers(len(world.shapes)))]),
            color=color,
            size=size,
            y=float(rng.uniform(0, world.height - size)),
            x=float(rng.uniform(0, world.width - size)),
            vy=vy,
            vx=vx,
        ))
    initial = [Sprite(**asdict(s)) for s in sprites]
    if sprites and not world.static:
        mvy = float(np.mean([s.vy for s in sprites]))
        mvx = float(np.mean([s.vx for s in sprites]))
        label = direction_label(mvy, mvx, world.num_classes)
    bg_rng = rng if world.background_seed < 0 else np.random.default_rng(world.background_seed)
    background = _texture(bg_rng, world.height, world.width, world.texture_strength)
    frames = np.empty((world.length, world.height, world.width, 3), dtype=np.float32)
    boxes = []
    for t in range(world.length):
        canvas = background.copy()
        frame_boxes = []
        for ident, s in enumerate(sprites):
            render_sprite(canvas, s)
            frame_boxes.append((ident, Region(t, s.x / world.width, s.y / world.height,
                                              (s.x + s.size) / world.width, (s.y + s.size) / world.height)))
        frames[t] = canvas
        boxes.append(frame_boxes)
        for s in sprites:
            _advance(s, world)
    return LabeledVideo(frames, boxes, int(label), initial)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def generate_dataset(world: SpriteWorld, count: int, seed: int) -> list[LabeledVideo]:
    """``count`` videos with class labels balanced round-robin."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_sprite_video(world, int(s), label=i % world.num_classes) for i, s in enumerate(seeds)]


# ---------------------------------------------------------------------------
# persistence


def save_dataset(directory: str | os.PathLike, videos: list[LabeledVideo], world: SpriteWorld | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, v in enumerate(videos):
        name = f"video_{i:04d}"
        cstt.save(os.path.join(directory, name + ".cstt"), v.frames)
        rows = [region_to_json(r, id=ident) for frame in v.boxes for ident, r in frame]
        write_box_file(os.path.join(directory, name + ".jsonl"), rows)
        entries.append({"name": name, "video": name + ".cstt", "boxes": name + ".jsonl", "label": v.label})
    manifest = {"videos": entries, "world": asdict(world) if world is not None else None}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(directory: str | os.PathLike) -> list[LabeledVideo]:
    path = os.path.join(directory, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    videos = []
    for entry in manifest["videos"]:
        frames = cstt.load(os.path.join(directory, entry["video"]))
        rows = read_box_file(os.path.join(directory, entry["boxes"]))
        boxes: list[list[tuple[int, Region]]] = [[] for _ in range(frames.shape[0])]
        for row in rows:
            boxes[row["frame"]].append((int(row["id"]), row["region"]))
        videos.append(LabeledVideo(frames, boxes, int(entry["label"]), []))
    return videos


# ---------------------------------------------------------------------------
# probes

# (C5_r [N,T,H,W,C], pooled C5_g [N,C], temporal stride) for clips [N,T,H,W,3]
FeatureFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, int]]


@dataclass
class EvalConfig:
    correspondence_pairs: int = 200
    probe_clips_per_video: int = 2
    probe_test_fraction: float = 0.25
    track_grid: int = 16
    seed: int = 0


def model_features(model, batch_size: int = 8) -> FeatureFn:
    """Wrap a trained model as a frozen feature extractor."""
    from .nn import global_avg_pool
    from .tensor import Tensor

    def fn(clips: np.ndarray):
        c5r, pooled = [], []
        for i in range(0, len(clips), batch_size):
            x = Tensor(np.asarray(clips[i:i + batch_size], dtype=model.backbone.config.dtype))
            ends = model.backbone.forward(x, training=False)
            c5r.append(ends.C5_r.values.data.astype(np.float64))
            pooled.append(global_avg_pool(ends.C5_g.values).data.astype(np.float64))
        return np.concatenate(c5r), np.concatenate(pooled), model.backbone.config.temporal_stride

    return fn


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def correspondence_score(feats_a: np.ndarray, feats_b: np.ndarray, ids_a, ids_b) -> tuple[int, int]:
    """(correct, total) when every view-A region takes its max-cosine view-B region."""
    sim = _normalize_rows(feats_a) @ _normalize_rows(feats_b).T
    pred = np.asarray(ids_b)[np.argmax(sim, axis=1)]
    return int((pred == np.asarray(ids_a)).sum()), len(ids_a)


@dataclass
class CorrespondenceCase:
    clips: np.ndarray
    regions: tuple[list[Region], list[Region]]
    ids: tuple[list[int], list[int]]
    slices: tuple[int, int]


def correspondence_cases(dataset: list[LabeledVideo], sampling: SamplingConfig, pairs: int, seed: int,
                         temporal_stride: int) -> list[CorrespondenceCase]:
    """View pairs with the ground-truth boxes visible in both center slices."""
    from .sampling import select_slice_pair

    rng = np.random.default_rng(seed)
    cases = []
    attempts = 0
    while len(cases) < pairs and attempts < 20 * pairs:
        attempts += 1
        v = int(rng.integers(len(dataset)))
        video = dataset[v]
        pair = sample_view_pair(video.frames, sampling, rng, v)
        t_feat = sampling.clip_length // temporal_stride
        frames = []
        for clip in (pair.x, pair.x_prime):
            frames.append([clip.source_start + t * clip.frame_stride * temporal_stride for t in range(t_feat)])
        ta, tb = select_slice_pair(sampling.strategy, frames[0], frames[1], rng)
        size = video.frames.shape[1:3]
        per_view = []
        for clip, t, fr in ((pair.x, ta, frames[0][ta]), (pair.x_prime, tb, frames[1][tb])):
            mapped = {}
            for ident, r in video.boxes[fr]:
                m = transform_region(r, clip.augment, size, t)
                if m is not None and m.width * m.height > 0.002:
                    mapped[ident] = m
            per_view.append(mapped)
        common = sorted(set(per_view[0]) & set(per_view[1]))
        if len(common) < 2:
            continue
        cases.append(CorrespondenceCase(
            clips=np.stack([pair.x.frames, pair.x_prime.frames]),
            regions=([per_view[0][i] for i in common], [per_view[1][i] for i in common]),
            ids=(common, common),
            slices=(ta, tb),
        ))
    return cases


def correspondence_accuracy(features: FeatureFn, dataset: list[LabeledVideo], sampling: SamplingConfig,
                            config: EvalConfig, roi_bins: int = 4) -> float:
    """Fraction of ground-truth regions whose max-cosine match in the other view has the same identity."""
    from .heads import st_roialign
    from .tensor import Tensor

    _, _, ts = features(np.zeros((1, sampling.clip_length, *sampling.out_size, 3), dtype=np.float32))
    cases = correspondence_cases(dataset, sampling, config.correspondence_pairs, config.seed, ts)
    if not cases:
        return 0.0
    correct = total = 0
    maps, _, _ = features(np.concatenate([c.clips for c in cases]))
    for i, case in enumerate(cases):
        fa = st_roialign(Tensor(maps[2 * i]), case.regions[0], roi_bins).data
        fb = st_roialign(Tensor(maps[2 * i + 1]), case.regions[1], roi_bins).data
        c, n = correspondence_score(fa, fb, *case.ids)
        correct += c
        total += n
    return correct / total


def probe_clips(dataset: list[LabeledVideo], sampling: SamplingConfig, clips_per_video: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unaugmented, evenly spaced clips: ``(clips, labels, video_index)``."""
    span = sampling.span
    clips, labels, owners = [], [], []
    for v, video in enumerate(dataset):
        n, h, w = video.frames.shape[:3]
        aug = AugmentRecord(0, 0, h, w, sampling.out_size[0], sampling.out_size[1], False)
        starts = np.linspace(0, n - span, clips_per_video).round().astype(int)
        for s in starts:
            clips.append(apply_augmentation(video.frames[s:s + span:sampling.frame_stride], aug))
            labels.append(video.label)
            owners.append(v)
    return np.stack(clips), np.array(labels), np.array(owners)


def linear_probe_from_features(features: np.ndarray, labels: np.ndarray, owners: np.ndarray,
                               test_fraction: float = 0.25, seed: int = 0) -> float:
    """Held-out accuracy of a linear classifier, pooled over video-grouped stratified folds.

    Every clip is predicted once by a classifier that never saw its video.
    A dataset with a single class is trivially classified (accuracy 1.0).
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedGroupKFold
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    owners = np.asarray(owners)
    if len(np.unique(labels)) < 2:
        return 1.0
    per_class_videos = min(len(np.unique(owners[labels == c])) for c in np.unique(labels))
    folds = max(2, min(int(round(1.0 / test_fraction)), per_class_videos))
    splitter = StratifiedGroupKFold(n_splits=folds, shuffle=True, random_state=seed)
    correct = 0
    for train_idx, test_idx in splitter.split(features, labels, owners):
        if len(np.unique(labels[train_idx])) < 2:
            correct += int((labels[test_idx] == labels[train_idx][0]).sum())
            continue
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, C=1.0))
        clf.fit(features[train_idx], labels[train_idx])
        correct += int((clf.predict(features[test_idx]) == labels[test_idx]).sum())
    return correct / len(labels)


def linear_probe_eval(features: FeatureFn, dataset: list[LabeledVideo], sampling: SamplingConfig,
                      config: EvalConfig) -> float:
    clips, labels, owners = probe_clips(dataset, sampling, config.probe_clips_per_video)
    _, pooled, _ = features(clips)
    return linear_probe_from_features(pooled, labels, owners, config.probe_test_fraction, config.seed)


def box_iou(a: Region, b: Region) -> float:
    iw = max(0.0, min(a.xmax, b.xmax) - max(a.xmin, b.xmin))
    ih = max(0.0, min(a.ymax, b.ymax) - max(a.ymin, b.ymin))
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def search_grid(init: Region, steps: int, t: int) -> list[Region]:
    """Boxes of ``init``'s size whose corners lie on a ``steps``-per-side lattice (plus ``init`` itself)."""
    w, h = init.width, init.height
    xs = np.unique(np.concatenate([np.arange(steps + 1) / steps, [init.xmin]]))
    ys = np.unique(np.concatenate([np.arange(steps + 1) / steps, [init.ymin]]))
    return [Region(t, float(x), float(y), float(x) + w, float(y) + h)
            for y in ys for x in xs if x + w <= 1.0 and y + h <= 1.0]


def toy_track_eval(features: Callable[[np.ndarray], tuple[np.ndarray, int]], video: LabeledVideo, init: Region,
                   sampling: SamplingConfig, grid: int = 16, roi_bins: int = 4) -> float:
    """Mean IoU of template-matching tracking over the feature frames of the first clip.

    ``features`` maps a clip ``[T, H, W, 3]`` to ``(map [T', H', W', C], temporal stride)``.
    """
    from .heads import st_roialign
    from .tensor import Tensor

    gt0 = video.gt_regions(0)
    target = next((i for i, r in gt0.items() if box_iou(r, init) > 1 - 1e-9), None)
    if target is None:
        raise ValueError(f"tracking init {init} does not match a ground-truth region at frame 0")
    span = sampling.span
    clip = video.frames[0:span:sampling.frame_stride]
    fmap, ts = features(clip)
    fmap = Tensor(np.asarray(fmap, dtype=np.float64))
    template = st_roialign(fmap, [Region(0, init.xmin, init.ymin, init.xmax, init.ymax)], roi_bins).data[0]
    template = template / max(np.linalg.norm(template), 1e-12)
    ious = []
    for t in range(1, fmap.shape[0]):
        cands = search_grid(init, grid, t)
        pooled = st_roialign(fmap, cands, roi_bins).data
        scores = _normalize_rows(pooled) @ template
        best = cands[int(np.argmax(scores))]
        gt = video.gt_regions(t * ts * sampling.frame_stride)[target]
        ious.append(box_iou(best, gt))
    return float(np.mean(ious)) if ious else 1.0


def backbone_track_features(model) -> Callable[[np.ndarray], tuple[np.ndarray, int]]:
    fn = model_features(model)

    def track(clip: np.ndarray):
        maps, _, ts = fn(clip[None])
        return maps[0], ts

    return track
