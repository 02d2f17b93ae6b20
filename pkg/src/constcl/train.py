"""Optimizer, learning-rate schedule, the training step and checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cstt
from .backbone import Backbone, BackboneConfig, ClipMeta, backbone_init
from .heads import (
    HeadConfig,
    context_head_forward,
    global_head_forward,
    init_heads,
    region_positions,
    st_roialign,
    vanilla_region_head_forward,
)
from .losses import LossConfig, LossReport, dense_loss, global_loss_rows, region_loss, total_loss
from .nn import BatchNormState, Params, global_avg_pool, mlp
from .regions import Region, RegionGenConfig, gen_random_boxes, generate_regions
from .sampling import SamplingConfig, ViewPair, sample_context_frames, sample_view_pair, select_slice_pair
from .tensor import ShapeError, Tensor, backward, concat, getitem, l2_normalize, mean, reshape, stack


@dataclass
class TrainConfig:
    peak_lr: float = 0.2
    warmup_steps: int = 50
    total_steps: int = 500
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 4
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.total_steps <= 0:
            raise ValueError("total_steps must be > 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} outside [0, total_steps={self.total_steps}]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.peak_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("peak_lr, weight_decay must be >= 0 and momentum in [0, 1)")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class Model:
    backbone: Backbone
    heads: Params
    head_config: HeadConfig

    def parameters(self) -> Params:
        return {**self.backbone.params, **self.heads}


def model_init(backbone_config: BackboneConfig, head_config: HeadConfig | None = None) -> Model:
    head_config = head_config or HeadConfig()
    backbone = backbone_init(backbone_config)
    heads: Params = {}
    rng = np.random.default_rng(np.random.SeedSequence([backbone_config.seed, 1]))
    init_heads(heads, backbone_config.widths[3], head_config, rng, np.dtype(backbone_config.dtype))
    return Model(backbone, heads, head_config)


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then half-period cosine decay to zero."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    peak, warm, total = config.peak_lr, config.warmup_steps, config.total_steps
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


def decays(name: str) -> bool:
    """Weight decay applies to kernels only, never to biases or norm affine parameters."""
    return name.endswith(".kernel")


def sgd_momentum_step(params: Params, grads: dict[str, Tensor], state: OptimizerState, lr: float,
                      config: TrainConfig) -> None:
    """In-place SGD with momentum; parameters without a gradient entry are left untouched."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if gd.shape != p.shape:
            raise ShapeError(f"sgd: gradient for {name} has shape {list(gd.shape)}, parameter {list(p.shape)}")
        if decays(name) and config.weight_decay:
            gd = gd + config.weight_decay * p.data
        v = state.velocity.get(name)
        v = gd.astype(p.dtype, copy=True) if v is None else (config.momentum * v + gd).astype(p.dtype)
        state.velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype)
    state.step += 1


# ---------------------------------------------------------------------------
# batches


@dataclass
class StepBatch:
    """Both views of ``N`` videos stacked as ``[2N, T, H, W, 3]`` (view A rows first)."""

    clips: np.ndarray
    meta: list[ClipMeta]
    slices: list[tuple[int, int]]
    regions_a: list[list[Region]]
    regions_b: list[list[Region]]

    @property
    def size(self) -> int:
        return len(self.slices)


def prepare_batch(pairs: list[ViewPair], sampling: SamplingConfig, regions: RegionGenConfig,
                  temporal_stride: int, rng: np.random.Generator) -> StepBatch:
    if not pairs:
        raise ValueError("empty batch")
    t_feat = max(1, sampling.clip_length // temporal_stride)
    clips = [p.x for p in pairs] + [p.x_prime for p in pairs]
    meta = [ClipMeta(c.source_start, c.frame_stride) for c in clips]
    slices, regs_a, regs_b = [], [], []
    for p in pairs:
        frames = []
        for c in (p.x, p.x_prime):
            frames.append([c.source_start + t * c.frame_stride * temporal_stride for t in range(t_feat)])
        ta, tb = select_slice_pair(sampling.strategy, frames[0], frames[1], rng)
        slices.append((ta, tb))
        regs_a.append(_frame_regions(p.x.frames[ta * temporal_stride], regions, rng, ta))
        regs_b.append(_frame_regions(p.x_prime.frames[tb * temporal_stride], regions, rng, tb))
    return StepBatch(np.stack([c.frames for c in clips]), meta, slices, regs_a, regs_b)


def _frame_regions(frame: np.ndarray, regions: RegionGenConfig, rng: np.random.Generator, t: int) -> list[Region]:
    """Region priors for one frame; a segmentation that leaves no box after filtering falls back to random boxes."""
    boxes = generate_regions(frame, regions, rng, t)
    return boxes if boxes else gen_random_boxes(frame.shape[:2], regions, rng, t)


def sample_batch(dataset, step: int, sampling: SamplingConfig, regions: RegionGenConfig, train: TrainConfig,
                 temporal_stride: int) -> StepBatch:
    """The batch for ``step``; depends only on ``(train.seed, step)``."""
    rng = np.random.default_rng([train.seed, step])
    n = min(train.batch_size, len(dataset))
    idx = rng.choice(len(dataset), size=n, replace=False)
    pairs = [sample_view_pair(_frames(dataset[i]), sampling, rng, int(i)) for i in idx]
    return prepare_batch(pairs, sampling, regions, temporal_stride, rng)


def _frames(video) -> np.ndarray:
    return video.frames if hasattr(video, "frames") else np.asarray(video)


# ---------------------------------------------------------------------------
# forward


@dataclass
class LossParts:
    L_g: Tensor
    L_r: Tensor
    L_g_videos: Tensor
    L_r_videos: Tensor
    match_indices: list
    negatives_count: int


def _pick(x: Tensor, i: int) -> Tensor:
    return reshape(getitem(x, i), x.shape[1:])


def _region_features(fmap: Tensor, regions: list[Region], head: HeadConfig) -> Tensor:
    return l2_normalize(st_roialign(fmap, regions, head.roi_bins, head.roi_samples, head.roi_mode), axis=-1)


def _transform(h: Tensor, regions: list[Region], target_map: Tensor, center: int, model: Model,
               sampling: SamplingConfig, loss: LossConfig) -> Tensor:
    head = model.head_config
    if loss.mode == "vanilla_region" or sampling.context_length == 0:
        return vanilla_region_head_forward(h, model.heads, head.region_layers)
    ctx = sample_context_frames(target_map, center, sampling.context_length)
    _, height, width, _ = target_map.shape
    return context_head_forward(h, region_positions(regions, height, width), ctx, model.heads, head.attention)


def compute_losses(model: Model, batch: StepBatch, loss: LossConfig, sampling: SamplingConfig,
                   training: bool = True) -> LossParts:
    """Forward both views and build ``L_g`` and ``L_r`` (each averaged over the batch)."""
    n = batch.size
    dtype = np.dtype(model.backbone.config.dtype)
    ends = model.backbone.forward(Tensor(batch.clips.astype(dtype, copy=False)), batch.meta, training)
    z = global_head_forward(global_avg_pool(ends.C5_g.values), model.heads, model.head_config.global_layers)
    rows = global_loss_rows(getitem(z, np.arange(n)), getitem(z, np.arange(n, 2 * n)), loss.tau_global)
    lg_videos = (getitem(rows, np.arange(n)) + getitem(rows, np.arange(n, 2 * n))) * 0.5

    fmaps = ends.C5_r.values
    per_video = []
    if loss.mode == "dense":
        per_video, matches, neg_count = _dense_terms(model, fmaps, n, loss)
    else:
        per_video, matches, neg_count = _region_terms(model, fmaps, batch, loss, sampling)
    lr_videos = stack(per_video)
    return LossParts(mean(lg_videos), mean(lr_videos), lg_videos, lr_videos, matches, neg_count)


def _region_terms(model: Model, fmaps: Tensor, batch: StepBatch, loss: LossConfig, sampling: SamplingConfig):
    n = batch.size
    head = model.head_config
    feats = []
    for i, (ta, tb) in enumerate(batch.slices):
        fa, fb = _pick(fmaps, i), _pick(fmaps, n + i)
        h_a = _region_features(fa, batch.regions_a[i], head)
        h_b = _region_features(fb, batch.regions_b[i], head)
        z_a = _transform(h_a, batch.regions_a[i], fb, tb, model, sampling, loss)
        z_b = _transform(h_b, batch.regions_b[i], fa, ta, model, sampling, loss) if loss.symmetric else None
        feats.append((h_a, h_b, z_a, z_b))
    per_video, matches = [], []
    neg_count = 0
    for i, (h_a, h_b, z_a, z_b) in enumerate(feats):
        keep = 4 if loss.region_negatives == "all" else 2
        pool = [t for j, f in enumerate(feats) if j != i for t in f[:keep] if t is not None]
        negatives = concat(pool, axis=0) if pool else None
        neg_count = max(neg_count, 0 if negatives is None else negatives.shape[0])
        tgt_b = h_b.detach() if loss.stop_grad_targets else h_b
        l_ab, idx_ab = region_loss(z_a, tgt_b, h_a, negatives, loss.tau_region, loss.match)
        if loss.symmetric:
            tgt_a = h_a.detach() if loss.stop_grad_targets else h_a
            l_ba, idx_ba = region_loss(z_b, tgt_a, h_b, negatives, loss.tau_region, loss.match)
            per_video.append((l_ab + l_ba) * 0.5)
            matches.append([idx_ab.tolist(), idx_ba.tolist()])
        else:
            per_video.append(l_ab)
            matches.append([idx_ab.tolist()])
    return per_video, matches, neg_count


def _dense_terms(model: Model, fmaps: Tensor, n: int, loss: LossConfig):
    c = fmaps.shape[-1]
    layers = model.head_config.region_layers
    proj, raw = [], []
    for i in range(2 * n):
        f = reshape(_pick(fmaps, i), (-1, c))
        raw.append(l2_normalize(f, axis=-1))
        proj.append(l2_normalize(mlp(f, model.heads, "region_head", layers), axis=-1))
    per_video, matches = [], []
    neg_count = 0
    for i in range(n):
        pool = [proj[j] for j in range(2 * n) if j not in (i, n + i)]
        negatives = concat(pool, axis=0) if pool else None
        neg_count = max(neg_count, 0 if negatives is None else negatives.shape[0])
        l_ab, idx_ab = dense_loss(proj[i], proj[n + i], negatives, loss.tau_region, raw[i], raw[n + i],
                                  loss.match, reduction="mean")
        if loss.symmetric:
            l_ba, idx_ba = dense_loss(proj[n + i], proj[i], negatives, loss.tau_region, raw[n + i], raw[i],
                                      loss.match, reduction="mean")
            per_video.append((l_ab + l_ba) * 0.5)
            matches.append([idx_ab.tolist(), idx_ba.tolist()])
        else:
            per_video.append(l_ab)
            matches.append([idx_ab.tolist()])
    return per_video, matches, neg_count


def objective(parts: LossParts, loss: LossConfig, batch_size: int) -> Tensor:
    """Differentiable total; with ``omega == 0`` the region branch stays out of the graph."""
    if loss.omega == 0:
        return total_loss(parts.L_g_videos, np.zeros(batch_size), 0.0, batch_size)
    return total_loss(parts.L_g_videos, parts.L_r_videos, loss.omega, batch_size)


def train_step(model: Model, batch: StepBatch, state: OptimizerState, train: TrainConfig, loss: LossConfig,
               sampling: SamplingConfig) -> LossReport:
    """One forward/backward/update; the learning rate is taken at ``state.step``."""
    lr = lr_at_step(min(state.step, train.total_steps), train)
    parts = compute_losses(model, batch, loss, sampling, training=True)
    total = objective(parts, loss, batch.size)
    grads = backward(total)
    sgd_momentum_step(model.parameters(), grads, state, lr, train)
    return LossReport(
        L_g=float(parts.L_g.item()),
        L_r=float(parts.L_r.item()),
        L_total=float(total.item()),
        match_indices=parts.match_indices,
        negatives_count=parts.negatives_count,
        step=state.step - 1,
        lr=lr,
    )


def train_loop(model: Model, dataset, state: OptimizerState, train: TrainConfig, loss: LossConfig,
               sampling: SamplingConfig, regions: RegionGenConfig, steps: int | None = None,
               log=None, checkpoint_dir: str | None = None, extra_config: dict | None = None) -> list[LossReport]:
    """Run from ``state.step`` for ``steps`` steps (default: up to ``total_steps``)."""
    end = train.total_steps if steps is None else min(train.total_steps, state.step + steps)
    ts = model.backbone.config.temporal_stride
    reports = []
    while state.step < end:
        batch = sample_batch(dataset, state.step, sampling, regions, train, ts)
        report = train_step(model, batch, state, train, loss, sampling)
        reports.append(report)
        if log is not None and train.log_every and report.step % train.log_every == 0:
            log.write(report.to_json() + "\n")
            log.flush()
        if checkpoint_dir and train.checkpoint_every and state.step % train.checkpoint_every == 0:
            checkpoint_save(model, state, checkpoint_dir, extra_config)
    return reports


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "constcl-checkpoint"
CHECKPOINT_VERSION = 1


def _checkpoint_tensors(model: Model, state: OptimizerState) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v.data for k, v in model.parameters().items()}
    out.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    for k, buf in model.backbone.buffers.items():
        out[f"buffer/{k}/running_mean"] = buf.running_mean
        out[f"buffer/{k}/running_var"] = buf.running_var
    return out


def checkpoint_save(model: Model, state: OptimizerState, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write ``manifest.json`` and ``tensors.bin`` (concatenated CSTT records) under ``path``."""
    os.makedirs(path, exist_ok=True)
    tensors = _checkpoint_tensors(model, state)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        blob = cstt.encode(tensors[name])
        entries.append({"name": name, "offset": offset, "shape": list(tensors[name].shape)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "backbone": asdict(model.backbone.config),
        "heads": _head_config_dict(model.head_config),
        "batch_norm_momentum": {k: b.momentum for k, b in sorted(model.backbone.buffers.items())},
        "tensors": entries,
        "extra": extra or {},
    }
    with open(os.path.join(path, "tensors.bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _head_config_dict(config: HeadConfig) -> dict:
    d = asdict(config)
    d["attention"] = asdict(config.attention)
    return d


def checkpoint_load(path: str | os.PathLike) -> tuple[Model, OptimizerState, dict]:
    """Inverse of :func:`checkpoint_save`; returns ``(model, state, extra)``."""
    manifest_path = os.path.join(path, "manifest.json")
    blob_path = os.path.join(path, "tensors.bin")
    for p in (manifest_path, blob_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise cstt.FormatError(f"{manifest_path}: invalid JSON ({e})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise cstt.FormatError(f"{manifest_path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise cstt.FormatError(f"{manifest_path}: unsupported checkpoint version {manifest.get('version')}")
    with open(blob_path, "rb") as fh:
        buf = fh.read()
    tensors = {}
    end = 0
    for entry in manifest["tensors"]:
        arr, end = cstt.decode(buf, entry["offset"], blob_path)
        if list(arr.shape) != entry["shape"]:
            raise cstt.FormatError(f"{blob_path}: {entry['name']} has shape {list(arr.shape)}, manifest says {entry['shape']}")
        tensors[entry["name"]] = arr
    if end != len(buf):
        raise cstt.FormatError(f"{blob_path}: {len(buf) - end} trailing bytes")

    model = model_init(BackboneConfig(**manifest["backbone"]), HeadConfig(**manifest["heads"]))
    for name, p in model.parameters().items():
        key = f"param/{name}"
        if key not in tensors:
            raise cstt.FormatError(f"{blob_path}: missing parameter {name}")
        p.data = tensors[key].astype(p.dtype, copy=False)
    for name, buf_state in model.backbone.buffers.items():
        buf_state.running_mean = tensors[f"buffer/{name}/running_mean"]
        buf_state.running_var = tensors[f"buffer/{name}/running_var"]
        buf_state.momentum = manifest["batch_norm_momentum"][name]
    velocity = {k[len("velocity/"):]: v for k, v in tensors.items() if k.startswith("velocity/")}
    return model, OptimizerState(velocity, int(manifest["step"])), manifest.get("extra", {})
