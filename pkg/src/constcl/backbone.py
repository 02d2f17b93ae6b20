"""Width-reduced 3D ResNet with a duplicated last stage (the "Y" topology).

The trunk (stem, res2..res4) produces C4. Two structurally identical,
independently initialized res5 stacks then produce C5_g (global branch) and
C5_r (region branch), each ending in a final normalization layer.

Blocks are pre-activation basic blocks: ``x + conv(relu(norm(conv(relu(norm(x))))))``
with a strided 1x1x1 projection on the shortcut when the shape changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import BatchNormState, ConvSpec, Params
from .tensor import ShapeError, Tensor, add, relu


@dataclass
class BackboneConfig:
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    strides: list[list[int]] = field(default_factory=lambda: [[1, 1, 1], [2, 2, 2], [1, 2, 2], [1, 2, 2]])
    stem_stride: list[int] = field(default_factory=lambda: [2, 2, 2])
    stem_kernel: list[int] = field(default_factory=lambda: [3, 3, 3])
    in_channels: int = 3
    norm: str = "group"
    groups: int = 4
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if len(self.widths) != 4 or len(self.blocks) != 4 or len(self.strides) != 4:
            raise ValueError("backbone: widths, blocks and strides need exactly 4 stages (res2..res5)")
        if min(self.widths) < 1 or min(self.blocks) < 1:
            raise ValueError(f"backbone: widths {self.widths} and blocks {self.blocks} must be positive")
        for s in self.strides + [self.stem_stride, self.stem_kernel]:
            if len(s) != 3 or min(s) < 1:
                raise ValueError(f"backbone: invalid stride/kernel triple {s}")
        if self.norm not in ("group", "batch"):
            raise ValueError(f"backbone: unknown norm mode {self.norm!r}")
        if self.norm == "group" and any(w % self.groups for w in self.widths):
            raise ValueError(f"backbone: {self.groups} groups do not divide widths {self.widths}")

    @property
    def temporal_stride(self) -> int:
        """Input frames per feature frame at C4/C5."""
        return int(np.prod([self.stem_stride[0]] + [s[0] for s in self.strides]))

    @property
    def spatial_stride(self) -> tuple[int, int]:
        return (
            int(np.prod([self.stem_stride[1]] + [s[1] for s in self.strides])),
            int(np.prod([self.stem_stride[2]] + [s[2] for s in self.strides])),
        )


@dataclass(frozen=True)
class ClipMeta:
    """Where a clip came from: first source frame and source frames per clip frame."""

    start: int = 0
    frame_stride: int = 1


@dataclass
class FeatureMap:
    values: Tensor
    clip_meta: list[ClipMeta]
    temporal_stride: int = 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def video_frame(self, n: int, t: int) -> int:
        m = self.clip_meta[n]
        return m.start + t * m.frame_stride * self.temporal_stride


@dataclass
class EndpointSet:
    C4: FeatureMap
    C5_g: FeatureMap
    C5_r: FeatureMap


@dataclass
class Backbone:
    config: BackboneConfig
    params: Params
    buffers: dict[str, BatchNormState]

    def forward(self, clips: Tensor, clip_meta: list[ClipMeta] | None = None, training: bool = True) -> EndpointSet:
        return backbone_forward(clips, self, clip_meta, training)


def _conv_spec(kernel, stride, cin, cout) -> ConvSpec:
    return ConvSpec(tuple(kernel), tuple(stride), tuple(k // 2 for k in kernel), cin, cout)


def _stage_plan(config: BackboneConfig):
    """Yield ``(prefix, cin, cout, stride)`` per residual block of trunk and branches."""
    plan = {"trunk": [], "branch_g": [], "branch_r": []}
    cin = config.widths[0]
    for stage, (width, nblocks, stride) in enumerate(zip(config.widths, config.blocks, config.strides)):
        for b in range(nblocks):
            s = stride if b == 0 else [1, 1, 1]
            if stage < 3:
                plan["trunk"].append((f"trunk.res{stage + 2}.block{b}", cin, width, s))
            else:
                for br in ("branch_g", "branch_r"):
                    plan[br].append((f"{br}.res5.block{b}", cin, width, s))
            cin = width
    return plan


def backbone_init(config: BackboneConfig) -> Backbone:
    config.validate()
    dtype = np.dtype(config.dtype)
    root = np.random.SeedSequence(config.seed)
    trunk_ss, g_ss, r_ss = root.spawn(3)
    rngs = {
        "trunk": np.random.default_rng(trunk_ss),
        "branch_g": np.random.default_rng(g_ss),
        "branch_r": np.random.default_rng(r_ss),
    }
    params: Params = {}
    buffers: dict[str, BatchNormState] = {}

    def add_norm(name, channels):
        nn.init_norm(params, name, channels, dtype)
        if config.norm == "batch":
            buffers[name] = BatchNormState(np.zeros(channels, dtype), np.ones(channels, dtype))

    stem = _conv_spec(config.stem_kernel, config.stem_stride, config.in_channels, config.widths[0])
    nn.init_conv(params, "trunk.stem", stem, rngs["trunk"], dtype, bias=False)
    for branch, blocks in _stage_plan(config).items():
        rng = rngs[branch]
        for prefix, cin, cout, stride in blocks:
            add_norm(f"{prefix}.norm1", cin)
            add_norm(f"{prefix}.norm2", cout)
            nn.init_conv(params, f"{prefix}.conv1", _conv_spec((3, 3, 3), stride, cin, cout), rng, dtype, bias=False)
            nn.init_conv(params, f"{prefix}.conv2", _conv_spec((3, 3, 3), (1, 1, 1), cout, cout), rng, dtype, bias=False)
            if list(stride) != [1, 1, 1] or cin != cout:
                nn.init_conv(params, f"{prefix}.proj", _conv_spec((1, 1, 1), stride, cin, cout), rng, dtype, bias=False)
        if branch != "trunk":
            add_norm(f"{branch}.final", config.widths[3])
    return Backbone(config, params, buffers)


def parameter_count(config: BackboneConfig) -> int:
    """Closed-form parameter count for ``config``."""
    w = config.widths
    total = int(np.prod(config.stem_kernel)) * config.in_channels * w[0]
    for branch, blocks in _stage_plan(config).items():
        for _, cin, cout, stride in blocks:
            total += 2 * cin + 2 * cout + 27 * cin * cout + 27 * cout * cout
            if list(stride) != [1, 1, 1] or cin != cout:
                total += cin * cout
        if branch != "trunk":
            total += 2 * w[3]
    return total


def _norm(x: Tensor, model: Backbone, name: str, training: bool) -> Tensor:
    cfg = model.config
    return nn.norm_layer(x, model.params, name, cfg.norm, cfg.groups, model.buffers.get(name), training)


def _block(x: Tensor, model: Backbone, prefix: str, cin: int, cout: int, stride, training: bool) -> Tensor:
    p = model.params
    h = relu(_norm(x, model, f"{prefix}.norm1", training))
    if f"{prefix}.proj.kernel" in p:
        shortcut = nn.conv3d(h, p[f"{prefix}.proj.kernel"], None, _conv_spec((1, 1, 1), stride, cin, cout))
    else:
        shortcut = x
    h = nn.conv3d(h, p[f"{prefix}.conv1.kernel"], None, _conv_spec((3, 3, 3), stride, cin, cout))
    h = relu(_norm(h, model, f"{prefix}.norm2", training))
    h = nn.conv3d(h, p[f"{prefix}.conv2.kernel"], None, _conv_spec((3, 3, 3), (1, 1, 1), cout, cout))
    return add(h, shortcut)


def backbone_forward(clips: Tensor, model: Backbone, clip_meta: list[ClipMeta] | None = None,
                     training: bool = True) -> EndpointSet:
    """Run ``clips [N,T,H,W,3]`` through trunk and both branches."""
    cfg = model.config
    if clips.ndim != 5 or clips.shape[-1] != cfg.in_channels:
        raise ShapeError(f"backbone: expected [N,T,H,W,{cfg.in_channels}] clips, got {list(clips.shape)}")
    if clips.dtype != np.dtype(cfg.dtype):
        raise TypeError(f"backbone: clips are {clips.dtype}, parameters are {cfg.dtype}")
    n = clips.shape[0]
    meta = list(clip_meta) if clip_meta is not None else [ClipMeta()] * n
    if len(meta) != n:
        raise ValueError(f"backbone: {len(meta)} clip_meta entries for {n} clips")
    stem = _conv_spec(cfg.stem_kernel, cfg.stem_stride, cfg.in_channels, cfg.widths[0])
    x = nn.conv3d(clips, model.params["trunk.stem.kernel"], None, stem)
    plan = _stage_plan(cfg)
    for prefix, cin, cout, stride in plan["trunk"]:
        x = _block(x, model, prefix, cin, cout, stride, training)
    c4 = x
    outs = {}
    for branch in ("branch_g", "branch_r"):
        y = c4
        for prefix, cin, cout, stride in plan[branch]:
            y = _block(y, model, prefix, cin, cout, stride, training)
        outs[branch] = _norm(y, model, f"{branch}.final", training)
    ts = cfg.temporal_stride
    c4_stride = ts // cfg.strides[3][0]
    return EndpointSet(
        C4=FeatureMap(c4, meta, c4_stride),
        C5_g=FeatureMap(outs["branch_g"], meta, ts),
        C5_r=FeatureMap(outs["branch_r"], meta, ts),
    )


def branch_parameters(params: Params, branch: str) -> dict[str, Tensor]:
    """Parameters belonging to ``trunk``, ``branch_g`` or ``branch_r``."""
    return {k: v for k, v in params.items() if k.startswith(branch + ".")}
