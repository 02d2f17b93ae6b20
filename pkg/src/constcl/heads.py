"""Region pooling and projection heads.

``st_roialign`` pools one C-vector per box from a single feature frame. The
global head is a plain MLP; the region heads map a pooled region feature to
its projection, either with an MLP (no context) or with a cross-attention
stack over context tokens from the other view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import AttentionSpec, Params
from .regions import Region
from .tensor import ShapeError, Tensor, l2_normalize, matmul, reshape, slice_


@dataclass
class ContextSet:
    """Context tokens ``[M, C]`` with their (t, y, x) feature-grid positions."""

    tokens: Tensor
    positions: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class HeadConfig:
    global_hidden: int = 128
    global_out: int = 128
    global_layers: int = 3
    region_hidden: int = 128
    region_layers: int = 3
    attention: AttentionSpec = None
    roi_bins: int = 4
    roi_samples: int = 2
    roi_mode: str = "integral"

    def __post_init__(self):
        if self.attention is None:
            self.attention = AttentionSpec()
        elif isinstance(self.attention, dict):
            self.attention = AttentionSpec(**self.attention)


# ---------------------------------------------------------------------------
# ROIAlign


def _axis_point_weights(p: np.ndarray, n: int) -> np.ndarray:
    """Linear-interpolation weights ``[len(p), n]`` at index-space points, clamped to the border."""
    p = np.clip(p, 0.0, n - 1)
    lo = np.floor(p).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = p - lo
    out = np.zeros((len(p), n))
    rows = np.arange(len(p))
    np.add.at(out, (rows, lo), 1 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


def _axis_mean_weights(a: float, b: float, n: int) -> np.ndarray:
    """Exact mean over ``[a, b]`` of the clamped linear-interpolation weights."""
    cuts = np.arange(np.ceil(a), np.floor(b) + 1)
    edges = np.concatenate([[a], cuts[(cuts > a) & (cuts < b)], [b]])
    lengths = np.diff(edges)
    # weights are linear between integer breakpoints, so midpoints integrate exactly
    mids = 0.5 * (edges[:-1] + edges[1:])
    return (_axis_point_weights(mids, n) * lengths[:, None]).sum(0) / (b - a)


def roi_weights(region: Region, height: int, width: int, bins: int = 4, samples: int = 2,
                mode: str = "integral") -> np.ndarray:
    """Row vector ``[H*W]`` such that ``weights @ frame.reshape(H*W, C)`` is the pooled feature.

    The box is scaled to feature-grid units (cell ``i`` spans ``[i, i+1)``,
    its value sits at the center) and split into ``bins x bins`` cells whose
    outputs are averaged. ``mode="integral"`` averages the bilinear
    interpolant exactly over each bin; ``mode="points"`` samples
    ``samples x samples`` regularly spaced points per bin instead.
    """
    if region.xmax <= region.xmin or region.ymax <= region.ymin:
        raise ValueError(f"roialign: degenerate box {region}")
    y0, y1 = region.ymin * height - 0.5, region.ymax * height - 0.5
    x0, x1 = region.xmin * width - 0.5, region.xmax * width - 0.5
    if mode == "points":
        k = bins * samples
        offs = (np.arange(k) + 0.5) / k
        wy = _axis_point_weights(y0 + offs * (y1 - y0), height).mean(0)
        wx = _axis_point_weights(x0 + offs * (x1 - x0), width).mean(0)
    elif mode == "integral":
        ey = np.linspace(y0, y1, bins + 1)
        ex = np.linspace(x0, x1, bins + 1)
        wy = np.mean([_axis_mean_weights(ey[i], ey[i + 1], height) for i in range(bins)], axis=0)
        wx = np.mean([_axis_mean_weights(ex[i], ex[i + 1], width) for i in range(bins)], axis=0)
    else:
        raise ValueError(f"roialign: unknown mode {mode!r}")
    return np.outer(wy, wx).ravel()


def st_roialign(feature: Tensor, regions: list[Region], bins: int = 4, samples: int = 2,
                mode: str = "integral") -> Tensor:
    """Pool ``[R, C]`` region vectors from one clip's feature map ``[T, H, W, C]``.

    Each region reads only its own frame ``region.t``.
    """
    if feature.ndim != 4:
        raise ShapeError(f"roialign: expected [T,H,W,C] feature map, got {list(feature.shape)}")
    t_len, height, width, c = feature.shape
    if not regions:
        raise ValueError("roialign: no regions")
    for r in regions:
        if not 0 <= r.t < t_len:
            raise IndexError(f"roialign: frame {r.t} outside feature map of {t_len} frames")
    frames = sorted({r.t for r in regions})
    if len(frames) == 1:
        t = frames[0]
        flat = reshape(slice_(feature, [t], [t + 1]), (height * width, c))
        w = np.stack([roi_weights(r, height, width, bins, samples, mode) for r in regions])
    else:
        flat = reshape(feature, (t_len * height * width, c))
        w = np.zeros((len(regions), t_len * height * width))
        for i, r in enumerate(regions):
            w[i, r.t * height * width:(r.t + 1) * height * width] = roi_weights(r, height, width, bins, samples, mode)
    return matmul(Tensor(w.astype(feature.dtype)), flat)


def region_positions(regions: list[Region], height: int, width: int) -> np.ndarray:
    """(t, y, x) of each box center in feature-grid index coordinates."""
    return np.array([[r.t, r.center[0] * height - 0.5, r.center[1] * width - 0.5] for r in regions], dtype=np.float64)


# ---------------------------------------------------------------------------
# heads


def init_heads(params: Params, channels: int, config: HeadConfig, rng: np.random.Generator, dtype=np.float64) -> None:
    g = config.global_hidden
    nn.init_mlp(params, "global_head", [channels] + [g] * (config.global_layers - 1) + [config.global_out], rng, dtype)
    r = config.region_hidden
    nn.init_mlp(params, "region_head", [channels] + [r] * (config.region_layers - 1) + [channels], rng, dtype)
    d = config.attention.hidden_dim
    nn.init_linear(params, "context_head.query_in", channels, d, rng, dtype)
    nn.init_linear(params, "context_head.kv_in", channels, d, rng, dtype)
    nn.init_cross_attention(params, "context_head.attn", config.attention, rng, dtype)
    nn.init_linear(params, "context_head.out", d, channels, rng, dtype)


def global_head_forward(pooled: Tensor, params: Params, layers: int = 3) -> Tensor:
    """MLP projection of pooled clip features, ℓ2-normalized."""
    w = params["global_head.fc0.kernel"]
    if pooled.shape[-1] != w.shape[0]:
        raise ShapeError(f"global head: input dim {pooled.shape[-1]} != {w.shape[0]}")
    return l2_normalize(nn.mlp(pooled, params, "global_head", layers), axis=-1)


def vanilla_region_head_forward(h: Tensor, params: Params, layers: int = 3) -> Tensor:
    """MLP projection of pooled region features ``[R, C]``, ℓ2-normalized."""
    w = params["region_head.fc0.kernel"]
    if h.shape[-1] != w.shape[0]:
        raise ShapeError(f"region head: input dim {h.shape[-1]} != {w.shape[0]}")
    return l2_normalize(nn.mlp(h, params, "region_head", layers), axis=-1)


def context_head_forward(h: Tensor, query_positions: np.ndarray, ctx: ContextSet, params: Params,
                         spec: AttentionSpec) -> Tensor:
    """Transform region features ``h [R, C]`` conditioned on context tokens.

    Each region is an independent query token; all queries share the same
    key/value tokens. Output is ``[R, C]``, ℓ2-normalized.
    """
    if len(ctx) == 0:
        raise ValueError("context head: empty context set (use the vanilla region head)")
    d = spec.hidden_dim
    q = nn.linear(h, params, "context_head.query_in")
    kv = nn.linear(ctx.tokens, params, "context_head.kv_in")
    q_pos = Tensor(nn.sincos_encode(query_positions, d).astype(h.dtype))
    kv_pos = Tensor(nn.sincos_encode(ctx.positions, d).astype(h.dtype))
    x = nn.multi_head_cross_attention(q, kv, spec, params, "context_head.attn", q_pos, kv_pos)
    return l2_normalize(nn.linear(x, params, "context_head.out"), axis=-1)
