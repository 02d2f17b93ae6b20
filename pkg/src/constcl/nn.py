"""Neural building blocks on top of :mod:`constcl.tensor`.

Layers are plain functions taking a parameter dict; ``init_*`` helpers fill
such dicts with named leaf tensors. Feature maps are channels-last
``[N, T, H, W, C]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    add,
    concat,
    matmul,
    mean,
    relu,
    reshape,
    softmax,
    transpose,
)

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid conv spec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid channel counts in {self}")

    def out_extent(self, extent: tuple[int, int, int]) -> tuple[int, int, int]:
        out = tuple(
            (n + 2 * p - k) // s + 1 for n, k, s, p in zip(extent, self.kernel, self.stride, self.padding)
        )
        if min(out) < 1:
            raise ShapeError(f"conv3d: input extent {list(extent)} too small for {self}")
        return out


@dataclass(frozen=True)
class AttentionSpec:
    layers: int = 3
    heads: int = 3
    hidden_dim: int = 96
    ffn_dim: int = 192

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of ``x [N,T,H,W,Cin]`` with ``weight [kt,kh,kw,Cin,Cout]``."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d: expected rank-5 input, got {list(x.shape)}")
    if x.shape[-1] != spec.in_channels or weight.shape[3] != spec.in_channels:
        raise ShapeError(
            f"conv3d: channel mismatch, input has {x.shape[-1]}, spec expects {spec.in_channels}, "
            f"kernel has {weight.shape[3]}"
        )
    if tuple(weight.shape) != (*spec.kernel, spec.in_channels, spec.out_channels):
        raise ShapeError(f"conv3d: kernel shape {list(weight.shape)} does not match {spec}")
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.padding
    n, t, h, w, cin = x.shape
    to, ho, wo = spec.out_extent((t, h, w))
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0))) if (pt or ph or pw) else xd
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))[:, ::st, ::sh, ::sw][:, :to, :ho, :wo]
    # win: [N, To, Ho, Wo, Cin, kt, kh, kw]
    wd = weight.data
    w_mat = wd.transpose(3, 0, 1, 2, 4).reshape(cin * kt * kh * kw, spec.out_channels)
    cols = win.reshape(n * to * ho * wo, cin * kt * kh * kw)
    out = (cols @ w_mat).reshape(n, to, ho, wo, spec.out_channels)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, spec.out_channels)
        gw = (cols.T @ g2).reshape(cin, kt, kh, kw, spec.out_channels).transpose(1, 2, 3, 0, 4)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, a:a + st * to:st, b:b + sh * ho:sh, c:c + sw * wo:sw] += g @ wd[a, b, c].T
        gx = gxp[:, pt:pt + t, ph:ph + h, pw:pw + w] if (pt or ph or pw) else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv3d")


def init_conv(params: Params, prefix: str, spec: ConvSpec, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
    fan_in = spec.in_channels * int(np.prod(spec.kernel))
    params[f"{prefix}.kernel"] = Tensor(
        uniform_fan_in(rng, (*spec.kernel, spec.in_channels, spec.out_channels), fan_in, dtype),
        requires_grad=True, name=f"{prefix}.kernel",
    )
    if bias:
        params[f"{prefix}.bias"] = Tensor(
            uniform_fan_in(rng, (spec.out_channels,), fan_in, dtype), requires_grad=True, name=f"{prefix}.bias"
        )


# ---------------------------------------------------------------------------
# normalization


def _affine_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], group_shape, eps: float,
                 stats: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize ``x`` viewed as ``group_shape`` over ``axes``, then scale/shift per channel.

    With ``stats`` given, those (mean, var) are used as constants.
    """
    xd = x.data
    xg = xd.reshape(group_shape)
    if stats is None:
        mu = xg.mean(axis=axes, keepdims=True)
        var = xg.var(axis=axes, keepdims=True)
    else:
        mu, var = stats
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(xd.shape)
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd
    red = tuple(range(xd.ndim - 1))

    def backward(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = (g * gd).reshape(group_shape)
        if stats is not None:
            gx = gx_hat * inv
        else:
            xh = xhat.reshape(group_shape)
            gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                        - xh * (gx_hat * xh).mean(axis=axes, keepdims=True))
        return gx.reshape(xd.shape), ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "norm"), mu, var


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    n = x.shape[0]
    spatial = int(np.prod(x.shape[1:-1]))
    shape = (n, spatial, groups, c // groups)
    out, _, _ = _affine_norm(x, gamma, beta, (1, 3), shape, eps)
    return out


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
               eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if state.running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: state has {state.running_mean.shape[0]} channels, input has {c}")
    flat = (int(np.prod(x.shape[:-1])), c)
    if training:
        out, mu, var = _affine_norm(x, gamma, beta, (0,), flat, eps)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(c)
        return out
    stats = (state.running_mean.reshape(1, c), state.running_var.reshape(1, c))
    out, _, _ = _affine_norm(x, gamma, beta, (0,), flat, eps, stats=stats)
    return out


def norm_layer(x: Tensor, params: Params, prefix: str, mode: str = "group", groups: int = 1,
               state: BatchNormState | None = None, training: bool = True) -> Tensor:
    gamma, beta = params[f"{prefix}.gamma"], params[f"{prefix}.beta"]
    if gamma.shape[0] != x.shape[-1]:
        raise ShapeError(f"norm_layer {prefix}: expects {gamma.shape[0]} channels, input has {x.shape[-1]}")
    if mode == "group":
        return group_norm(x, gamma, beta, groups)
    if mode == "batch":
        if state is None:
            raise ValueError(f"norm_layer {prefix}: batch mode needs a BatchNormState")
        return batch_norm(x, gamma, beta, state, training)
    raise ValueError(f"unknown norm mode {mode!r}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    shape = (int(np.prod(x.shape[:-1])), 1, c)
    out, _, _ = _affine_norm(x, gamma, beta, (1, 2), shape, eps)
    return out


def init_norm(params: Params, prefix: str, channels: int, dtype=np.float64):
    params[f"{prefix}.gamma"] = Tensor(np.ones(channels, dtype), requires_grad=True, name=f"{prefix}.gamma")
    params[f"{prefix}.beta"] = Tensor(np.zeros(channels, dtype), requires_grad=True, name=f"{prefix}.beta")


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    w = params[f"{prefix}.kernel"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear {prefix}: input dim {x.shape[-1]} does not match kernel {list(w.shape)}")
    y = matmul(x, w)
    b = params.get(f"{prefix}.bias")
    return y if b is None else add(y, b)


def init_linear(params: Params, prefix: str, d_in: int, d_out: int, rng: np.random.Generator,
                dtype=np.float64, bias: bool = True):
    params[f"{prefix}.kernel"] = Tensor(uniform_fan_in(rng, (d_in, d_out), d_in, dtype), requires_grad=True,
                                        name=f"{prefix}.kernel")
    if bias:
        params[f"{prefix}.bias"] = Tensor(uniform_fan_in(rng, (d_out,), d_in, dtype), requires_grad=True,
                                          name=f"{prefix}.bias")


def mlp(x: Tensor, params: Params, prefix: str, depth: int) -> Tensor:
    """``depth`` linear layers with ReLU between them (none after the last)."""
    for i in range(depth):
        x = linear(x, params, f"{prefix}.fc{i}")
        if i < depth - 1:
            x = relu(x)
    return x


def init_mlp(params: Params, prefix: str, dims: list[int], rng: np.random.Generator, dtype=np.float64):
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(params, f"{prefix}.fc{i}", a, b, rng, dtype)


def global_avg_pool(f: Tensor) -> Tensor:
    """Mean over the T, H, W axes of ``[N,T,H,W,C]``."""
    return mean(f, axis=(1, 2, 3))


# ---------------------------------------------------------------------------
# positional encodings


def sincos_encode(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Factorized sinusoidal code for ``positions [M, 3]`` holding (t, y, x).

    Each axis gets ``dim // 6 * 2`` channels, interleaved sin/cos over a
    geometric frequency ladder; leftover channels (``dim % 6``) are zero.
    """
    positions = np.asarray(positions, dtype=np.float64)
    per_axis = (dim // 6) * 2
    half = per_axis // 2
    freqs = base ** (-np.arange(half) * 2.0 / per_axis) if half else np.zeros(0)
    out = np.zeros((positions.shape[0], dim))
    for a in range(3):
        ang = positions[:, a:a + 1] * freqs[None, :]
        block = np.empty((positions.shape[0], per_axis))
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
        out[:, a * per_axis:(a + 1) * per_axis] = block
    return out


def st_positional_encoding(t: int, h: int, w: int, dim: int, dtype=np.float64) -> Tensor:
    grid = np.stack(np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij"), axis=-1)
    code = sincos_encode(grid.reshape(-1, 3), dim).reshape(t, h, w, dim)
    return Tensor(code.astype(dtype))


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention of ``q [Nq,D]`` over ``k, v [Nk,D]`` per head."""
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // heads
    qh = transpose(reshape(q, (nq, heads, dh)), (1, 0, 2))
    kh = transpose(reshape(k, (nk, heads, dh)), (1, 2, 0))
    vh = transpose(reshape(v, (nk, heads, dh)), (1, 0, 2))
    weights = softmax(matmul(qh, kh) * (1.0 / math.sqrt(dh)), axis=-1)
    out = matmul(weights, vh)
    return reshape(transpose(out, (1, 0, 2)), (nq, d))


def multi_head_cross_attention(query: Tensor, kv: Tensor, spec: AttentionSpec, params: Params, prefix: str,
                               query_pos: Tensor | None = None, kv_pos: Tensor | None = None) -> Tensor:
    """Pre-norm cross-attention stack: queries attend over ``kv`` tokens.

    Positional codes, when given, are added to the query and key/value tokens
    once, before the first layer.
    """
    if kv.shape[0] < 1:
        raise ValueError("multi_head_cross_attention: empty key set")
    if query.shape[-1] != spec.hidden_dim or kv.shape[-1] != spec.hidden_dim:
        raise ShapeError(
            f"multi_head_cross_attention: token dims {query.shape[-1]}/{kv.shape[-1]} != hidden_dim {spec.hidden_dim}"
        )
    x = query if query_pos is None else add(query, query_pos)
    if kv_pos is not None:
        kv = add(kv, kv_pos)
    for i in range(spec.layers):
        p = f"{prefix}.layer{i}"
        qn = layer_norm(x, params[f"{p}.ln_q.gamma"], params[f"{p}.ln_q.beta"])
        kn = layer_norm(kv, params[f"{p}.ln_kv.gamma"], params[f"{p}.ln_kv.beta"])
        q = linear(qn, params, f"{p}.q")
        k = linear(kn, params, f"{p}.k")
        v = linear(kn, params, f"{p}.v")
        x = add(x, linear(attention(q, k, v, spec.heads), params, f"{p}.o"))
        hn = layer_norm(x, params[f"{p}.ln_ff.gamma"], params[f"{p}.ln_ff.beta"])
        x = add(x, linear(relu(linear(hn, params, f"{p}.ff1")), params, f"{p}.ff2"))
    return x


def init_cross_attention(params: Params, prefix: str, spec: AttentionSpec, rng: np.random.Generator,
                         dtype=np.float64):
    d = spec.hidden_dim
    for i in range(spec.layers):
        p = f"{prefix}.layer{i}"
        for ln in ("ln_q", "ln_kv", "ln_ff"):
            init_norm(params, f"{p}.{ln}", d, dtype)
        for name in ("q", "v", "o"):
            init_linear(params, f"{p}.{name}", d, d, rng, dtype)
        # a key bias only shifts every logit of a query equally
        init_linear(params, f"{p}.k", d, d, rng, dtype, bias=False)
        init_linear(params, f"{p}.ff1", d, spec.ffn_dim, rng, dtype)
        init_linear(params, f"{p}.ff2", spec.ffn_dim, d, rng, dtype)


def stack_rows(rows: list[Tensor]) -> Tensor:
    return concat([reshape(r, (1, -1)) for r in rows], axis=0)
