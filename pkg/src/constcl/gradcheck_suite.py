"""Finite-difference gradient checks for every differentiable component, in float64."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbone import BackboneConfig
from .heads import ContextSet, HeadConfig, context_head_forward, st_roialign
from .losses import LossConfig, dense_loss, global_loss, info_nce, region_loss
from .nn import AttentionSpec, ConvSpec
from .regions import Region, RegionGenConfig
from .sampling import SamplingConfig
from .tensor import Tensor, exp, gradcheck, l2_normalize, log, matmul, mean, power, relu, softmax, tsum
from .train import compute_losses, model_init, objective, prepare_batch
from .sampling import sample_view_pair


@dataclass
class ToySetup:
    """Tiny float64 configuration used by the full-objective check."""

    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        widths=[4, 8, 8, 8],
        strides=[[1, 1, 1], [2, 2, 2], [1, 1, 1], [1, 1, 1]],
        stem_stride=[1, 2, 2],
        norm="group",
        groups=2,
        dtype="float64",
    ))
    heads: HeadConfig = field(default_factory=lambda: HeadConfig(
        global_hidden=8, global_out=6, region_hidden=8,
        attention=AttentionSpec(layers=1, heads=2, hidden_dim=12, ffn_dim=8),
    ))
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(
        context_length=1, clip_length=4, frame_stride=1, out_size=[8, 8]))
    regions: RegionGenConfig = field(default_factory=lambda: RegionGenConfig(boxes_per_frame=2))
    loss: LossConfig = field(default_factory=LossConfig)
    videos: int = 2
    frames: int = 6


# Central differences at eps=1e-5 on an O(1) loss carry roughly 1e-11 of
# roundoff, so coordinates with gradients below 1e-7 are compared absolutely.
OBJECTIVE_FLOOR = 1e-7


def full_objective_error(seed: int, setup: ToySetup | None = None, max_coords: int = 3) -> float:
    """Max relative error over sampled coordinates of every parameter of the full objective."""
    setup = copy.deepcopy(setup or ToySetup())
    setup.backbone.seed = seed
    model = model_init(setup.backbone, setup.heads)
    rng = np.random.default_rng(seed)
    videos = rng.uniform(size=(setup.videos, setup.frames, 10, 10, 3))
    pairs = [sample_view_pair(v, setup.sampling, rng, i) for i, v in enumerate(videos)]
    batch = prepare_batch(pairs, setup.sampling, setup.regions, setup.backbone.temporal_stride, rng)
    params = model.parameters()
    names = sorted(params)

    def fn(*tensors):
        for name, t in zip(names, tensors):
            if name in model.backbone.params:
                model.backbone.params[name] = t
            else:
                model.heads[name] = t
        parts = compute_losses(model, batch, setup.loss, setup.sampling)
        return objective(parts, setup.loss, batch.size)

    return gradcheck(fn, [params[n].data for n in names], max_coords=max_coords, seed=seed,
                     floor=OBJECTIVE_FLOOR)


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def component_errors(seed: int = 0) -> dict[str, float]:
    """Per-component max relative gradient error on small random inputs."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    out["tensor.elementwise"] = gradcheck(
        lambda x, y: tsum(exp(x) * y + log(power(x, 2.0) + 1.0) - relu(x - y)),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
    )
    out["tensor.matmul_softmax"] = gradcheck(
        lambda a, b: tsum(softmax(matmul(a, b), axis=-1) * Tensor(rng_fixed(seed, (3, 2)))),
        [rng.normal(size=(3, 5)), rng.normal(size=(5, 2))],
    )
    out["tensor.l2_normalize"] = gradcheck(
        lambda x: tsum(l2_normalize(x, axis=-1) * Tensor(rng_fixed(seed, (4, 3)))), [rng.normal(size=(4, 3))]
    )

    spec = ConvSpec((3, 3, 3), (1, 2, 2), (1, 1, 1), 2, 3)
    out["nn.conv3d"] = gradcheck(
        lambda x, w, b: tsum(power(nn.conv3d(x, w, b, spec), 2.0)),
        [rng.normal(size=(1, 3, 5, 5, 2)), rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3)],
    )
    out["nn.group_norm"] = gradcheck(
        lambda x, g, b: tsum(nn.group_norm(x, g, b, 2) * Tensor(rng_fixed(seed, (2, 3, 4)))),
        [rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=4)],
    )
    out["nn.batch_norm"] = gradcheck(
        lambda x, g, b: tsum(nn.batch_norm(x, g, b, nn.BatchNormState(np.zeros(4), np.ones(4)), True)
                             * Tensor(rng_fixed(seed, (5, 4)))),
        [rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=4)],
    )
    out["nn.layer_norm"] = gradcheck(
        lambda x, g, b: tsum(nn.layer_norm(x, g, b) * Tensor(rng_fixed(seed, (3, 6)))),
        [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)],
    )

    aspec = AttentionSpec(layers=2, heads=2, hidden_dim=6, ffn_dim=8)
    aparams: nn.Params = {}
    nn.init_cross_attention(aparams, "attn", aspec, rng)
    anames = sorted(aparams)
    q0, kv0 = rng.normal(size=(3, 6)), rng.normal(size=(5, 6))

    def attn_fn(q, kv, *ps):
        p = dict(zip(anames, ps))
        y = nn.multi_head_cross_attention(q, kv, aspec, p, "attn")
        return tsum(y * Tensor(rng_fixed(seed, (3, 6))))

    out["nn.cross_attention"] = gradcheck(attn_fn, [q0, kv0] + [aparams[n].data for n in anames])

    boxes = [Region(0, 0.1, 0.2, 0.7, 0.9), Region(1, 0.3, 0.05, 0.95, 0.6)]
    out["heads.roialign"] = gradcheck(
        lambda f: tsum(st_roialign(f, boxes) * Tensor(rng_fixed(seed, (2, 3)))), [rng.normal(size=(2, 4, 5, 3))]
    )

    hcfg = HeadConfig(attention=AttentionSpec(layers=1, heads=2, hidden_dim=6, ffn_dim=4))
    hparams: nn.Params = {}
    nn.init_linear(hparams, "context_head.query_in", 4, 6, rng)
    nn.init_linear(hparams, "context_head.kv_in", 4, 6, rng)
    nn.init_cross_attention(hparams, "context_head.attn", hcfg.attention, rng)
    nn.init_linear(hparams, "context_head.out", 6, 4, rng)
    hnames = sorted(hparams)
    qpos = rng.uniform(0, 2, size=(2, 3))
    kpos = rng.uniform(0, 2, size=(5, 3))

    def ctx_fn(h, tokens, *ps):
        p = dict(zip(hnames, ps))
        z = context_head_forward(h, qpos, ContextSet(tokens, kpos), p, hcfg.attention)
        return tsum(z * Tensor(rng_fixed(seed, (2, 4))))

    out["heads.context_head"] = gradcheck(ctx_fn, [rng.normal(size=(2, 4)), rng.normal(size=(5, 4))]
                                          + [hparams[n].data for n in hnames])

    out["losses.info_nce"] = gradcheck(
        lambda a, p, n: info_nce(l2_normalize(a), l2_normalize(p), l2_normalize(n), 0.2),
        [rng.normal(size=5), rng.normal(size=5), rng.normal(size=(3, 5))],
    )
    out["losses.global_loss"] = gradcheck(
        lambda z, zp: global_loss(l2_normalize(z), l2_normalize(zp), 0.1),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
    )
    out["losses.region_loss"] = gradcheck(
        lambda z, hp, hs, n: region_loss(l2_normalize(z), l2_normalize(hp), l2_normalize(hs), l2_normalize(n),
                                         0.2)[0],
        [rng.normal(size=(3, 4)), _unit(rng, 2, 4), _unit(rng, 3, 4), rng.normal(size=(4, 4))],
    )
    out["losses.dense_loss"] = gradcheck(
        lambda f, fp, n: dense_loss(l2_normalize(f), l2_normalize(fp), l2_normalize(n), 0.2)[0],
        [rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(3, 3))],
    )
    out["objective.full"] = full_objective_error(seed)
    return out


def rng_fixed(seed: int, shape) -> np.ndarray:
    """A fixed random projection used to turn tensor outputs into scalars."""
    return np.random.default_rng([seed, 99]).normal(size=shape)
