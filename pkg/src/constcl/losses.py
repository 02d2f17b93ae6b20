"""Contrastive objectives: InfoNCE, correspondence matching, global/dense/region losses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Tensor, concat, getitem, logsumexp, matmul, mean, mul, reshape, sub, tsum


@dataclass
class LossConfig:
    tau_global: float = 0.1
    tau_region: float = 0.2
    omega: float = 0.01
    mode: str = "contextualized"
    match: str = "max_sim"
    symmetric: bool = True
    stop_grad_targets: bool = False
    region_negatives: str = "all"

    def validate(self) -> None:
        if self.tau_global <= 0 or self.tau_region <= 0:
            raise ValueError("temperatures must be positive")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.mode not in ("dense", "vanilla_region", "contextualized"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.region_negatives not in ("all", "pooled"):
            raise ValueError(f"unknown region negative pool {self.region_negatives!r}")
        if self.match not in ("max_sim", "min_sim"):
            raise ValueError(f"unknown match rule {self.match!r}")


@dataclass
class LossReport:
    L_g: float
    L_r: float
    L_total: float
    match_indices: list = field(default_factory=list)
    negatives_count: int = 0
    step: int = 0
    lr: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "L_g": self.L_g, "L_r": self.L_r, "L_total": self.L_total,
                           "lr": self.lr})

    def as_dict(self) -> dict:
        return asdict(self)


def _rowdot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b), axis=-1)


def info_nce_rows(anchors: Tensor, positives: Tensor, negatives: Tensor | None, tau: float) -> Tensor:
    """Per-row InfoNCE ``[R]`` for anchors/positives ``[R, D]`` against shared negatives ``[K, D]``."""
    if anchors.shape != positives.shape:
        raise ValueError(f"info_nce: anchor shape {list(anchors.shape)} != positive shape {list(positives.shape)}")
    pos = reshape(_rowdot(anchors, positives) * (1.0 / tau), (-1, 1))
    if negatives is None or negatives.shape[0] == 0:
        return sub(logsumexp(pos, axis=1), reshape(pos, (-1,)))
    if negatives.shape[-1] != anchors.shape[-1]:
        raise ValueError(f"info_nce: negative dim {negatives.shape[-1]} != anchor dim {anchors.shape[-1]}")
    neg = matmul(anchors, negatives.T) * (1.0 / tau)
    logits = concat([pos, neg], axis=1)
    return sub(logsumexp(logits, axis=1), reshape(pos, (-1,)))


def info_nce(anchor: Tensor, positive: Tensor, negatives: Tensor | None, tau: float) -> Tensor:
    """``-log(e^{a.p/tau} / (e^{a.p/tau} + sum_k e^{a.n_k/tau}))`` for single vectors."""
    if anchor.shape != positive.shape:
        raise ValueError(f"info_nce: dimension mismatch {list(anchor.shape)} vs {list(positive.shape)}")
    d = anchor.shape[-1]
    out = info_nce_rows(reshape(anchor, (1, d)), reshape(positive, (1, d)), negatives, tau)
    return reshape(out, ())


def match_correspondence(h: np.ndarray, h_prime: np.ndarray, rule: str = "max_sim") -> np.ndarray:
    """For every source row, the index of the most similar target row (lowest index on ties).

    ``rule="min_sim"`` takes the least similar row instead.
    """
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    h_prime = np.asarray(h_prime.data if isinstance(h_prime, Tensor) else h_prime)
    if h.shape[0] == 0 or h_prime.shape[0] == 0:
        raise ValueError("match_correspondence: empty region set")
    sim = h @ h_prime.T
    return np.argmin(sim, axis=1) if rule == "min_sim" else np.argmax(sim, axis=1)


def _reduce(rows: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return tsum(rows)
    if reduction == "mean":
        return mean(rows)
    raise ValueError(f"unknown reduction {reduction!r}")


def region_loss(z: Tensor, h_prime: Tensor, h_source: Tensor, negatives: Tensor | None, tau: float,
                rule: str = "max_sim", reduction: str = "mean") -> tuple[Tensor, np.ndarray]:
    """One-direction region loss: ``z_i`` against its matched target ``h'_{j(i)}``.

    Correspondence is computed from the pooled features ``(h_source, h_prime)``.
    """
    if z.shape[0] == 0 or h_prime.shape[0] == 0:
        raise ValueError("region_loss: empty region set")
    idx = match_correspondence(h_source, h_prime, rule)
    targets = getitem(h_prime, idx)
    return _reduce(info_nce_rows(z, targets, negatives, tau), reduction), idx


def dense_loss(f: Tensor, f_prime: Tensor, negatives: Tensor | None, tau: float,
               match_f: Tensor | None = None, match_f_prime: Tensor | None = None,
               rule: str = "max_sim", reduction: str = "sum") -> tuple[Tensor, np.ndarray]:
    """Voxelwise contrast between two projected maps ``[..., C]`` of one video.

    Voxels are matched on ``match_f``/``match_f_prime`` when given (e.g. the
    unprojected features), otherwise on the maps themselves.
    """
    if f.shape[-1] != f_prime.shape[-1]:
        raise ValueError(f"dense_loss: channel mismatch {f.shape[-1]} vs {f_prime.shape[-1]}")
    c = f.shape[-1]
    z = reshape(f, (-1, c))
    zp = reshape(f_prime, (-1, c))
    mf = z if match_f is None else reshape(match_f, (-1, match_f.shape[-1]))
    mfp = zp if match_f_prime is None else reshape(match_f_prime, (-1, match_f_prime.shape[-1]))
    idx = match_correspondence(mf, mfp, rule)
    return _reduce(info_nce_rows(z, getitem(zp, idx), negatives, tau), reduction), idx


def global_loss_rows(z: Tensor, z_prime: Tensor, tau: float) -> Tensor:
    """Per-anchor symmetric InfoNCE ``[2N]``: rows ``0..N-1`` anchor on view A, ``N..2N-1`` on view B."""
    n = z.shape[0]
    if n == 0:
        raise ValueError("global_loss: empty batch")
    if z_prime.shape != z.shape:
        raise ValueError(f"global_loss: view shapes differ {list(z.shape)} vs {list(z_prime.shape)}")
    both = concat([z, z_prime], axis=0)
    sim = matmul(both, both.T) * (1.0 / tau)
    m = 2 * n
    rows = np.arange(m)
    others = np.array([[j for j in range(m) if j != i] for i in range(m)], dtype=np.int64)
    pos = (rows + n) % m
    logits = getitem(sim, (rows[:, None], others))
    positive = getitem(sim, (rows, pos))
    return sub(logsumexp(logits, axis=1), positive)


def global_loss(z: Tensor, z_prime: Tensor, tau: float) -> Tensor:
    """Symmetric video-level InfoNCE averaged over all ``2N`` anchors.

    Each anchor's positive is the other view of its video; negatives are
    both views of every other video.
    """
    return mean(global_loss_rows(z, z_prime, tau))


def total_loss(l_g: Tensor | float, l_r: Tensor | float, omega: float, batch_size: int) -> Tensor:
    """``(1/N) * sum_batch (L_g + omega * L_r)``; accepts per-video vectors or batch sums."""
    l_g = l_g if isinstance(l_g, Tensor) else Tensor(np.asarray(l_g, dtype=np.float64))
    l_r = l_r if isinstance(l_r, Tensor) else Tensor(np.asarray(l_r, dtype=l_g.dtype))
    per_video = l_g + l_r * omega
    return tsum(per_video) * (1.0 / batch_size)
