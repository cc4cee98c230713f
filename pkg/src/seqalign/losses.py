"""Coarse video-paragraph contrastive loss, fine frame-sentence loss, total objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .align import (GumbelConfig, gumbel_logits, one_hot_argmax, pseudo_sort, pseudo_split,
                    pseudo_viterbi)
from .config import RunConfig
from .errors import ContractError, DimensionError
from .numcore import Node, Rng

TAU_MIN, TAU_MAX = 0.01, 100.0
# the learnable quantity is log(1/tau), as in CLIP's logit scale
LOG_SCALE_MIN, LOG_SCALE_MAX = float(np.log(1.0 / TAU_MAX)), float(np.log(1.0 / TAU_MIN))


@dataclass(frozen=True)
class LossConfig:
    lambda_fine: float = 1.0
    tau_init: float = 0.07
    fine_method: str = "sort"
    tau_g: float = 1.0
    tau_v: float = 0.1
    gumbel_noise: bool = True
    cls_weight: float = 0.0

    def __post_init__(self):
        if self.lambda_fine < 0:
            raise ValueError("lambda_fine must be >= 0")
        if self.fine_method not in ("sort", "viterbi", "split"):
            raise ValueError(f"unknown fine_method {self.fine_method!r}")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> LossConfig:
        return cls(lambda_fine=cfg.lambda_fine, tau_init=cfg.tau_init,
                   fine_method=cfg.fine_method, tau_g=cfg.tau_g, tau_v=cfg.tau_v,
                   gumbel_noise=cfg.gumbel_noise, cls_weight=cfg.cls_weight)

    @property
    def gumbel(self) -> GumbelConfig:
        return GumbelConfig(tau_g=self.tau_g, hard=True, noise_enabled=self.gumbel_noise)


def init_logit_scale(tau_init: float = 0.07) -> Node:
    return nc.parameter(np.array([[np.log(1.0 / tau_init)]]), name="logit_scale")


def clamp_logit_scale(scale: Node) -> None:
    np.clip(scale.value, LOG_SCALE_MIN, LOG_SCALE_MAX, out=scale.value)


def temperature(scale: Node) -> Node:
    """tau = exp(-log_scale), with the scale clamped to keep tau in [0.01, 100]."""
    return nc.exp(-nc.clip(scale, LOG_SCALE_MIN, LOG_SCALE_MAX))


def cosine_sim_matrix(a, b) -> Node:
    a, b = nc.constant(a), nc.constant(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"feature dims differ: {a.shape} vs {b.shape}")
    return nc.l2_normalize_rows(a) @ nc.l2_normalize_rows(b).T


def info_nce(V, L, tau) -> Node:
    """Mean over rows of -log softmax_j(cos(v_i, l_j) / tau)[i]."""
    logits = cosine_sim_matrix(V, L)
    logits = logits / tau if isinstance(tau, Node) else logits * (1.0 / tau)
    return nc.cross_entropy_rows(logits, np.arange(logits.shape[0]))


def coarse_loss(V, L, tau) -> Node:
    return info_nce(V, L, tau) + info_nce(L, V, tau)


def fine_direction(sim: Node, cfg: LossConfig, rng: Rng | None, transposed: bool = False) -> Node:
    """Cross-entropy of soft Gumbel predictions against monotone pseudo-labels.

    ``sim`` is always the frames x sentences cosine map; ``transposed``
    selects the sentence -> frame direction.  Predictions are Gumbel-softmax
    rows of the raw cosine map at temperature ``tau_g``.
    """
    if cfg.fine_method == "split":
        pooled, targets = pseudo_split(sim)
        sim_dir = pooled.T if transposed else pooled
    else:
        sim_dir = sim.T if transposed else sim
    z = gumbel_logits(sim_dir, cfg.gumbel, rng)
    if cfg.fine_method == "sort":
        targets = pseudo_sort(one_hot_argmax(z.value))
    elif cfg.fine_method == "viterbi":
        targets = pseudo_viterbi(sim_dir.value, cfg.tau_v)
    return nc.cross_entropy_rows(z, targets)


def fine_loss(H: Node, S, cfg: LossConfig, rng: Rng | None = None) -> Node:
    """Frame->sentence plus sentence->frame pseudo-label cross-entropy."""
    n, k = H.shape[0], np.shape(S.value if isinstance(S, Node) else S)[0]
    if cfg.fine_method == "split" and n < k:
        raise ContractError(f"split needs N >= K, got N={n}, K={k}")
    sim = cosine_sim_matrix(H, S)
    r1 = rng.child("h2s") if rng is not None else None
    r2 = rng.child("s2h") if rng is not None else None
    return fine_direction(sim, cfg, r1) + fine_direction(sim, cfg, r2, transposed=True)


@dataclass
class BatchOutputs:
    V: Node                      # B x D video representations
    L: np.ndarray                # B x D paragraph features (frozen)
    H: list                      # per video, N x D frame representations
    S: list                      # per video, K x D sentence features (frozen)
    logits: Node | None = None   # B x C classifier outputs
    labels: np.ndarray | None = None


@dataclass
class LossTerms:
    total: Node
    coarse: float
    fine: float
    cls: float


def total_loss(out: BatchOutputs, cfg: LossConfig, tau, rng: Rng | None = None) -> LossTerms:
    """coarse + lambda_fine * mean_b(fine_b) + cls_weight * CE(logits, labels)."""
    coarse = coarse_loss(out.V, out.L, tau)
    total = coarse
    fine_val = cls_val = 0.0
    if cfg.lambda_fine > 0:
        terms = [fine_loss(h, s, cfg, rng.child(i) if rng is not None else None)
                 for i, (h, s) in enumerate(zip(out.H, out.S))]
        fine = terms[0]
        for t in terms[1:]:
            fine = fine + t
        fine = fine * (1.0 / len(terms))
        fine_val = fine.item()
        total = total + fine * cfg.lambda_fine
    if cfg.cls_weight > 0 and out.logits is not None:
        cls = nc.cross_entropy_rows(out.logits, out.labels)
        cls_val = cls.item()
        total = total + cls * cfg.cls_weight
    return LossTerms(total, coarse.item(), fine_val, cls_val)
