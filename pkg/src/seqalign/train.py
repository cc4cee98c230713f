"""AdamW with cosine annealing, the training loop, and resumable checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .data import Dataset, VideoSample, gen_dataset, make_pairs
from .errors import DimensionError, NumericalError
from .evalkit import verify
from .losses import (BatchOutputs, LossConfig, clamp_logit_scale, init_logit_scale, temperature,
                     total_loss)
from .model import (ClsHead, EncoderParams, classify, encode_frames, init_cls_head, init_params,
                    load_checkpoint, save_checkpoint)
from .numcore import Node, Rng

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.svrc"
METRICS_NAME = "metrics.tsv"


@dataclass
class OptimState:
    lr_base: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cosine_lr(step: int, state: OptimState) -> float:
    """lr_base * (1 + cos(pi * step / total)) / 2, held at 0 past the last step."""
    t = min(max(step, 0), state.total_steps) / state.total_steps
    return state.lr_base * 0.5 * (1.0 + math.cos(math.pi * t))


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float | None = None) -> dict:
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    lr = state.lr_base if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainState:
    """Everything that is optimised, plus the optimiser and epoch counter."""

    params: EncoderParams
    logit_scale: Node
    head: ClsHead | None
    optim: OptimState
    epoch: int = 0

    def named_parameters(self) -> dict[str, Node]:
        out = dict(self.params.tensors)
        out["logit_scale"] = self.logit_scale
        if self.head is not None:
            out["cls_head.w"] = self.head.weight
            out["cls_head.b"] = self.head.bias
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {k: n.value for k, n in self.named_parameters().items()}
        for k in self.named_parameters():
            if k in self.optim.m:
                out[f"opt.m.{k}"] = self.optim.m[k]
                out[f"opt.v.{k}"] = self.optim.v[k]
        out["opt.step"] = np.array([[self.optim.step]], dtype=np.float64)
        out["meta.epoch"] = np.array([[self.epoch]], dtype=np.float64)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        from .model import load_params_into

        named = self.named_parameters()
        holder = EncoderParams(named, heads=self.params.heads)
        load_params_into(holder, arrays)
        self.optim.m = {k: arrays[f"opt.m.{k}"].copy() for k in named if f"opt.m.{k}" in arrays}
        self.optim.v = {k: arrays[f"opt.v.{k}"].copy() for k in named if f"opt.v.{k}" in arrays}
        self.optim.step = int(arrays.get("opt.step", np.zeros((1, 1)))[0, 0])
        self.epoch = int(arrays.get("meta.epoch", np.zeros((1, 1)))[0, 0])


def n_classes(samples: list[VideoSample]) -> int:
    return max(s.task_id for s in samples) + 1


def init_state(cfg: RunConfig, rng: Rng, train: list[VideoSample]) -> TrainState:
    params = init_params(cfg, rng.child("init"))
    head = None
    if cfg.cls_weight > 0:
        head = init_cls_head(cfg.d_rep, n_classes(train), rng.child("init").child("cls_head"))
    batches = math.ceil(len(train) / cfg.batch_size)
    optim = OptimState(lr_base=cfg.lr_base, weight_decay=cfg.weight_decay,
                       total_steps=max(1, cfg.epochs * batches))
    return TrainState(params, init_logit_scale(cfg.tau_init), head, optim)


def save_state(path, state: TrainState) -> None:
    save_checkpoint(path, state.to_arrays())


def load_state(path, cfg: RunConfig, train: list[VideoSample]) -> TrainState:
    state = init_state(cfg, Rng(cfg.seed), train)
    state.load_arrays(load_checkpoint(path))
    return state


def batch_forward(state: TrainState, batch: list[VideoSample]) -> BatchOutputs:
    frames = np.stack([s.frames for s in batch])
    H, V = encode_frames(frames, state.params)
    out = BatchOutputs(V, np.stack([s.paragraph for s in batch]),
                       [H[i] for i in range(len(batch))], [s.sentences for s in batch])
    if state.head is not None:
        out.logits = classify(V, state.head)
        out.labels = np.array([s.task_id for s in batch])
    return out


def train_step(state: TrainState, batch: list[VideoSample], lcfg: LossConfig, rng: Rng,
               lr: float, clip_norm: float = 1.0, batch_id: str = ""):
    named = state.named_parameters()
    for node in named.values():
        node.zero_grad()
    terms = total_loss(batch_forward(state, batch), lcfg, temperature(state.logit_scale), rng)
    if not np.isfinite(terms.total.value).all():
        raise NumericalError(f"non-finite loss in batch {batch_id} "
                             f"(coarse={terms.coarse}, fine={terms.fine}, cls={terms.cls}; "
                             f"videos: {', '.join(s.video_id for s in batch)})")
    terms.total.backward()
    grads = {k: n.grad for k, n in named.items()}
    clip_global_norm(grads, clip_norm)
    adamw_step({k: n.value for k, n in named.items()}, grads, state.optim, lr)
    clamp_logit_scale(state.logit_scale)
    return terms


def format_log_line(epoch: int, lr: float, coarse: float, fine: float, cls: float,
                    auc: float) -> str:
    return f"{epoch}\t{lr:.6e}\t{coarse:.8f}\t{fine:.8f}\t{cls:.8f}\t{auc:.6f}"


@dataclass
class FitResult:
    state: TrainState
    log_lines: list[str]


def fit(dataset: Dataset, cfg: RunConfig, rng: Rng | None = None, out_dir=None,
        state: TrainState | None = None, until_epoch: int | None = None,
        eval_every: int = 1) -> FitResult:
    """Train for ``cfg.epochs`` epochs (or stop after ``until_epoch``).

    Every random draw is keyed by (epoch, batch), so resuming from a
    checkpoint written at an epoch boundary replays the uninterrupted run.
    """
    if not dataset.train:
        raise ValueError("empty training set")
    rng = rng or Rng(cfg.seed)
    lcfg = LossConfig.from_run(cfg)
    state = state or init_state(cfg, rng, dataset.train)
    pairs = make_pairs(dataset.eval, rng.child("pairs"))
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_NAME
        if state.epoch == 0:
            metrics_path.write_text("")
    last = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    lines = []
    n = len(dataset.train)
    while state.epoch < last:
        epoch = state.epoch + 1
        perm = rng.child(f"shuffle/{epoch}").permutation(n)
        sums = np.zeros(3)
        batches = [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        lr0 = cosine_lr(state.optim.step, state.optim)
        for bi, idx in enumerate(batches):
            batch = [dataset.train[i] for i in idx]
            lr = cosine_lr(state.optim.step, state.optim)
            try:
                terms = train_step(state, batch, lcfg, rng.child(f"gumbel/{epoch}/{bi}"), lr,
                                   cfg.clip_norm, batch_id=f"epoch{epoch}/batch{bi}")
            except NumericalError as exc:
                if out_dir is not None:
                    (out_dir / "nan_dump.txt").write_text(str(exc) + "\n")
                raise
            sums += (terms.coarse, terms.fine, terms.cls)
        state.epoch = epoch
        auc = float("nan")
        if pairs and (epoch % eval_every == 0 or epoch == last):
            auc = verify(pairs, state.params)
        line = format_log_line(epoch, lr0, *(sums / len(batches)), auc)
        lines.append(line)
        log.info(line)
        if out_dir is not None:
            with metrics_path.open("a") as fh:
                fh.write(line + "\n")
            save_state(out_dir / CHECKPOINT_NAME, state)
    return FitResult(state, lines)


# dimensions small enough for an exhaustive central-difference sweep
GRADCHECK_DIMS = dict(d_raw=8, d_model=8, d_rep=8, depth=1, heads=2, d_ff=16, n_max=4,
                      n_frames=4, n_steps=3, n_tasks=2, n_orders=2, videos_per_order=1,
                      eval_videos_per_order=1, batch_size=4)


def loss_gradcheck(cfg: RunConfig, rng: Rng | None = None, step: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error of the full training loss on one batch.

    Gumbel noise is drawn from a fixed stream, so every re-evaluation sees
    the same perturbation.
    """
    rng = rng or Rng(cfg.seed, "gradcheck")
    ds = gen_dataset(cfg, rng.child("data"))
    state = init_state(cfg, rng, ds.train)
    batch = ds.train[:cfg.batch_size]
    lcfg = LossConfig.from_run(cfg)
    noise = rng.child("noise")

    def f():
        out = batch_forward(state, batch)
        return total_loss(out, lcfg, temperature(state.logit_scale), noise).total

    return nc.gradcheck_report(f, state.named_parameters(), step)
