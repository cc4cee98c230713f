"""Sequence verification and text-to-video matching."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import numcore as nc
from .data import VideoSample
from .errors import ContractError
from .model import EncoderParams, encode_frames
from .numcore import Rng

EPS = 1e-12


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, EPS)


def norm_euclid(v1, v2) -> float:
    """Euclidean distance between the l2-normalised vectors (d^2 = 2 - 2 cos)."""
    return float(np.linalg.norm(_unit(v1) - _unit(v2)))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks, so ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC is undefined without both positive and negative labels")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def video_reps(samples: list[VideoSample], params: EncoderParams, batch: int = 64) -> dict:
    """Video representations keyed by video id (inference, no graph recorded)."""
    reps = {}
    with nc.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            _, v = encode_frames(np.stack([s.frames for s in chunk]), params)
            for s, row in zip(chunk, v.value):
                reps[s.video_id] = row
    return reps


def _resolve(model, samples) -> dict:
    if isinstance(model, dict):
        return model
    return video_reps(samples, model)


def pair_scores(pairs, model) -> tuple[np.ndarray, np.ndarray]:
    samples = list({id(s): s for a, b, _ in pairs for s in (a, b)}.values())
    reps = _resolve(model, samples)
    scores = np.array([-norm_euclid(reps[a.video_id], reps[b.video_id]) for a, b, _ in pairs])
    labels = np.array([bool(y) for _, _, y in pairs])
    return scores, labels


def verify(pairs, model) -> float:
    """AUC of ``-distance`` for consistent vs inconsistent pairs.

    ``model`` is either encoder parameters or a precomputed ``{video_id: rep}``.
    """
    return roc_auc(*pair_scores(pairs, model))


def verify_decisions(pairs, model, tau_threshold: float) -> np.ndarray:
    """Binary consistency calls: 1 where the pair distance is <= ``tau_threshold``."""
    scores, _ = pair_scores(pairs, model)
    return (-scores <= tau_threshold).astype(np.int64)


@dataclass
class MatchInstance:
    paragraph: np.ndarray    # D
    candidates: np.ndarray   # C x D
    correct: int

    def __post_init__(self):
        if not 0 <= self.correct < len(self.candidates):
            raise ContractError(f"correct index {self.correct} outside {len(self.candidates)} candidates")


def build_match_instances(samples: list[VideoSample], model, rng: Rng,
                          n_candidates: int = 5, repeats: int = 1) -> list[MatchInstance]:
    """One paragraph against one random video of each of up to ``n_candidates`` orders.

    Tasks with fewer orders than ``n_candidates`` use every order they have
    (at least two).
    """
    reps = _resolve(model, samples)
    by_task: dict[int, dict[tuple, list[VideoSample]]] = {}
    for s in samples:
        by_task.setdefault(s.task_id, {}).setdefault(s.order, []).append(s)
    out = []
    for task_id in sorted(by_task):
        orders = sorted(by_task[task_id])
        if len(orders) < 2:
            continue
        trng = rng.child(f"task{task_id}")
        for oi, order in enumerate(orders):
            for r in range(repeats):
                irng = trng.child(f"{oi}/{r}")
                others = [o for o in orders if o != order]
                pick = irng.choice(len(others), min(n_candidates - 1, len(others)))
                chosen = [order] + [others[i] for i in pick]
                chosen = [chosen[i] for i in irng.permutation(len(chosen))]
                cands = []
                for o in chosen:
                    group = by_task[task_id][o]
                    cands.append(reps[group[int(irng.choice(len(group), 1)[0])].video_id])
                query = by_task[task_id][order][0].paragraph
                out.append(MatchInstance(np.asarray(query), np.stack(cands), chosen.index(order)))
    return out


def match_eval(instances: list[MatchInstance]) -> tuple[float, float]:
    """(top-1 accuracy, pooled AUC); the nearest candidate wins, first index on ties."""
    hits, scores, labels = 0, [], []
    for inst in instances:
        dist = np.array([norm_euclid(inst.paragraph, c) for c in inst.candidates])
        hits += int(np.argmin(dist) == inst.correct)
        scores.extend(-dist)
        labels.extend(i == inst.correct for i in range(len(dist)))
    acc = hits / len(instances) if instances else float("nan")
    auc = roc_auc(scores, labels) if instances else float("nan")
    return acc, auc


def format_metrics(metrics: dict, as_json: bool = False) -> str:
    if as_json:
        return json.dumps(metrics, sort_keys=False) + "\n"
    return "".join(f"{k}\t{v}\n" for k, v in metrics.items())
