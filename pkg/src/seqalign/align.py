"""Monotone pseudo-labels for frame/sentence alignment.

Three generators turn an ``N x K`` similarity map (rows: frames, columns:
sentences) into non-decreasing per-row targets:

* ``pseudo_sort``: argmax of a hard Gumbel sample per row, sorted.
* ``pseudo_viterbi``: best path through an upper-triangular transition mask.
* ``pseudo_split``: pool rows into K contiguous parts, target the diagonal.

Targets are plain integer arrays and never carry gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError
from .numcore import Node, Rng


@dataclass(frozen=True)
class GumbelConfig:
    tau_g: float = 1.0
    hard: bool = True
    noise_enabled: bool = True

    def __post_init__(self):
        if not self.tau_g > 0:
            raise ValueError(f"tau_g must be positive, got {self.tau_g}")


def gumbel_logits(logits: Node, cfg: GumbelConfig, rng: Rng | None) -> Node:
    """``(logits + g) / tau_g`` with standard Gumbel noise ``g`` (zero if disabled)."""
    logits = nc.constant(logits)
    if cfg.noise_enabled:
        if rng is None:
            raise ContractError("Gumbel noise enabled but no rng given")
        logits = logits + rng.gumbel(logits.shape)
    return logits * (1.0 / cfg.tau_g)


def one_hot_argmax(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    idx = np.argmax(x, axis=-1)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def gumbel_softmax_rows(logits: Node, cfg: GumbelConfig, rng: Rng | None = None) -> Node:
    """Row-wise (straight-through) Gumbel-Softmax.

    With ``cfg.hard`` the forward value is the one-hot argmax of the soft
    sample while gradients flow through the soft sample.
    """
    soft = nc.softmax_rows(gumbel_logits(logits, cfg, rng))
    if not cfg.hard:
        return soft
    return nc.straight_through(one_hot_argmax(soft.value), soft)


def pseudo_sort(samples) -> np.ndarray:
    """Sorted per-row argmax of hard one-hot samples."""
    x = samples.value if isinstance(samples, Node) else np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected an N x K sample matrix, got shape {x.shape}")
    is_binary = np.all((x == 0.0) | (x == 1.0))
    if not is_binary or not np.all(x.sum(axis=1) == 1.0):
        raise ContractError("pseudo_sort needs exact one-hot rows")
    return np.sort(np.argmax(x, axis=1), kind="stable")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def viterbi_emissions(sim: np.ndarray, tau_v: float) -> np.ndarray:
    return _log_softmax(np.asarray(sim, dtype=np.float64) / tau_v)


def pseudo_viterbi(sim, tau_v: float = 0.1) -> np.ndarray:
    """Most likely non-decreasing state path for ``N x K`` similarities.

    Emissions are ``log softmax(sim / tau_v)`` per row; every allowed
    transition ``j -> j' >= j`` costs ``log(1/K)``, backward moves are
    forbidden.  Ties resolve to the smaller state index.
    """
    if not tau_v > 0:
        raise ValueError(f"tau_v must be positive, got {tau_v}")
    sim = sim.value if isinstance(sim, Node) else np.asarray(sim, dtype=np.float64)
    n, k = sim.shape
    if n < 1 or k < 1:
        raise ContractError(f"empty similarity map {sim.shape}")
    emis = viterbi_emissions(sim, tau_v)
    log_a = np.log(1.0 / k)
    delta = log_a + emis[0]
    back = np.zeros((n, k), dtype=np.int64)
    for t in range(1, n):
        best_val = np.empty(k)
        best_idx = np.empty(k, dtype=np.int64)
        cur_val, cur_idx = -np.inf, 0
        for j in range(k):
            if delta[j] > cur_val:
                cur_val, cur_idx = delta[j], j
            best_val[j], best_idx[j] = cur_val, cur_idx
        back[t] = best_idx
        delta = best_val + log_a + emis[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def path_score(sim, path, tau_v: float = 0.1) -> float:
    """Log score of ``path`` under the Viterbi model (``-inf`` if it moves backward)."""
    sim = np.asarray(sim, dtype=np.float64)
    path = np.asarray(path)
    if np.any(np.diff(path) < 0):
        return -np.inf
    emis = viterbi_emissions(sim, tau_v)
    k = sim.shape[1]
    return float(len(path) * np.log(1.0 / k) + emis[np.arange(len(path)), path].sum())


def split_sizes(n: int, k: int) -> list[int]:
    """Contiguous part sizes; the first ``n mod k`` parts take the extra frame."""
    if n < k:
        raise ContractError(f"cannot split {n} rows into {k} parts")
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def pooling_matrix(n: int, k: int) -> np.ndarray:
    pool = np.zeros((k, n))
    start = 0
    for i, size in enumerate(split_sizes(n, k)):
        pool[i, start:start + size] = 1.0 / size
        start += size
    return pool


def pseudo_split(sim: Node) -> tuple[Node, np.ndarray]:
    """Average rows of an ``N x K`` map over K contiguous parts.

    Returns the ``K x K`` pooled map and the diagonal targets ``0..K-1``.
    """
    sim = nc.constant(sim)
    n, k = sim.shape
    pooled = nc.constant(pooling_matrix(n, k)) @ sim
    return pooled, np.arange(k, dtype=np.int64)


def expand_split_labels(n: int, k: int) -> np.ndarray:
    """Per-row labels implied by the split partition (part index of each row)."""
    return np.repeat(np.arange(k, dtype=np.int64), split_sizes(n, k))


def is_monotone(labels) -> bool:
    labels = np.asarray(labels)
    return bool(np.all(np.diff(labels) >= 0))
