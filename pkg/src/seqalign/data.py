"""Synthetic sequential videos with known segmentation, and the feature-bundle format.

A bundle is a directory holding ``manifest.tsv`` and ``payload.bin``.  The
payload starts with magic ``SVFB`` and a u32 version, followed by matrices
written as ``[rows u32][cols u32][row-major little-endian float32]``.  Each
manifest line describes one video::

    id  task  order(comma-joined)  frame_off  sentence_off  paragraph_off  gt_labels

Offsets are byte positions of matrix headers inside the payload.  The
optional ``@text_map <offset>`` directive points at the frozen text map of
a synthetic dataset; lines starting with ``#`` are comments.
"""
from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import (BadMagicError, ConfigError, DataError, DimMismatchError,
                     TruncatedPayloadError, VersionMismatchError)
from .numcore import Rng

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"SVFB"
BUNDLE_VERSION = 1
MANIFEST = "manifest.tsv"
PAYLOAD = "payload.bin"
MAX_PROTOTYPE_COS = 0.8


@dataclass
class TaskSpec:
    task_id: int
    prototypes: np.ndarray          # K_total x D_raw, unit rows
    orders: list[tuple[int, ...]]


@dataclass
class VideoSample:
    video_id: str
    task_id: int
    order: tuple[int, ...]
    frames: np.ndarray              # N x D_raw
    sentences: np.ndarray           # K x D_rep
    paragraph: np.ndarray           # D_rep
    gt_labels: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.sentences.shape[0]


@dataclass
class Dataset:
    train: list[VideoSample]
    eval: list[VideoSample]
    tasks: list[TaskSpec] = field(default_factory=list)
    text_map: np.ndarray | None = None


def _f32(x) -> np.ndarray:
    """Round to float32 precision (but keep float64) so bundles round-trip exactly."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sample_prototypes(k: int, d: int, rng: Rng, max_cos: float = MAX_PROTOTYPE_COS,
                      max_tries: int = 1000) -> np.ndarray:
    """Unit vectors with pairwise cosine below ``max_cos`` (rejection sampling)."""
    for _ in range(max_tries):
        p = unit_rows(rng.normal((k, d)))
        cos = p @ p.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < max_cos:
            return p
    raise ConfigError(f"could not place {k} prototypes in {d} dims with cosine < {max_cos}")


def text_map(d_raw: int, d_rep: int, rng: Rng) -> np.ndarray:
    """Seeded (semi-)orthogonal D_rep x D_raw map standing in for the frozen text encoder."""
    a = rng.normal((max(d_raw, d_rep), max(d_raw, d_rep)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q[:d_rep, :d_raw]


def segment_lengths(n: int, k: int, alpha: float, rng: Rng) -> np.ndarray:
    """Dirichlet(alpha) proportions turned into K contiguous spans of >= 1 frame."""
    if k > n:
        raise ConfigError(f"K={k} steps cannot fit in {n} frames")
    p = rng.dirichlet(np.full(k, alpha))
    extra = n - k
    raw = p * extra
    lengths = np.floor(raw).astype(np.int64)
    short = extra - lengths.sum()
    if short:
        order = np.argsort(-(raw - lengths), kind="stable")
        lengths[order[:short]] += 1
    return lengths + 1


def make_tasks(cfg: RunConfig, rng: Rng) -> list[TaskSpec]:
    """Each task owns ``n_steps`` prototypes; its orders are distinct permutations."""
    k = cfg.n_steps
    if k < 1:
        raise ConfigError("each procedure needs at least one step")
    n_perms = 1
    for i in range(2, k + 1):
        n_perms *= i
    if cfg.n_orders > n_perms:
        raise ConfigError(f"{cfg.n_orders} distinct orders requested but only {n_perms} exist")
    tasks = []
    for t in range(cfg.n_tasks):
        trng = rng.child(f"task{t}")
        protos = sample_prototypes(k, cfg.d_raw, trng.child("prototypes"))
        orders: list[tuple[int, ...]] = []
        orng = trng.child("orders")
        while len(orders) < cfg.n_orders:
            cand = tuple(int(i) for i in orng.permutation(k))
            if cand not in orders:
                orders.append(cand)
        tasks.append(TaskSpec(t, _f32(protos), orders))
    return tasks


def paragraph_vector(sentences: np.ndarray, prototypes: np.ndarray, order, q: np.ndarray,
                     mode: str, gamma: float) -> np.ndarray:
    if mode == "meanpool":
        return unit_rows(sentences.mean(axis=0))
    weights = gamma ** np.arange(len(order))
    mixed = (weights[:, None] * prototypes[list(order)]).sum(axis=0)
    return unit_rows(q @ mixed)


def make_video(task: TaskSpec, order, cfg: RunConfig, q: np.ndarray, rng: Rng,
               video_id: str) -> VideoSample:
    lengths = segment_lengths(cfg.n_frames, len(order), cfg.dirichlet_alpha, rng.child("spans"))
    gt = np.repeat(np.arange(len(order)), lengths)
    clean = task.prototypes[[order[j] for j in gt]]
    noise = rng.child("noise").normal(clean.shape, scale=cfg.noise_sigma) if cfg.noise_sigma else 0.0
    sentences = task.prototypes[list(order)] @ q.T
    paragraph = paragraph_vector(sentences, task.prototypes, order, q, cfg.paragraph,
                                 cfg.order_gamma)
    return VideoSample(video_id, task.task_id, tuple(order), _f32(clean + noise),
                       _f32(sentences), _f32(paragraph), gt.astype(np.int64))


def gen_videos(tasks: list[TaskSpec], per_order: int, cfg: RunConfig, q: np.ndarray,
               rng: Rng, prefix: str) -> list[VideoSample]:
    out = []
    for task in tasks:
        for oi, order in enumerate(task.orders):
            for v in range(per_order):
                vid = f"{prefix}-t{task.task_id}-o{oi}-v{v}"
                out.append(make_video(task, order, cfg, q, rng.child(vid), vid))
    return out


def gen_dataset(cfg: RunConfig, rng: Rng) -> Dataset:
    """Tasks, a training split and a held-out split of fresh videos of the same orders."""
    if cfg.n_steps > cfg.n_frames:
        raise ConfigError(f"K={cfg.n_steps} steps exceed n_frames={cfg.n_frames}")
    tasks = make_tasks(cfg, rng.child("tasks"))
    q = _f32(text_map(cfg.d_raw, cfg.d_rep, rng.child("text_map")))
    train = gen_videos(tasks, cfg.videos_per_order, cfg, q, rng.child("train"), "train")
    held = gen_videos(tasks, cfg.eval_videos_per_order, cfg, q, rng.child("eval"), "eval")
    return Dataset(train, held, tasks, q)


def make_pairs(samples: list[VideoSample], rng: Rng | None = None, balance: bool = True):
    """Same-task video pairs labelled consistent iff the step orders agree.

    Pairs never cross tasks.  With ``balance`` the larger class is
    subsampled (seeded) to the size of the smaller one.
    """
    by_task: dict[int, list[VideoSample]] = {}
    for s in samples:
        by_task.setdefault(s.task_id, []).append(s)
    pos, neg = [], []
    for task_id in sorted(by_task):
        group = by_task[task_id]
        if len({s.order for s in group}) < 2:
            log.warning("task %s has a single order; skipped for pair construction", task_id)
            continue
        for a, b in itertools.combinations(group, 2):
            (pos if a.order == b.order else neg).append((a, b, a.order == b.order))
    if balance and pos and neg:
        rng = rng or Rng(0, "pairs")
        n = min(len(pos), len(neg))
        if len(pos) > n:
            pos = [pos[i] for i in sorted(rng.choice(len(pos), n))]
        if len(neg) > n:
            neg = [neg[i] for i in sorted(rng.choice(len(neg), n))]
    return pos + neg


# ---------------------------------------------------------------- bundle I/O

def _matrix_bytes(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None]
    return struct.pack("<II", *m.shape) + m.astype("<f4").tobytes()


def write_bundle(path, samples: list[VideoSample], text_map: np.ndarray | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = bytearray(BUNDLE_MAGIC + struct.pack("<I", BUNDLE_VERSION))
    lines = ["# id\ttask\torder\tframe_off\tsentence_off\tparagraph_off\tgt_labels"]
    if text_map is not None:
        lines.append(f"@text_map\t{len(payload)}")
        payload += _matrix_bytes(text_map)
    for s in samples:
        offs = []
        for m in (s.frames, s.sentences, s.paragraph):
            offs.append(len(payload))
            payload += _matrix_bytes(m)
        gt = "" if s.gt_labels is None else ",".join(str(int(x)) for x in s.gt_labels)
        lines.append("\t".join([s.video_id, str(s.task_id), ",".join(map(str, s.order)),
                                *map(str, offs), gt]))
    (path / PAYLOAD).write_bytes(bytes(payload))
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_matrix(buf: bytes, off: int, where: str, extent_end: int | None = None) -> np.ndarray:
    """Read one matrix; ``extent_end`` is where the next matrix starts (None: end of file)."""
    if off < 8 or off + 8 > len(buf):
        raise TruncatedPayloadError(f"{where}: matrix header at {off} outside payload")
    rows, cols = struct.unpack_from("<II", buf, off)
    end = off + 8 + 4 * rows * cols
    if extent_end is not None and end != extent_end:
        raise DimMismatchError(f"{where}: declared {rows}x{cols} matrix at {off} does not fill "
                               f"its {extent_end - off - 8} payload bytes")
    if end > len(buf):
        raise TruncatedPayloadError(f"{where}: {rows}x{cols} matrix at {off} runs past payload end")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off + 8)
    return data.astype(np.float64).reshape(rows, cols)


def _check_finite(m: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise DataError(f"{where}: non-finite values")
    return m


def read_bundle(path, with_text_map: bool = False):
    """Load a bundle written by :func:`write_bundle`.

    Raises a distinct :class:`DataError` subclass for bad magic, version
    mismatch, truncated payload and dimension mismatch.
    """
    path = Path(path)
    try:
        buf = (path / PAYLOAD).read_bytes()
        manifest = (path / MANIFEST).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read bundle {path}: {exc}") from exc
    if buf[:4] != BUNDLE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{path}: payload shorter than its header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != BUNDLE_VERSION:
        raise VersionMismatchError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")

    records = []
    for lineno, line in enumerate(manifest, 1):
        if line.strip() and not line.startswith("#"):
            records.append((f"{path / MANIFEST}:{lineno}", line.split("\t")))
    offsets = []
    for where, cols in records:
        try:
            offsets.extend(int(c) for c in (cols[1:2] if cols[0] == "@text_map" else cols[3:6]))
        except ValueError:
            raise DataError(f"{where}: malformed offset") from None
    offsets = sorted(set(offsets))
    next_off = {o: (offsets[i + 1] if i + 1 < len(offsets) else None)
                for i, o in enumerate(offsets)}

    def matrix(off, where):
        return _read_matrix(buf, off, where, next_off[off])

    samples, tmap, d_rep = [], None, None
    for where, cols in records:
        if cols[0] == "@text_map":
            tmap = matrix(int(cols[1]), where)
            continue
        if len(cols) != 7:
            raise DataError(f"{where}: expected 7 tab-separated fields, got {len(cols)}")
        vid, task, order, f_off, s_off, p_off, gt = cols
        order_t = tuple(int(x) for x in order.split(",") if x)
        frames = _check_finite(matrix(int(f_off), where), where)
        sentences = _check_finite(matrix(int(s_off), where), where)
        paragraph = _check_finite(matrix(int(p_off), where), where)
        if paragraph.shape[0] != 1:
            raise DimMismatchError(f"{where}: paragraph must be a single row, got {paragraph.shape}")
        if sentences.shape[1] != paragraph.shape[1]:
            raise DimMismatchError(f"{where}: sentence dim {sentences.shape[1]} != "
                                   f"paragraph dim {paragraph.shape[1]}")
        if sentences.shape[0] != len(order_t):
            raise DimMismatchError(f"{where}: {sentences.shape[0]} sentences for an order of "
                                   f"length {len(order_t)}")
        if d_rep is not None and d_rep != sentences.shape[1]:
            raise DimMismatchError(f"{where}: representation dim differs from earlier records")
        d_rep = sentences.shape[1]
        labels = None
        if gt:
            labels = np.array([int(x) for x in gt.split(",")], dtype=np.int64)
            if labels.shape[0] != frames.shape[0]:
                raise DimMismatchError(f"{where}: {labels.shape[0]} labels for "
                                       f"{frames.shape[0]} frames")
        samples.append(VideoSample(vid, int(task), order_t, frames, sentences, paragraph[0],
                                   labels))
    if with_text_map:
        return samples, tmap
    return samples


def write_dataset(out_dir, ds: Dataset) -> None:
    out_dir = Path(out_dir)
    write_bundle(out_dir / "train", ds.train, ds.text_map)
    write_bundle(out_dir / "eval", ds.eval, ds.text_map)


def read_dataset(path) -> Dataset:
    """Read ``path/train`` and ``path/eval`` (or a single bundle used for both)."""
    path = Path(path)
    if (path / MANIFEST).exists():
        samples, tmap = read_bundle(path, with_text_map=True)
        return Dataset(samples, samples, [], tmap)
    train, tmap = read_bundle(path / "train", with_text_map=True)
    held = read_bundle(path / "eval") if (path / "eval" / MANIFEST).exists() else train
    return Dataset(train, held, [], tmap)
