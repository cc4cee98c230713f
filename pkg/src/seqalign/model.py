"""Frame/video encoder: linear adapter, [class] token, positional embedding,
pre-norm transformer blocks and a shared projection into the text space.

Every parameter is a 2-D matrix (vectors are stored as ``1 x d`` rows) so
the checkpoint format stays uniform.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .errors import (BadMagicError, ConfigError, DimMismatchError, TruncatedPayloadError,
                     VersionMismatchError)
from .numcore import Node, Rng

CHECKPOINT_MAGIC = b"SVRC"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    tensors: dict[str, Node]
    heads: int
    video_head: str = "cls"

    @property
    def depth(self) -> int:
        return sum(1 for k in self.tensors if k.endswith(".ln1.g"))

    @property
    def n_max(self) -> int:
        return self.tensors["pos"].shape[0] - 1

    @property
    def d_raw(self) -> int:
        return self.tensors["adapter.w"].shape[0]

    @property
    def d_rep(self) -> int:
        return self.tensors["head.w"].shape[1]

    def __getitem__(self, name: str) -> Node:
        return self.tensors[name]


@dataclass
class TextBundle:
    """Frozen sentence and paragraph features; never handed to an optimizer."""

    sentences: np.ndarray  # K x D_rep
    paragraph: np.ndarray  # D_rep

    def __post_init__(self):
        self.sentences = nc.as_matrix(self.sentences, "sentences")
        self.paragraph = np.asarray(self.paragraph, dtype=np.float64).reshape(-1)
        if self.sentences.shape[0] < 1:
            raise ValueError("a text bundle needs at least one sentence")


@dataclass
class ClsHead:
    weight: Node  # D_rep x C
    bias: Node    # 1 x C

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)


def init_params(cfg: RunConfig, rng: Rng) -> EncoderParams:
    """Xavier-uniform linear layers, unit layernorm gains, N(0, 0.02) tokens."""
    dm, ff = cfg.d_model, cfg.d_ff
    t: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        t[f"{name}.w"] = xavier_uniform(rng.child(name), fan_in, fan_out)
        t[f"{name}.b"] = np.zeros((1, fan_out))

    linear("adapter", cfg.d_raw, dm)
    t["cls"] = rng.child("cls").normal((1, dm), scale=0.02)
    t["pos"] = rng.child("pos").normal((cfg.n_max + 1, dm), scale=0.02)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        for ln in ("ln1", "ln2"):
            t[f"{p}.{ln}.g"] = np.ones((1, dm))
            t[f"{p}.{ln}.b"] = np.zeros((1, dm))
        for proj in ("q", "k", "v", "o"):
            linear(f"{p}.attn.{proj}", dm, dm)
        linear(f"{p}.ff1", dm, ff)
        linear(f"{p}.ff2", ff, dm)
    linear("head", dm, cfg.d_rep)
    return EncoderParams({k: nc.parameter(v, name=k) for k, v in t.items()},
                         heads=cfg.heads, video_head=cfg.video_head)


def init_cls_head(d_rep: int, n_classes: int, rng: Rng) -> ClsHead:
    if n_classes < 2:
        raise ConfigError(f"classification head needs >= 2 classes, got {n_classes}")
    return ClsHead(nc.parameter(xavier_uniform(rng, d_rep, n_classes), name="cls_head.w"),
                   nc.parameter(np.zeros((1, n_classes)), name="cls_head.b"))


def _linear(x: Node, params: EncoderParams, name: str) -> Node:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _attention(x: Node, params: EncoderParams, prefix: str) -> Node:
    b, t, dm = x.shape
    h = params.heads
    dh = dm // h

    def split(z):
        return nc.transpose(nc.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

    q = split(_linear(x, params, f"{prefix}.q"))
    k = split(_linear(x, params, f"{prefix}.k"))
    v = split(_linear(x, params, f"{prefix}.v"))
    weights = nc.softmax_rows((q @ k.T) * (1.0 / np.sqrt(dh)))
    out = nc.reshape(nc.transpose(weights @ v, (0, 2, 1, 3)), (b, t, dm))
    return _linear(out, params, f"{prefix}.o")


def encode_frames(frames, params: EncoderParams) -> tuple[Node, Node]:
    """Encode ``N x D_raw`` frames (or a ``B x N x D_raw`` batch).

    Returns ``(H, v)``: frame representations ``N x D_rep`` and the video
    representation of length ``D_rep`` (batched: ``B x N x D_rep``, ``B x D_rep``).
    """
    x = frames.value if isinstance(frames, Node) else np.asarray(frames, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ConfigError(f"frames must be N x D or B x N x D, got shape {x.shape}")
    b, n, d = x.shape
    if d != params.d_raw:
        raise ConfigError(f"frame dim {d} does not match adapter input {params.d_raw}")
    if n > params.n_max:
        raise ConfigError(f"{n} frames exceed the positional table (n_max={params.n_max})")

    feats = _linear(nc.constant(x), params, "adapter")
    dm = feats.shape[-1]
    cls = params["cls"] + np.zeros((b, 1, dm))
    seq = nc.concat([cls, feats], axis=1) + params["pos"][: n + 1]
    for i in range(params.depth):
        p = f"blocks.{i}"
        seq = seq + _attention(nc.layernorm(seq, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"]),
                               params, f"{p}.attn")
        hid = nc.layernorm(seq, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        seq = seq + _linear(nc.gelu(_linear(hid, params, f"{p}.ff1")), params, f"{p}.ff2")

    H = _linear(seq[:, 1:], params, "head")
    if params.video_head == "cls":
        v = _linear(seq[:, 0], params, "head")
    else:
        v = _linear(nc.mean(seq[:, 1:], axis=1), params, "head")
    if single:
        return H[0], v[0]
    return H, v


def classify(v: Node, head: ClsHead) -> Node:
    if v.shape[-1] != head.weight.shape[0]:
        raise nc.DimensionError(f"video rep dim {v.shape[-1]} != head input {head.weight.shape[0]}")
    logits = v @ head.weight if v.value.ndim == 2 else nc.reshape(v, (1, -1)) @ head.weight
    logits = logits + head.bias
    return logits if v.value.ndim == 2 else logits[0]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named 2-D float64 matrices in the SVRC format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise nc.DimensionError(f"checkpoint tensor {name!r} must be 2-D, got {arr.shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, "
                                   f"expected {CHECKPOINT_VERSION}")
    pos, out = 8, {}
    while pos < len(buf):
        try:
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2: pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
        except struct.error:
            raise TruncatedPayloadError(f"{path}: truncated record header") from None
        end = pos + 8 * rows * cols
        if end > len(buf):
            raise TruncatedPayloadError(f"{path}: record {name!r} truncated")
        out[name] = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(rows, cols)
        pos = end
    return out


def params_to_arrays(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: v.value for k, v in params.tensors.items()}


def load_params_into(params: EncoderParams, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``params``; every shape must agree."""
    for name, node in params.tensors.items():
        if name not in arrays:
            raise DimMismatchError(f"checkpoint lacks parameter {name!r}")
        if arrays[name].shape != node.shape:
            raise DimMismatchError(f"parameter {name!r}: checkpoint shape {arrays[name].shape}"
                                   f" vs config shape {node.shape}")
        node.value = np.array(arrays[name], dtype=np.float64)
