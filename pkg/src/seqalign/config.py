"""Run configuration: a flat ``key=value`` file plus command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

FINE_METHODS = ("sort", "viterbi", "split")
VIDEO_HEADS = ("cls", "meanpool")
PARAGRAPH_MODES = ("concat", "meanpool")


@dataclass(frozen=True)
class RunConfig:
    # dimensions
    d_raw: int = 32
    d_model: int = 32
    d_rep: int = 32
    depth: int = 2
    heads: int = 2
    d_ff: int = 64
    n_max: int = 32
    n_frames: int = 16
    # synthetic data
    n_tasks: int = 6
    n_orders: int = 2
    n_steps: int = 4
    videos_per_order: int = 8
    eval_videos_per_order: int = 8
    noise_sigma: float = 0.1
    dirichlet_alpha: float = 2.0
    order_gamma: float = 0.8
    paragraph: str = "concat"
    # optimisation
    batch_size: int = 8
    lr_base: float = 5e-4
    weight_decay: float = 0.01
    epochs: int = 100
    clip_norm: float = 1.0
    # objective
    lambda_fine: float = 1.0
    tau_init: float = 0.07
    tau_g: float = 1.0
    tau_v: float = 0.1
    gumbel_noise: bool = True
    fine_method: str = "sort"
    video_head: str = "cls"
    cls_weight: float = 0.0
    # evaluation
    tau_threshold: float = 1.0
    match_candidates: int = 5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("d_raw", "d_model", "d_rep", "depth", "heads", "d_ff", "n_max",
                    "n_frames", "n_tasks", "n_orders", "n_steps", "videos_per_order",
                    "batch_size", "epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.n_frames > self.n_max:
            raise ConfigError(f"n_frames={self.n_frames} exceeds n_max={self.n_max}")
        if self.n_steps > self.n_frames:
            raise ConfigError(f"n_steps (K={self.n_steps}) exceeds n_frames={self.n_frames}")
        if self.fine_method not in FINE_METHODS:
            raise ConfigError(f"fine_method must be one of {FINE_METHODS}")
        if self.video_head not in VIDEO_HEADS:
            raise ConfigError(f"video_head must be one of {VIDEO_HEADS}")
        if self.paragraph not in PARAGRAPH_MODES:
            raise ConfigError(f"paragraph must be one of {PARAGRAPH_MODES}")
        if self.tau_g <= 0 or self.tau_v <= 0 or self.tau_init <= 0:
            raise ConfigError("temperatures must be positive")
        if self.lambda_fine < 0:
            raise ConfigError("lambda_fine must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: dict[str, str]) -> RunConfig:
        return self.replace(**{k: _coerce(k, v) for k, v in pairs.items()})

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> RunConfig:
        pairs = parse_pairs(Path(path).read_text(encoding="utf-8").splitlines(), str(path))
        pairs.update(overrides or {})
        return cls().with_overrides(pairs)

    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {raw!r}") from None
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        pairs[key] = value
    return pairs
