"""Dataclass configs and their INI-style key/value files.

A config file has ``[model]`` and ``[train]`` sections; keys that are absent
keep their defaults, and ``include = other.ini`` in a section's ``[meta]``
header pulls another file in first. Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

__all__ = ["ConfigError", "ModelConfig", "TrainConfig", "RunConfig", "load_config", "dump_config"]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    latent_channels: int = 16
    hidden: int = 64
    layers: int = 2
    mlp_hidden: int = 192
    heads: int = 4
    downsample: int = 4
    sweep_planes: int = 8
    depth_bins: int = 32
    cost_strategy: str = "cost-free"
    s_min: float = 0.5
    s_max: float = 15.0
    near: float = 1.0
    far: float = 100.0
    decoder_widths: tuple = (64, 32, 16)
    image_skip: bool = True
    qk_norm_init: Optional[float] = None  # None: sqrt(head_dim)
    normalize_poses: bool = False
    encoder_trainable: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.downsample != 4:
            raise ConfigError("only 4x latent downsampling is supported")
        if self.sweep_planes < 1 or self.depth_bins < 2:
            raise ConfigError("need sweep_planes >= 1 and depth_bins >= 2")
        if not (0 < self.s_min < self.s_max):
            raise ConfigError("need 0 < s_min < s_max")
        if not (0 < self.near < self.far):
            raise ConfigError("need 0 < near < far")
        from .volume import CostStrategy

        try:
            CostStrategy.parse(self.cost_strategy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def qk_scale(self) -> float:
        return self.qk_norm_init if self.qk_norm_init is not None else math.sqrt(self.head_dim)

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls(layers=12, hidden=512, mlp_hidden=1536, heads=8, depth_bins=128, sweep_planes=32, latent_channels=32,
                   decoder_widths=(256, 128, 64))

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()


@dataclass
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    peak_lr: float = 3e-4
    min_lr: float = 5e-5
    warmup_steps: int = 100
    decay_until: int = 2000
    ema_decay: float = 0.999
    grad_clip: float = 0.5
    flip_prob: float = 0.5
    target_pose_prob: float = 0.5
    aux_weight: float = 1.0
    gradient_loss_weight: float = 1.0
    lambda_perceptual: float = 0.05
    perceptual: bool = False
    grad_accum: int = 1
    min_context: int = 2
    max_context: int = 2
    targets_per_step: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 500
    log_every: int = 10

    def __post_init__(self):
        if self.min_lr > self.peak_lr:
            raise ConfigError("min_lr must not exceed peak_lr")
        if self.warmup_steps >= self.decay_until:
            raise ConfigError("warmup_steps must be smaller than decay_until")
        if not (2 <= self.min_context <= self.max_context):
            raise ConfigError("need 2 <= min_context <= max_context")
        if self.grad_accum < 1 or self.targets_per_step < 1:
            raise ConfigError("grad_accum and targets_per_step must be >= 1")

    @classmethod
    def full(cls) -> "TrainConfig":
        return cls(steps=1_000_000, peak_lr=1e-4, min_lr=5e-5, warmup_steps=3000, decay_until=150_000)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(raw: str, default, name: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s for s in text.replace("(", "").replace(")", "").split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        if default is None:
            return None if text.lower() in ("", "none") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def _apply(obj, values: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        changes[key] = _coerce(str(raw), getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **changes)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _read(path: Path, seen: set) -> configparser.ConfigParser:
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if parser.has_option("meta", "include"):
        base = _read((path.parent / parser.get("meta", "include")).resolve(), seen)
        for section in parser.sections():
            if not base.has_section(section):
                base.add_section(section)
            for key, value in parser.items(section, raw=True):
                base.set(section, key, value)
        parser = base
    return parser


def load_config(path=None, overrides: Optional[dict] = None, base: Optional[RunConfig] = None) -> RunConfig:
    """Resolve defaults <- file (with includes) <- ``overrides`` ({"model": {...}, "train": {...}})."""
    cfg = base or RunConfig()
    sections: dict[str, dict] = {"model": {}, "train": {}}
    if path is not None:
        parser = _read(Path(path).resolve(), set())
        for section in parser.sections():
            if section == "meta":
                continue
            if section not in sections:
                raise ConfigError(f"unknown section [{section}]")
            sections[section].update({k: v for k, v in parser.items(section, raw=True)})
    for section, values in (overrides or {}).items():
        sections.setdefault(section, {}).update({k: str(v) for k, v in values.items() if v is not None})
    model = _apply(cfg.model, sections["model"], "model")
    train = _apply(cfg.train, sections["train"], "train")
    return RunConfig(model, train)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in ("model", "train"):
        section = getattr(cfg, name)
        parser[name] = {f.name: _fmt(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
