"""Run configuration: dataclasses, JSON loading, hashing, named RNG streams.

A single integer seed drives the whole pipeline. Independent substreams are
derived per purpose (world synthesis, parameter init, rollouts, augmentation
sampling, test-time adaptation) so a change in one consumer never shifts the
draws of another.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .objectives import LossWeights


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class ConfigParseError(ConfigError):
    """The config file is not valid JSON or contains unknown keys."""


STREAM_NAMES = ("world", "init", "rollout", "augmentation", "tta")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Derive a named, optionally indexed generator from the run seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words, *map(int, extra)]))


def canonical_json(obj: Any) -> str:
    """Stable JSON encoding: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class WorldConfig:
    seen_scenes: int = 6
    unseen_scenes: int = 10
    nodes_min: int = 18
    nodes_max: int = 30
    views: int = 12
    feature_dim: int = 32
    landmarks: int = 24
    area: float = 20.0
    noise_sigma: float = 0.10
    style_sigma: float = 0.35
    sigma_shift: float = 0.5
    shift_support: int = 4          # coordinates the unseen offset touches (capped at feature_dim)
    hops_min: int = 4
    hops_max: int = 7
    train_per_scene: int = 40
    val_per_scene: int = 16
    success_radius_scale: float = 1.5


@dataclass
class AgentConfig:
    word_dim: int = 32
    hidden: int = 64
    obs_embed: int = 32
    proj_dim: int = 32
    action_embed: int = 32
    max_steps: int = 15
    momentum: float = 0.99
    queue_size: int = 256
    init_scale: float = 0.1


@dataclass
class Switches:
    """Which objective terms participate in training (ablation knobs)."""

    ml: bool = True
    cl_il: bool = True
    cl_rl: bool = True

    def label(self) -> str:
        on = [n for n in ("ml", "cl_il", "cl_rl") if getattr(self, n)]
        return "+".join(on) if on else "none"


@dataclass
class AugmentConfig:
    view_drop_min: float = 0.3
    view_drop_max: float = 0.5
    feature_dropout_min: float = 0.1
    feature_dropout_max: float = 0.4


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    clip_norm: float = 25.0
    replay_capacity: int = 4000
    replay_batch: int = 16
    replay_min: int = 64
    eval_every: int = 100
    eval_episodes: int = 64
    checkpoint_every: int = 1000
    switches: Switches = field(default_factory=Switches)


@dataclass
class TTAConfig:
    iters: int = 10
    batch: int = 8
    lr: float = 1e-4
    update_momentum: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)


_SECTIONS = {
    "world": WorldConfig,
    "agent": AgentConfig,
    "weights": LossWeights,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "tta": TTAConfig,
}


def build_section(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigParseError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "switches":
            if not isinstance(value, dict):
                raise ConfigParseError(f"{where}.switches must be an object")
            value = build_section(Switches, value, f"{where}.switches")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigParseError(f"bad values in {where}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigParseError("config root must be a JSON object")
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigParseError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig(seed=int(data.get("seed", 0)))
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigParseError(f"section {name!r} must be an object")
        setattr(cfg, name, build_section(cls, section, name))
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON run config."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigParseError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigParseError(f"invalid JSON in {path}: {e}") from e
    return config_from_dict(data)


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate_world_section(w: WorldConfig) -> None:
    need = _need
    need(w.seen_scenes >= 1 and w.unseen_scenes >= 0, "world: scene counts out of range")
    need(8 <= w.nodes_min <= w.nodes_max, "world: node bounds out of range")
    need(w.views >= 4, "world: views must be at least 4")
    need(w.feature_dim >= 4, "world: feature_dim must be at least 4")
    need(2 <= w.landmarks, "world: need at least 2 landmark types")
    need(w.area > 0, "world: area must be positive")
    need(w.noise_sigma >= 0 and w.style_sigma >= 0 and w.sigma_shift >= 0,
         "world: sigmas must be non-negative")
    need(w.shift_support >= 1, "world: shift_support must be at least 1")
    need(1 <= w.hops_min <= w.hops_max, "world: hop bounds out of range")
    need(w.train_per_scene >= 1 and w.val_per_scene >= 1, "world: episode counts out of range")
    need(w.success_radius_scale > 0, "world: success_radius_scale must be positive")


def validate(cfg: RunConfig) -> None:
    """Range and consistency checks across all sections."""
    w, a, t, tta = cfg.world, cfg.agent, cfg.train, cfg.tta
    need = _need

    validate_world_section(w)

    for name in ("word_dim", "hidden", "obs_embed", "proj_dim", "action_embed"):
        need(getattr(a, name) >= 2, f"agent: {name} must be at least 2")
    need(a.hidden % 2 == 0, "agent: hidden must be even (bidirectional split)")
    need(a.max_steps >= w.hops_max, "agent: max_steps must cover the longest episode")
    need(0.0 <= a.momentum < 1.0, "agent: momentum must lie in [0, 1)")
    need(a.queue_size >= 1, "agent: queue_size must be positive")
    need(a.init_scale > 0, "agent: init_scale must be positive")

    need(t.iters >= 0 and t.batch_size >= 1, "train: iters non-negative, batch_size positive")
    need(t.lr > 0 and tta.lr > 0, "learning rates must be positive")
    need(t.clip_norm > 0, "train: clip_norm must be positive")
    need(t.replay_batch <= t.replay_capacity, "train: replay_batch exceeds capacity")
    need(t.replay_min >= t.replay_batch, "train: replay_min must cover one batch")
    need(t.eval_every >= 1 and t.eval_episodes >= 1, "train: eval settings out of range")
    need(tta.iters >= 0 and tta.batch >= 1, "tta: iters/batch out of range")


def to_dict(cfg: RunConfig) -> dict:
    data = dataclasses.asdict(cfg)
    return {"seed": cfg.seed, **{k: data[k] for k in _SECTIONS}}


def model_hash(cfg: RunConfig) -> str:
    """Hash of the sections that define model/world identity for checkpoints."""
    ident = {"world": dataclasses.asdict(cfg.world), "agent": dataclasses.asdict(cfg.agent)}
    return sha256_text(canonical_json(ident))
