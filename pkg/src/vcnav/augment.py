"""Observation augmentations producing alternate views for consistency training.

Both kinds are deterministic functions of (spec, observation): view_drop
zeroes a spec-seeded subset of feature dimensions across every sector, while
feature_dropout masks individual elements with a generator derived from the
spec seed and a digest of the observation content, rescaling survivors to
keep the expectation unchanged. Navigability masks are never altered.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import AugmentConfig
from .world import Observation

KINDS = ("view_drop", "feature_dropout")


class EmptyPool(ValueError):
    """sample_augmentation was given no augmentation kinds to choose from."""


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    rate: float
    seed: int


def augmentation_pool(cfg: AugmentConfig) -> list[tuple[str, float, float]]:
    """(kind, rate_min, rate_max) entries the sampler draws from."""
    return [
        ("view_drop", cfg.view_drop_min, cfg.view_drop_max),
        ("feature_dropout", cfg.feature_dropout_min, cfg.feature_dropout_max),
    ]


def sample_augmentation(pool: Sequence[tuple[str, float, float]],
                        rng: np.random.Generator) -> AugmentationSpec:
    """Draw a kind uniformly, a rate uniformly in its range, and a fresh seed."""
    if len(pool) == 0:
        raise EmptyPool("augmentation pool is empty")
    kind, lo, hi = pool[int(rng.integers(len(pool)))]
    if kind not in KINDS:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    if not 0.0 <= lo <= hi < 1.0:
        raise ValueError(f"bad rate range [{lo}, {hi}] for {kind}")
    return AugmentationSpec(kind=kind, rate=float(rng.uniform(lo, hi)),
                            seed=int(rng.integers(2 ** 63)))


def _obs_digest(features: np.ndarray) -> int:
    return int.from_bytes(hashlib.sha256(features.tobytes()).digest()[:8], "little")


def apply_augmentation(spec: AugmentationSpec, obs: Observation) -> Observation:
    """Return a new observation; the input is left untouched."""
    if not 0.0 <= spec.rate < 1.0:
        raise ValueError(f"augmentation rate must lie in [0, 1), got {spec.rate}")
    feats = np.array(obs.features)  # writable copy
    dim = feats.shape[1]
    if spec.kind == "view_drop":
        rng = np.random.default_rng(spec.seed)
        n_drop = int(round(spec.rate * dim))
        dropped = rng.choice(dim, size=n_drop, replace=False)
        feats[:, dropped] = 0.0
    elif spec.kind == "feature_dropout":
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, _obs_digest(obs.features)]))
        keep = rng.random(feats.shape) >= spec.rate
        feats = feats * keep / (1.0 - spec.rate)
    else:
        raise ValueError(f"unknown augmentation kind {spec.kind!r}")
    feats.setflags(write=False)
    return replace(obs, features=feats)
