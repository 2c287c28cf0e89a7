"""Training objectives: imitation, actor-critic terms, InfoNCE, and entropy.

All losses return scalar tensors attached to the active tape. Probability
inputs are validated to sum to one; contrastive keys and negatives are
treated as constants (no gradient flows into them by design).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteValue, Tensor, constant


class LengthMismatch(ValueError):
    """Per-step sequences disagree in length."""


class InvalidDistribution(ValueError):
    """A probability vector does not sum to one (tolerance 1e-6) or has negatives."""


class EmptyBatch(ValueError):
    """A loss was asked to average over zero items."""


class DimensionMismatch(ValueError):
    """Contrastive embeddings disagree with the bilinear form's shape."""


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights shared across the objectives.

    lambda_ml scales imitation inside the supervised aggregate, lambda_cl
    scales the consistency terms in the full objective, alpha is the entropy
    temperature, gamma the discount.
    """

    lambda_ml: float = 0.2
    lambda_cl: float = 0.2
    alpha: float = 0.05
    gamma: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.lambda_ml < 0.0 or self.lambda_cl < 0.0:
            raise ValueError("lambda weights must be non-negative")


def _dist_values(dist: Tensor | np.ndarray, where: str) -> np.ndarray:
    v = dist.values if isinstance(dist, Tensor) else np.asarray(dist, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidDistribution(f"{where}: expected a 1-D distribution, got shape {v.shape}")
    if abs(float(v.sum()) - 1.0) > 1e-6 or bool((v < -1e-12).any()):
        raise InvalidDistribution(f"{where}: probabilities sum to {v.sum():.8f}")
    return v


def _total(terms: Sequence[Tensor]) -> Tensor:
    return reduce(ad.add, terms)


def il_loss(action_dists: Sequence[Tensor], teacher_actions: Sequence[int],
            mask: Sequence[bool] | None = None) -> Tensor:
    """Imitation cross-entropy: sum over steps of -log p_t(teacher action)."""
    if len(action_dists) != len(teacher_actions):
        raise LengthMismatch(
            f"{len(action_dists)} distributions vs {len(teacher_actions)} teacher actions")
    if mask is not None and len(mask) != len(action_dists):
        raise LengthMismatch(f"mask length {len(mask)} vs {len(action_dists)} steps")
    terms = []
    for t, (dist, action) in enumerate(zip(action_dists, teacher_actions)):
        if mask is not None and not mask[t]:
            continue
        v = _dist_values(dist, f"il_loss step {t}")
        if not 0 <= int(action) < v.shape[0]:
            raise LengthMismatch(f"teacher action {action} outside {v.shape[0]} candidates")
        terms.append(ad.mul(ad.log(dist[int(action)]), -1.0))
    if not terms:
        raise EmptyBatch("il_loss over zero unmasked steps")
    return _total(terms)


def sac_target(reward: float, done: bool, next_q: float, next_logp: float,
               weights: LossWeights) -> float:
    """Soft one-step bootstrap: r + gamma * (1 - d) * (next_q - alpha * next_logp)."""
    t = float(reward) + weights.gamma * (0.0 if done else 1.0) * (
        float(next_q) - weights.alpha * float(next_logp))
    if not math.isfinite(t):
        raise NonFiniteValue("non-finite target in sac_target")
    return t


def critic_loss(q_values: Sequence[Tensor], targets: Sequence[float]) -> Tensor:
    """Mean squared error between predicted Q and fixed soft targets."""
    if len(q_values) == 0:
        raise EmptyBatch("critic_loss over an empty batch")
    if len(q_values) != len(targets):
        raise LengthMismatch(f"{len(q_values)} q values vs {len(targets)} targets")
    terms = []
    for q, t in zip(q_values, targets):
        if not math.isfinite(float(t)):
            raise NonFiniteValue("non-finite critic target")
        d = ad.add(q, -float(t))
        terms.append(ad.mul(d, d))
    return ad.mul(_total(terms), 1.0 / len(terms))


def actor_loss(dist: Tensor, q_values: np.ndarray, weights: LossWeights) -> Tensor:
    """Expected soft value to maximize, negated: sum_a p(a) * (alpha*log p(a) - Q(a)).

    Q values are treated as constants; only the policy receives gradient.
    Zero-probability actions contribute their exact limit of zero and are
    skipped so masked actions never produce log(0).
    """
    v = _dist_values(dist, "actor_loss")
    q = np.asarray(q_values, dtype=np.float64)
    if q.shape != v.shape:
        raise DimensionMismatch(f"dist shape {v.shape} vs q shape {q.shape}")
    terms = []
    for i in np.nonzero(v > 0.0)[0]:
        p_i = dist[int(i)]
        terms.append(ad.mul(p_i, ad.add(ad.mul(ad.log(p_i), weights.alpha), -float(q[i]))))
    if not terms:
        raise InvalidDistribution("actor_loss: distribution has empty support")
    return _total(terms)


def entropy(dist: Tensor) -> Tensor:
    """Shannon entropy -sum p log p with the 0*log(0)=0 convention."""
    v = _dist_values(dist, "entropy")
    support = np.nonzero(v > 0.0)[0]
    if support.size == 0:
        raise InvalidDistribution("entropy: distribution has empty support")
    terms = [ad.mul(ad.mul(dist[int(i)], ad.log(dist[int(i)])), -1.0) for i in support]
    return _total(terms)


def entropy_values(dist: np.ndarray) -> float:
    """Plain-array entropy for diagnostics and reports."""
    v = np.asarray(dist, dtype=np.float64)
    p = v[v > 0.0]
    return float(-(p * np.log(p)).sum())


def info_nce(query: Tensor, key_pos, negatives, bilinear: Tensor) -> Tensor:
    """InfoNCE with a bilinear similarity: -log softmax of q^T W k over {pos} + negatives.

    Keys and negatives are constants. Internally stabilized by a detached max
    shift, so results match the unstabilized formula for moderate logits.
    """
    kp = np.asarray(key_pos.values if isinstance(key_pos, Tensor) else key_pos,
                    dtype=np.float64)
    negs = np.asarray(
        negatives.values if isinstance(negatives, Tensor) else negatives, dtype=np.float64)
    dim = query.values.shape[0] if query.values.ndim == 1 else -1
    if dim <= 0 or bilinear.values.shape != (dim, dim):
        raise DimensionMismatch(
            f"query {query.shape} vs bilinear {bilinear.shape}")
    if kp.shape != (dim,):
        raise DimensionMismatch(f"positive key shape {kp.shape}, expected ({dim},)")
    if negs.ndim != 2 or negs.shape[1] != dim:
        raise DimensionMismatch(f"negatives shape {negs.shape}, expected (N, {dim})")
    if negs.shape[0] == 0:
        raise EmptyBatch("info_nce with zero negatives")
    qw = ad.matmul(query, bilinear)
    logits = ad.matmul(constant(np.vstack([kp[None, :], negs])), qw)
    return ad.add(ad.logsumexp(logits), ad.mul(logits[0], -1.0))


def ml_aggregate(l_rl: Tensor, l_il: Tensor, weights: LossWeights) -> Tensor:
    """Supervised aggregate: l_rl + lambda_ml * l_il."""
    return ad.add(l_rl, ad.mul(l_il, weights.lambda_ml))


def train_objective(l_ml: Tensor | None, l_cl_il: Tensor | None, l_cl_rl: Tensor | None,
                    weights: LossWeights) -> Tensor:
    """Full objective: l_ml + lambda_cl * (l_cl_il + l_cl_rl).

    A ``None`` term is switched off (ablations). At least one term must
    remain.
    """
    cl_terms = [t for t in (l_cl_il, l_cl_rl) if t is not None]
    parts = []
    if l_ml is not None:
        parts.append(l_ml)
    if cl_terms:
        parts.append(ad.mul(_total(cl_terms), weights.lambda_cl))
    if not parts:
        raise ValueError("train_objective with every term switched off")
    return _total(parts)


def tta_objective(action_dists: Sequence[Tensor]) -> Tensor:
    """Mean prediction entropy over a batch of augmented-view predictions."""
    if len(action_dists) == 0:
        raise EmptyBatch("tta_objective over an empty batch")
    return ad.mul(_total([entropy(d) for d in action_dists]), 1.0 / len(action_dists))
