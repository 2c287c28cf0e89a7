"""Objective tests: frozen arithmetic oracles, then gradient and error checks."""

from __future__ import annotations

import math

import numpy as np
import pytest

from vcnav import autodiff as ad
from vcnav.autodiff import NonFiniteValue, Tape, backward, constant, parameter, softmax
from vcnav.objectives import (
    EmptyBatch,
    DimensionMismatch,
    InvalidDistribution,
    LengthMismatch,
    LossWeights,
    actor_loss,
    critic_loss,
    entropy,
    entropy_values,
    il_loss,
    info_nce,
    ml_aggregate,
    sac_target,
    train_objective,
    tta_objective,
)
from helpers import check_gradients


def test_il_loss_uniform_is_t_log4():
    dists = [softmax(constant(np.zeros(4))) for _ in range(3)]
    loss = il_loss(dists, [0, 3, 1])
    assert abs(loss.item() - 3.0 * math.log(4.0)) < 1e-12


def test_il_loss_mask_excludes_steps():
    dists = [softmax(constant(np.zeros(4))) for _ in range(4)]
    full = il_loss(dists, [0, 1, 2, 3])
    masked = il_loss(dists, [0, 1, 2, 3], mask=[True, False, True, False])
    assert abs(masked.item() - 0.5 * full.item()) < 1e-12
    with pytest.raises(EmptyBatch):
        il_loss(dists, [0, 1, 2, 3], mask=[False] * 4)


def test_il_loss_errors():
    dists = [softmax(constant(np.zeros(4)))]
    with pytest.raises(LengthMismatch):
        il_loss(dists, [0, 1])
    with pytest.raises(LengthMismatch):
        il_loss(dists, [9])
    with pytest.raises(InvalidDistribution):
        il_loss([constant([0.5, 0.2])], [0])
    with pytest.raises(LengthMismatch):
        il_loss(dists, [0], mask=[True, False])


def test_sac_target_fixed_case():
    w = LossWeights(gamma=0.9, alpha=0.1)
    got = sac_target(reward=1.0, done=False, next_q=2.0, next_logp=-1.0, weights=w)
    assert abs(got - 2.89) < 1e-12
    assert sac_target(1.0, True, 99.0, -9.0, w) == 1.0
    with pytest.raises(NonFiniteValue):
        sac_target(float("nan"), False, 0.0, 0.0, w)


def test_critic_loss_is_mean_squared_error():
    qs = [constant(1.0), constant(3.0)]
    loss = critic_loss(qs, [0.0, 0.0])
    assert abs(loss.item() - (1.0 + 9.0) / 2.0) < 1e-12
    with pytest.raises(EmptyBatch):
        critic_loss([], [])
    with pytest.raises(LengthMismatch):
        critic_loss(qs, [0.0])
    with pytest.raises(NonFiniteValue):
        critic_loss(qs, [float("inf"), 0.0])


def test_actor_loss_minimized_by_boltzmann_policy():
    # optimum of E[Q] + alpha*H is softmax(Q/alpha) with value alpha*logsumexp(Q/alpha)
    w = LossWeights(alpha=1.0)
    q = np.array([1.0, 0.0])
    best = softmax(constant(q / w.alpha))
    val = actor_loss(best, q, w).item()
    assert abs(val - (-math.log(1.0 + math.e))) < 1e-12
    for other in ([0.5, 0.5], [0.9, 0.1], [0.2, 0.8]):
        assert actor_loss(constant(other), q, w).item() > val - 1e-12


def test_actor_loss_skips_zero_probability_actions():
    w = LossWeights(alpha=0.5)
    dist = constant([0.7, 0.0, 0.3])
    q = np.array([1.0, -50.0, 2.0])
    got = actor_loss(dist, q, w).item()
    want = sum(p * (w.alpha * math.log(p) - qi)
               for p, qi in zip([0.7, 0.3], [1.0, 2.0]))
    assert abs(got - want) < 1e-12
    with pytest.raises(DimensionMismatch):
        actor_loss(dist, np.zeros(4), w)


def test_entropy_values_and_limits():
    assert abs(entropy(constant([0.25] * 4)).item() - math.log(4.0)) < 1e-12
    assert entropy(constant([1.0, 0.0, 0.0])).item() == 0.0
    v = np.array([0.5, 0.2, 0.3])
    assert abs(entropy(constant(v)).item() - entropy_values(v)) < 1e-12
    with pytest.raises(InvalidDistribution):
        entropy(constant([0.7, 0.7]))


def test_info_nce_equal_similarity_is_log_k_plus_1():
    rng = np.random.default_rng(0)
    for k in (1, 3, 7):
        key = rng.normal(size=5)
        q = parameter(rng.normal(size=5))
        W = parameter(rng.normal(size=(5, 5)))
        negs = np.tile(key, (k, 1))
        loss = info_nce(q, key, negs, W)
        assert abs(loss.item() - math.log(k + 1.0)) < 1e-9


def test_info_nce_matches_unstabilized_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        dim = int(rng.integers(2, 6))
        n = int(rng.integers(1, 9))
        q = parameter(rng.normal(size=dim))
        W = parameter(rng.normal(size=(dim, dim)))
        kp = rng.normal(size=dim)
        negs = rng.normal(size=(n, dim))
        got = info_nce(q, kp, negs, W).item()
        sims = np.concatenate([[q.values @ W.values @ kp],
                               negs @ (q.values @ W.values)])
        want = -math.log(math.exp(sims[0]) / np.exp(sims).sum())
        assert abs(got - want) < 1e-9


def test_info_nce_shape_errors():
    q = parameter(np.ones(4))
    W = parameter(np.eye(4))
    with pytest.raises(DimensionMismatch):
        info_nce(q, np.ones(3), np.ones((2, 4)), W)
    with pytest.raises(DimensionMismatch):
        info_nce(q, np.ones(4), np.ones((2, 3)), W)
    with pytest.raises(DimensionMismatch):
        info_nce(q, np.ones(4), np.ones((2, 4)), parameter(np.eye(3)))
    with pytest.raises(EmptyBatch):
        info_nce(q, np.ones(4), np.zeros((0, 4)), W)


def test_aggregates_compose_linearly():
    w = LossWeights(lambda_ml=0.2, lambda_cl=0.2)
    l_rl, l_il = constant(1.5), constant(2.0)
    assert abs(ml_aggregate(l_rl, l_il, w).item() - (1.5 + 0.2 * 2.0)) < 1e-12
    total = train_objective(constant(1.0), constant(3.0), constant(5.0), w)
    assert abs(total.item() - (1.0 + 0.2 * 8.0)) < 1e-12
    assert abs(train_objective(None, constant(3.0), None, w).item() - 0.6) < 1e-12
    assert abs(train_objective(constant(1.0), None, None, w).item() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        train_objective(None, None, None, w)


def test_tta_objective_is_mean_entropy():
    dists = [constant([0.25] * 4), constant([1.0, 0.0, 0.0, 0.0])]
    got = tta_objective(dists).item()
    assert abs(got - 0.5 * math.log(4.0)) < 1e-12
    with pytest.raises(EmptyBatch):
        tta_objective([])


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(gamma=1.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_ml=-0.1)


# -- gradient checks against finite differences --------------------------------

def test_fd_il_loss_through_softmax():
    rng = np.random.default_rng(2)
    logits = [parameter(rng.normal(size=5)) for _ in range(3)]
    teacher = [1, 4, 0]

    def build():
        return il_loss([softmax(l) for l in logits], teacher)

    check_gradients(build, {f"l{i}": l for i, l in enumerate(logits)})


def test_fd_info_nce():
    rng = np.random.default_rng(3)
    q = parameter(rng.normal(size=4))
    W = parameter(rng.normal(size=(4, 4)))
    kp = rng.normal(size=4)
    negs = rng.normal(size=(6, 4))
    check_gradients(lambda: info_nce(q, kp, negs, W), {"q": q, "W": W})


def test_fd_actor_and_entropy_through_softmax():
    rng = np.random.default_rng(4)
    logits = parameter(rng.normal(size=5))
    q = rng.normal(size=5)
    w = LossWeights(alpha=0.3)
    check_gradients(lambda: actor_loss(softmax(logits), q, w), {"logits": logits})
    check_gradients(lambda: entropy(softmax(logits)), {"logits": logits})
    check_gradients(
        lambda: tta_objective([softmax(logits), softmax(logits * 0.5)]),
        {"logits": logits})


def test_fd_critic_loss():
    rng = np.random.default_rng(5)
    qpred = parameter(rng.normal(size=3))
    targets = rng.normal(size=3)
    check_gradients(lambda: critic_loss([qpred[i] for i in range(3)], list(targets)),
                    {"q": qpred})
