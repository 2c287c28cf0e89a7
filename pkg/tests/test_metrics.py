"""Metric tests: brute-force DTW oracle, formula identities, bound invariants."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from vcnav.config import WorldConfig
from vcnav.metrics import (
    SceneMismatch,
    TrajectoryRecord,
    aggregate_rows,
    compute_metrics,
    dtw_distance,
    ndtw,
    path_length,
)
from vcnav.world import generate_world, teacher_walk


@pytest.fixture(scope="module")
def world():
    cfg = WorldConfig(seen_scenes=2, unseen_scenes=1, nodes_min=12, nodes_max=16,
                      train_per_scene=4, val_per_scene=4)
    return generate_world(cfg, seed=21)


@pytest.fixture(scope="module")
def scene(world):
    return next(iter(world.split_scenes("seen")))


def brute_force_dtw(scene, path, ref):
    """Exhaustive minimum over all monotone alignments (small inputs only)."""
    n, m = len(path), len(ref)

    @lru_cache(maxsize=None)
    def best(i, j):
        c = float(scene.dist[path[i], ref[j]])
        if i == 0 and j == 0:
            return c
        options = []
        if i > 0:
            options.append(best(i - 1, j))
        if j > 0:
            options.append(best(i, j - 1))
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1))
        return c + min(options)

    return best(n - 1, m - 1)


def random_walk(scene, rng, length):
    nodes = [int(rng.integers(scene.n_nodes))]
    for _ in range(length - 1):
        nbrs = [nb for _, nb, _ in scene.neighbors(nodes[-1])]
        nodes.append(int(rng.choice(nbrs)))
    return nodes


def episode_for(world, scene, rng):
    from vcnav.world import build_instruction, Episode
    for _ in range(100):
        a, b = rng.integers(0, scene.n_nodes, size=2)
        if a == b:
            continue
        path = teacher_walk(scene, int(a), int(b))
        if len(path) >= 3:
            return Episode(episode_id="t", scene_id=scene.scene_id, split="val_seen",
                           start=int(a), target=int(b), gt_path=tuple(path),
                           instruction=build_instruction(scene, path, world.landmark_names))
    raise RuntimeError("no episode found")


def test_dtw_matches_bruteforce_oracle(scene):
    rng = np.random.default_rng(0)
    for _ in range(60):
        path = random_walk(scene, rng, int(rng.integers(1, 9)))
        ref = random_walk(scene, rng, int(rng.integers(1, 9)))
        got = dtw_distance(scene, path, ref)
        want = brute_force_dtw(scene, tuple(path), tuple(ref))
        assert abs(got - want) < 1e-9


def test_perfect_trajectory_scores_ones(world, scene):
    rng = np.random.default_rng(1)
    ep = episode_for(world, scene, rng)
    row = compute_metrics(list(ep.gt_path), ep, scene)
    assert row["NE"] == 0.0
    for name in ("SR", "SPL", "nDTW", "sDTW", "CLS"):
        assert abs(row[name] - 1.0) < 1e-9, name
    assert abs(row["TL"] - path_length(scene, list(ep.gt_path))) < 1e-12


def test_success_at_double_length_halves_spl(world, scene):
    rng = np.random.default_rng(2)
    ep = episode_for(world, scene, rng)
    gt = list(ep.gt_path)
    # walk the path, detour back and forth across the final edge, then finish
    last, prev = gt[-1], gt[-2]
    detour = gt + [prev, last]
    while path_length(scene, detour) < 2.0 * path_length(scene, gt) - 1e-9:
        detour += [prev, last]
    row = compute_metrics(detour, ep, scene)
    assert row["SR"] == 1.0
    expected = path_length(scene, gt) / path_length(scene, detour)
    assert abs(row["SPL"] - expected) < 1e-12
    assert row["SPL"] <= 0.5 + 1e-12


def test_metric_bounds_on_random_walks(world, scene):
    rng = np.random.default_rng(3)
    ep = episode_for(world, scene, rng)
    for _ in range(40):
        walk = [ep.start] + []
        cur = ep.start
        for _ in range(int(rng.integers(1, 10))):
            nbrs = [nb for _, nb, _ in scene.neighbors(cur)]
            cur = int(rng.choice(nbrs))
            walk.append(cur)
        row = compute_metrics(walk, ep, scene)
        for name in ("SR", "SPL", "CLS", "nDTW", "sDTW"):
            assert 0.0 <= row[name] <= 1.0, name
        assert row["SPL"] <= row["SR"] + 1e-12
        assert row["nDTW"] > 0.0
        assert row["TL"] >= 0.0 and row["NE"] >= 0.0


def test_ndtw_identity_and_monotone_degradation(world, scene):
    rng = np.random.default_rng(4)
    ep = episode_for(world, scene, rng)
    gt = list(ep.gt_path)
    assert abs(ndtw(scene, gt, gt, scene.d_th) - 1.0) < 1e-12
    # drifting the endpoint away from the target lowers nDTW
    nbrs = [nb for _, nb, _ in scene.neighbors(gt[-1])]
    away = max(nbrs, key=lambda n: scene.dist[n, ep.target])
    assert ndtw(scene, gt + [away], gt, scene.d_th) < 1.0


def test_scene_and_path_validation(world, scene):
    rng = np.random.default_rng(5)
    ep = episode_for(world, scene, rng)
    other = world.split_scenes("unseen")[0]
    with pytest.raises(SceneMismatch):
        compute_metrics(list(ep.gt_path), ep, other)
    with pytest.raises(SceneMismatch):
        compute_metrics([ep.start, ep.start], ep, scene)  # self-loop is not an edge
    with pytest.raises(SceneMismatch):
        compute_metrics([ep.target], ep, scene)  # wrong starting node
    with pytest.raises(ValueError):
        compute_metrics([], ep, scene)

    rec = TrajectoryRecord(episode_id=ep.episode_id, scene_id="other",
                           nodes=list(ep.gt_path), actions=[], action_dists=[],
                           entropies=[], stop_reason="stopped")
    with pytest.raises(SceneMismatch):
        compute_metrics(rec, ep, scene)
    with pytest.raises(ValueError):
        TrajectoryRecord(episode_id="e", scene_id="s", nodes=[], actions=[],
                         action_dists=[], entropies=[], stop_reason="wandered")


def test_aggregate_is_plain_mean():
    rows = [dict(TL=1.0, NE=0.0, SR=1.0, SPL=1.0, CLS=1.0, nDTW=1.0, sDTW=1.0),
            dict(TL=3.0, NE=2.0, SR=0.0, SPL=0.0, CLS=0.5, nDTW=0.5, sDTW=0.0)]
    agg = aggregate_rows(rows)
    assert agg["TL"] == 2.0 and agg["SR"] == 0.5 and agg["CLS"] == 0.75
    with pytest.raises(ValueError):
        aggregate_rows([])
