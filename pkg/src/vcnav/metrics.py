"""Trajectory metrics: TL, NE, SR, SPL, nDTW, sDTW, CLS.

Formulas (d_G is geodesic distance on the scene graph, d_th the success
radius, R the executed path, G the ground-truth path, l = length(G),
p = length(R)):

  TL   = sum of edge lengths walked
  NE   = d_G(final node, target)
  SR   = 1[NE <= d_th]
  SPL  = SR * l / max(l, p)
  nDTW = exp(-DTW(R, G) / (|G| * d_th)), DTW under d_G with monotone
         alignment steps (i-1,j), (i,j-1), (i-1,j-1) and full boundary
  sDTW = SR * nDTW
  CLS  = PC * LS with
         PC = (1/|G|) * sum_{g in G} exp(-d_G(g, R) / d_th)
         EPL = PC * l
         LS = EPL / (EPL + |EPL - p|)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import Episode, Scene


class SceneMismatch(ValueError):
    """Trajectory, episode, and scene do not belong together."""


STOP_REASONS = ("stopped", "max_steps")


@dataclass
class TrajectoryRecord:
    """An executed episode: visited nodes plus per-step prediction snapshots."""

    episode_id: str
    scene_id: str
    nodes: list[int]
    actions: list[int]
    action_dists: list[np.ndarray] = field(repr=False)
    entropies: list[float]
    stop_reason: str

    def __post_init__(self):
        if self.stop_reason not in STOP_REASONS:
            raise ValueError(f"stop_reason must be one of {STOP_REASONS}")


def path_length(scene: Scene, nodes: list[int]) -> float:
    total = 0.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        total += float(np.linalg.norm(scene.positions[a] - scene.positions[b]))
    return total


def _check_walkable(scene: Scene, nodes: list[int]) -> None:
    for a, b in zip(nodes[:-1], nodes[1:]):
        scene.check_node(a)
        if int(b) not in scene.sector_table[int(a)]:
            raise SceneMismatch(
                f"nodes {a}->{b} are not adjacent in scene {scene.scene_id}")
    scene.check_node(nodes[-1])


def dtw_distance(scene: Scene, path: list[int], ref: list[int]) -> float:
    """Dynamic-time-warping distance between node sequences under geodesics."""
    n, m = len(path), len(ref)
    cost = scene.dist[np.ix_([int(x) for x in path], [int(x) for x in ref])]
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = cost[i, j] + best
    return float(acc[n - 1, m - 1])


def ndtw(scene: Scene, path: list[int], ref: list[int], d_th: float) -> float:
    return float(np.exp(-dtw_distance(scene, path, ref) / (len(ref) * d_th)))


def coverage_weighted_length_score(scene: Scene, path: list[int], ref: list[int],
                                   d_th: float) -> float:
    """CLS: how well the walked path covers the reference at a sensible length."""
    path_idx = [int(x) for x in path]
    pc = float(np.mean([np.exp(-scene.dist[int(g), path_idx].min() / d_th) for g in ref]))
    ref_len = path_length(scene, ref)
    epl = pc * ref_len
    p = path_length(scene, path)
    ls = epl / (epl + abs(epl - p))
    return pc * ls


def compute_metrics(trajectory: TrajectoryRecord | list[int], episode: Episode,
                    scene: Scene, d_th: float | None = None) -> dict[str, float]:
    """Per-episode metric row; a pure function of its arguments."""
    if isinstance(trajectory, TrajectoryRecord):
        if trajectory.scene_id != scene.scene_id:
            raise SceneMismatch(
                f"trajectory scene {trajectory.scene_id!r} vs scene {scene.scene_id!r}")
        nodes = list(trajectory.nodes)
    else:
        nodes = [int(x) for x in trajectory]
    if episode.scene_id != scene.scene_id:
        raise SceneMismatch(
            f"episode scene {episode.scene_id!r} vs scene {scene.scene_id!r}")
    if not nodes:
        raise ValueError("empty trajectory")
    if nodes[0] != episode.start:
        raise SceneMismatch(f"trajectory starts at {nodes[0]}, episode at {episode.start}")
    _check_walkable(scene, nodes)

    if d_th is None:
        d_th = scene.d_th
    gt = list(episode.gt_path)
    tl = path_length(scene, nodes)
    ne = float(scene.dist[nodes[-1], episode.target])
    sr = 1.0 if ne <= d_th else 0.0
    gt_len = path_length(scene, gt)
    spl = sr * gt_len / max(gt_len, tl)
    nd = ndtw(scene, nodes, gt, d_th)
    return {
        "TL": tl,
        "NE": ne,
        "SR": sr,
        "SPL": spl,
        "CLS": coverage_weighted_length_score(scene, nodes, gt, d_th),
        "nDTW": nd,
        "sDTW": sr * nd,
    }


METRIC_NAMES = ("TL", "NE", "SR", "SPL", "CLS", "nDTW", "sDTW")


def aggregate_rows(rows: list[dict[str, float]]) -> dict[str, float]:
    """Plain means over per-episode rows; no hidden reweighting."""
    if not rows:
        raise ValueError("no metric rows to aggregate")
    return {name: float(np.mean([r[name] for r in rows])) for name in METRIC_NAMES}
