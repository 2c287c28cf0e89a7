"""Synthetic navigation worlds: planar graph scenes, episodes, instructions.

A scene is a connected planar-ish graph. Each node exposes one feature vector
per angular sector (a "view"); a sector containing an edge shows the landmark
signature of the neighbor behind it plus a scene style vector and noise,
while empty sectors show style and noise only. Unseen scenes offset their
style along a fixed direction concentrated on a few feature coordinates,
which is the domain gap test-time adaptation is meant to absorb.

Actions are sector indices 0..V-1 (move through that sector) plus V (stop).
Features are regenerated bit-exactly from stored per-scene seeds on load, so
world files stay small and deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import Delaunay

from .config import ConfigError, ConfigParseError, WorldConfig, canonical_json, sha256_text, substream


class InvalidConfig(ConfigError):
    """World parameters out of range (node counts, views, dims, hop bounds)."""


class UnknownNode(ValueError):
    """A node id does not exist in the scene."""


class InvalidAction(ValueError):
    """Action index out of range or pointing at a non-navigable sector."""


class SceneMissing(KeyError):
    """A referenced scene id is absent from the world."""


class EpisodeUnsatisfiable(InvalidConfig):
    """No start/target pair within the requested hop range exists."""


LANDMARK_NAMES = (
    "sofa", "piano", "bed", "lamp", "table", "mirror", "plant", "fridge",
    "sink", "oven", "shelf", "rug", "vase", "clock", "stairs", "door",
    "window", "desk", "couch", "bench", "easel", "statue", "fern", "globe",
    "harp", "kettle", "ladder", "mural", "organ", "pillar", "quilt", "radio",
    "stove", "trunk", "urn", "wheel",
)

FUNCTION_WORDS = ("go", "to", "then", "left", "right", "straight", "stop", "at")

WORLD_FORMAT = 1
EPISODES_FORMAT = 1


@dataclass
class Scene:
    """One graph environment plus its derived navigation tables."""

    scene_id: str
    split: str                      # "seen" or "unseen"
    positions: np.ndarray           # (n, 2)
    landmarks: np.ndarray           # (n,) landmark id per node
    edges: list[tuple[int, int]]    # undirected, a < b
    style: np.ndarray               # (D,)
    feature_seed: int
    # derived, filled by finalize()
    sector_table: np.ndarray = field(default=None, repr=False)   # (n, V) neighbor or -1
    sector_length: np.ndarray = field(default=None, repr=False)  # (n, V) edge length
    features: np.ndarray = field(default=None, repr=False)       # (n, V, D)
    dist: np.ndarray = field(default=None, repr=False)           # (n, n) geodesics
    mean_edge: float = 0.0
    d_th: float = 0.0

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def views(self) -> int:
        return self.sector_table.shape[1]

    def check_node(self, node: int) -> int:
        node = int(node)
        if not 0 <= node < self.n_nodes:
            raise UnknownNode(f"node {node} not in scene {self.scene_id} (n={self.n_nodes})")
        return node

    def neighbors(self, node: int) -> list[tuple[int, int, float]]:
        """(sector, neighbor, edge length) triples, sector-ascending."""
        node = self.check_node(node)
        row = self.sector_table[node]
        return [(s, int(row[s]), float(self.sector_length[node, s]))
                for s in np.nonzero(row >= 0)[0]]

    def finalize(self, cfg: WorldConfig, landmark_features: np.ndarray) -> None:
        """Fill all derived tables; must run once after construction or load."""
        n, V = self.n_nodes, cfg.views
        self.sector_table = np.full((n, V), -1, dtype=np.int64)
        self.sector_length = np.zeros((n, V))
        adj = np.zeros((n, n))
        for a, b in self.edges:
            length = float(np.linalg.norm(self.positions[a] - self.positions[b]))
            for u, v in ((a, b), (b, a)):
                s = sector_of(self.positions, u, v, V)
                if self.sector_table[u, s] >= 0:
                    raise InvalidConfig(f"scene {self.scene_id}: sector conflict at node {u}")
                self.sector_table[u, s] = v
                self.sector_length[u, s] = length
            adj[a, b] = adj[b, a] = length
        degrees = (self.sector_table >= 0).sum(axis=1)
        if degrees.min() < 2:
            raise InvalidConfig(f"scene {self.scene_id}: node with degree below 2")
        self.dist = shortest_path(adj, method="D", directed=False)
        if not np.isfinite(self.dist).all():
            raise InvalidConfig(f"scene {self.scene_id}: graph is not connected")
        self.mean_edge = float(np.mean([adj[a, b] for a, b in self.edges]))
        self.d_th = cfg.success_radius_scale * self.mean_edge
        self.features = _build_features(self, cfg, landmark_features)


@dataclass(frozen=True)
class Episode:
    episode_id: str
    scene_id: str
    split: str                  # "train", "val_seen", "val_unseen"
    start: int
    target: int
    gt_path: tuple[int, ...]
    instruction: tuple[str, ...]


@dataclass(frozen=True)
class Observation:
    """What the agent sees at a node: per-sector features plus a navigability mask."""

    features: np.ndarray    # (V, D), read-only
    nav_mask: np.ndarray    # (V,) bool, True where an edge exists
    node: int
    scene_id: str


@dataclass
class World:
    config: WorldConfig
    seed: int
    landmark_names: tuple[str, ...]
    landmark_features: np.ndarray       # (L, D)
    shift_direction: np.ndarray         # (D,) unit vector for the unseen-style offset
    scenes: dict[str, Scene]
    vocab: tuple[str, ...]

    def scene(self, scene_id: str) -> Scene:
        try:
            return self.scenes[scene_id]
        except KeyError:
            raise SceneMissing(scene_id) from None

    def token_ids(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocab)}

    def split_scenes(self, split: str) -> list[Scene]:
        return [s for s in self.scenes.values() if s.split == split]


def sector_of(positions: np.ndarray, a: int, b: int, views: int) -> int:
    """Angular sector of node b as seen from node a."""
    d = positions[b] - positions[a]
    angle = math.atan2(d[1], d[0]) % (2.0 * math.pi)
    return min(int(angle / (2.0 * math.pi / views)), views - 1)


def _build_features(scene: Scene, cfg: WorldConfig, landmark_features: np.ndarray) -> np.ndarray:
    """Per-sector features, regenerable bit-exactly from the stored seed.

    Draw order is fixed (nodes ascending, sectors ascending, one noise vector
    each) so the result depends only on stored scene data.
    """
    rng = np.random.default_rng(scene.feature_seed)
    n, V, D = scene.n_nodes, cfg.views, cfg.feature_dim
    out = np.empty((n, V, D))
    for node in range(n):
        for s in range(V):
            noise = cfg.noise_sigma * rng.normal(size=D)
            nb = scene.sector_table[node, s]
            if nb >= 0:
                out[node, s] = landmark_features[scene.landmarks[nb]] + scene.style + noise
            else:
                out[node, s] = scene.style + noise
    out.setflags(write=False)
    return out


# -- scene synthesis ---------------------------------------------------------


def _sample_positions(rng: np.random.Generator, n: int, area: float) -> np.ndarray | None:
    min_dist = 0.55 * area / math.sqrt(n)
    pts: list[np.ndarray] = []
    for _ in range(300 * n):
        cand = rng.uniform(0.0, area, size=2)
        if all(np.linalg.norm(cand - p) >= min_dist for p in pts):
            pts.append(cand)
            if len(pts) == n:
                return np.array(pts)
    return None


def _delaunay_edges(positions: np.ndarray) -> set[tuple[int, int]]:
    tri = Delaunay(positions)
    edges: set[tuple[int, int]] = set()
    for simplex in tri.simplices:
        for i in range(3):
            a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
            edges.add((min(a, b), max(a, b)))
    return edges


def _resolve_sector_conflicts(g: nx.Graph, positions: np.ndarray, views: int) -> bool:
    """Drop longer edges sharing a sector, never disconnecting or starving a node."""

    def conflicts() -> list[tuple[float, int, int]]:
        out = []
        for u in g.nodes:
            by_sector: dict[int, list[int]] = {}
            for v in g.neighbors(u):
                by_sector.setdefault(sector_of(positions, u, v, views), []).append(v)
            for group in by_sector.values():
                if len(group) > 1:
                    group = sorted(group, key=lambda v: (np.linalg.norm(positions[u] - positions[v]), v))
                    for v in group[1:]:
                        out.append((float(np.linalg.norm(positions[u] - positions[v])),
                                    min(u, v), max(u, v)))
        return sorted(set(out), reverse=True)

    for _ in range(g.number_of_edges()):
        todo = conflicts()
        if not todo:
            return True
        removed = False
        for _, a, b in todo:
            if not g.has_edge(a, b) or g.degree(a) <= 2 or g.degree(b) <= 2:
                continue
            g.remove_edge(a, b)
            if nx.is_connected(g):
                removed = True
                break
            g.add_edge(a, b)
        if not removed:
            return False
    return not conflicts()


def _fix_low_degree(g: nx.Graph, positions: np.ndarray, views: int) -> bool:
    def sector_free(u: int, v: int) -> bool:
        s = sector_of(positions, u, v, views)
        return all(sector_of(positions, u, w, views) != s for w in g.neighbors(u))

    for u in sorted(g.nodes):
        while g.degree(u) < 2:
            order = sorted((v for v in g.nodes if v != u and not g.has_edge(u, v)),
                           key=lambda v: (np.linalg.norm(positions[u] - positions[v]), v))
            added = False
            for v in order:
                if sector_free(u, v) and sector_free(v, u):
                    g.add_edge(u, v)
                    added = True
                    break
            if not added:
                return False
    return True


def _assign_landmarks(g: nx.Graph, rng: np.random.Generator, n_landmarks: int) -> np.ndarray:
    """Give nodes landmark ids so nodes sharing a neighbor differ when possible."""
    n = g.number_of_nodes()
    out = np.full(n, -1, dtype=np.int64)
    usage = np.zeros(n_landmarks, dtype=np.int64)
    for u in rng.permutation(n):
        forbidden = {int(out[v]) for w in g.neighbors(int(u)) for v in g.neighbors(w)
                     if v != u and out[v] >= 0}
        allowed = [l for l in range(n_landmarks) if l not in forbidden]
        pool = allowed if allowed else list(range(n_landmarks))
        counts = usage[pool]
        weights = 1.0 / (1.0 + counts)
        pick = int(rng.choice(pool, p=weights / weights.sum()))
        out[int(u)] = pick
        usage[pick] += 1
    return out


def _synthesize_scene(scene_id: str, split: str, cfg: WorldConfig, world_seed: int,
                      style: np.ndarray, landmark_features: np.ndarray) -> Scene:
    for attempt in range(80):
        rng = substream(world_seed, f"scene:{scene_id}", attempt)
        n = int(rng.integers(cfg.nodes_min, cfg.nodes_max + 1))
        positions = _sample_positions(rng, n, cfg.area)
        if positions is None:
            continue
        g = nx.Graph()
        g.add_nodes_from(range(n))
        g.add_edges_from(_delaunay_edges(positions))
        if not _resolve_sector_conflicts(g, positions, cfg.views):
            continue
        if not _fix_low_degree(g, positions, cfg.views):
            continue
        if not nx.is_connected(g) or max(dict(g.degree).values()) > cfg.views:
            continue
        landmarks = _assign_landmarks(g, rng, cfg.landmarks)
        feature_seed = int(substream(world_seed, f"features:{scene_id}").integers(2 ** 63))
        scene = Scene(scene_id=scene_id, split=split, positions=positions,
                      landmarks=landmarks,
                      edges=sorted((min(a, b), max(a, b)) for a, b in g.edges),
                      style=style, feature_seed=feature_seed)
        try:
            scene.finalize(cfg, landmark_features)
        except InvalidConfig:
            continue
        return scene
    raise InvalidConfig(f"could not synthesize a valid scene for {scene_id}")


def generate_world(cfg: WorldConfig, seed: int) -> World:
    """Build all seen and unseen scenes plus the landmark signature table."""
    _validate_world_config(cfg)
    rng = substream(seed, "world")
    if cfg.landmarks > len(LANDMARK_NAMES):
        raise InvalidConfig(f"at most {len(LANDMARK_NAMES)} landmark types available")
    names = tuple(LANDMARK_NAMES[:cfg.landmarks])
    landmark_features = rng.normal(size=(cfg.landmarks, cfg.feature_dim))
    # the unseen offset hits a few coordinates hard rather than every
    # coordinate faintly; a dense direction of the same norm is far milder
    # per coordinate and barely registers as a domain gap
    support = rng.choice(cfg.feature_dim, size=min(cfg.shift_support, cfg.feature_dim),
                         replace=False)
    shift = np.zeros(cfg.feature_dim)
    shift[support] = rng.choice([-1.0, 1.0], size=support.size) / math.sqrt(support.size)

    scenes: dict[str, Scene] = {}
    for split, count in (("seen", cfg.seen_scenes), ("unseen", cfg.unseen_scenes)):
        for i in range(count):
            scene_id = f"{split}_{i:02d}"
            style_rng = substream(seed, f"style:{scene_id}")
            style = cfg.style_sigma * style_rng.normal(size=cfg.feature_dim)
            if split == "unseen":
                style = style + cfg.sigma_shift * shift
            scenes[scene_id] = _synthesize_scene(scene_id, split, cfg, seed, style,
                                                 landmark_features)
    vocab = tuple(FUNCTION_WORDS) + names
    return World(config=cfg, seed=seed, landmark_names=names,
                 landmark_features=landmark_features, shift_direction=shift,
                 scenes=scenes, vocab=vocab)


def _validate_world_config(cfg: WorldConfig) -> None:
    try:
        from .config import validate_world_section
        validate_world_section(cfg)
    except ConfigError as e:
        raise InvalidConfig(str(e)) from None


# -- navigation primitives ---------------------------------------------------


def observe(scene: Scene, node: int) -> Observation:
    """The per-sector feature matrix and navigability mask at a node."""
    node = scene.check_node(node)
    return Observation(features=scene.features[node], nav_mask=scene.sector_table[node] >= 0,
                       node=node, scene_id=scene.scene_id)


def stop_action(views: int) -> int:
    return views


def apply_action(scene: Scene, node: int, action: int) -> int:
    """Move through a sector; stop is handled by the caller, not here."""
    node = scene.check_node(node)
    if not 0 <= action < scene.views:
        raise InvalidAction(f"action {action} out of range for {scene.views} sectors")
    nb = scene.sector_table[node, action]
    if nb < 0:
        raise InvalidAction(f"sector {action} at node {node} is not navigable")
    return int(nb)


def geodesic(scene: Scene, a: int, b: int) -> float:
    return float(scene.dist[scene.check_node(a), scene.check_node(b)])


def teacher_action(scene: Scene, node: int, target: int) -> int:
    """Stop at the target, else the sector minimizing remaining path length.

    Ties break toward the lowest sector index so the teacher is a pure
    function of (scene, node, target).
    """
    node, target = scene.check_node(node), scene.check_node(target)
    if node == target:
        return stop_action(scene.views)
    best_s, best_cost = -1, math.inf
    for s, nb, length in scene.neighbors(node):
        cost = length + float(scene.dist[nb, target])
        if cost < best_cost - 1e-12:
            best_s, best_cost = s, cost
    return best_s


def teacher_walk(scene: Scene, start: int, target: int) -> list[int]:
    """Node sequence produced by following the teacher until it stops."""
    path = [scene.check_node(start)]
    for _ in range(scene.n_nodes + 1):
        a = teacher_action(scene, path[-1], target)
        if a == stop_action(scene.views):
            return path
        path.append(apply_action(scene, path[-1], a))
    raise RuntimeError(f"teacher did not stop in scene {scene.scene_id}")  # pragma: no cover


# -- episodes and instructions ------------------------------------------------


def _turn_word(prev_heading: float, heading: float) -> str:
    rel = (heading - prev_heading + math.pi) % (2.0 * math.pi) - math.pi
    if abs(rel) < math.pi / 6.0:
        return "straight"
    return "left" if rel > 0 else "right"


def build_instruction(scene: Scene, path: list[int], names: tuple[str, ...]) -> tuple[str, ...]:
    """Template the path into tokens, naming each hop's landmark in order."""
    words: list[str] = []
    prev_heading = None
    for i in range(1, len(path)):
        d = scene.positions[path[i]] - scene.positions[path[i - 1]]
        heading = math.atan2(d[1], d[0])
        lm = names[scene.landmarks[path[i]]]
        if prev_heading is None:
            words += ["go", "to", lm]
        else:
            words += ["then", _turn_word(prev_heading, heading), "to", lm]
        prev_heading = heading
    words += ["stop", "at", names[scene.landmarks[path[-1]]]]
    return tuple(words)


def generate_episodes(world: World, split: str, per_scene: int, seed: int) -> list[Episode]:
    """Sample start/target pairs whose teacher path length is inside the hop range."""
    cfg = world.config
    scene_split = "unseen" if split == "val_unseen" else "seen"
    episodes: list[Episode] = []
    for scene in world.split_scenes(scene_split):
        rng = substream(seed, f"episodes:{split}:{scene.scene_id}")
        for k in range(per_scene):
            ep = _sample_episode(world, scene, split, rng, k)
            if ep is None:
                raise EpisodeUnsatisfiable(
                    f"no episode within hops [{cfg.hops_min}, {cfg.hops_max}] "
                    f"in scene {scene.scene_id}")
            episodes.append(ep)
    return episodes


def _sample_episode(world: World, scene: Scene, split: str, rng: np.random.Generator,
                    index: int) -> Episode | None:
    cfg = world.config
    n = scene.n_nodes
    for _ in range(400):
        start = int(rng.integers(n))
        target = int(rng.integers(n))
        if start == target:
            continue
        path = teacher_walk(scene, start, target)
        if cfg.hops_min <= len(path) - 1 <= cfg.hops_max and path[-1] == target:
            return Episode(
                episode_id=f"{scene.scene_id}:{split}:{index:03d}",
                scene_id=scene.scene_id, split=split, start=start, target=target,
                gt_path=tuple(path),
                instruction=build_instruction(scene, path, world.landmark_names))
    # deterministic fallback: exhaustive scan in a shuffled order
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    for i in rng.permutation(len(pairs)):
        start, target = pairs[int(i)]
        path = teacher_walk(scene, start, target)
        if cfg.hops_min <= len(path) - 1 <= cfg.hops_max and path[-1] == target:
            return Episode(
                episode_id=f"{scene.scene_id}:{split}:{index:03d}",
                scene_id=scene.scene_id, split=split, start=start, target=target,
                gt_path=tuple(path),
                instruction=build_instruction(scene, path, world.landmark_names))
    return None


def _interleave_by_scene(episodes: list[Episode]) -> list[Episode]:
    """Round-robin across scenes so that any prefix spans many scenes."""
    by_scene: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_scene.setdefault(ep.scene_id, []).append(ep)
    out: list[Episode] = []
    i = 0
    while True:
        row = [q[i] for q in by_scene.values() if i < len(q)]
        if not row:
            return out
        out.extend(row)
        i += 1


def build_dataset(world: World) -> dict[str, list[Episode]]:
    """Train episodes on seen scenes; validation on seen and unseen scenes.

    Validation lists are interleaved by scene, so fixed-size evaluation
    prefixes cover the split instead of clustering in the first scenes.
    """
    cfg = world.config
    return {
        "train": generate_episodes(world, "train", cfg.train_per_scene, world.seed),
        "val_seen": _interleave_by_scene(
            generate_episodes(world, "val_seen", cfg.val_per_scene, world.seed)),
        "val_unseen": _interleave_by_scene(
            generate_episodes(world, "val_unseen", cfg.val_per_scene, world.seed)),
    }


# -- serialization -------------------------------------------------------------


def world_to_dict(world: World) -> dict:
    import dataclasses as dc
    return {
        "format_version": WORLD_FORMAT,
        "kind": "world",
        "seed": world.seed,
        "config": dc.asdict(world.config),
        "landmark_names": list(world.landmark_names),
        "landmark_features": world.landmark_features.tolist(),
        "shift_direction": world.shift_direction.tolist(),
        "vocab": list(world.vocab),
        "scenes": [
            {
                "scene_id": s.scene_id,
                "split": s.split,
                "feature_seed": s.feature_seed,
                "style": s.style.tolist(),
                "positions": s.positions.tolist(),
                "landmarks": s.landmarks.tolist(),
                "edges": [list(e) for e in s.edges],
            }
            for s in (world.scenes[k] for k in sorted(world.scenes))
        ],
    }


def world_fingerprint(world: World) -> str:
    """Content hash tying checkpoints and reports to one exact world."""
    return sha256_text(canonical_json(world_to_dict(world)))


def save_world(world: World, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world_to_dict(world), sort_keys=True, indent=1) + "\n")


def load_world(path: str | Path) -> World:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigParseError(f"cannot read world file {path}: {e}") from e
    if data.get("kind") != "world" or data.get("format_version") != WORLD_FORMAT:
        raise ConfigParseError(f"unsupported world file format in {path}")
    from .config import build_section
    cfg = build_section(WorldConfig, data["config"], "world")
    landmark_features = np.array(data["landmark_features"])
    world = World(
        config=cfg, seed=int(data["seed"]),
        landmark_names=tuple(data["landmark_names"]),
        landmark_features=landmark_features,
        shift_direction=np.array(data["shift_direction"]),
        scenes={}, vocab=tuple(data["vocab"]))
    for sd in data["scenes"]:
        scene = Scene(
            scene_id=sd["scene_id"], split=sd["split"],
            positions=np.array(sd["positions"]),
            landmarks=np.array(sd["landmarks"], dtype=np.int64),
            edges=[tuple(e) for e in sd["edges"]],
            style=np.array(sd["style"]), feature_seed=int(sd["feature_seed"]))
        scene.finalize(cfg, landmark_features)
        world.scenes[scene.scene_id] = scene
    return world


def episodes_to_dict(episodes: list[Episode]) -> dict:
    import dataclasses as dc
    return {
        "format_version": EPISODES_FORMAT,
        "kind": "episodes",
        "episodes": [dc.asdict(e) | {"gt_path": list(e.gt_path),
                                     "instruction": list(e.instruction)}
                     for e in episodes],
    }


def save_episodes(episodes: list[Episode], path: str | Path) -> None:
    Path(path).write_text(json.dumps(episodes_to_dict(episodes), sort_keys=True, indent=1) + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigParseError(f"cannot read episodes file {path}: {e}") from e
    if data.get("kind") != "episodes" or data.get("format_version") != EPISODES_FORMAT:
        raise ConfigParseError(f"unsupported episodes file format in {path}")
    return [Episode(episode_id=d["episode_id"], scene_id=d["scene_id"], split=d["split"],
                    start=int(d["start"]), target=int(d["target"]),
                    gt_path=tuple(int(x) for x in d["gt_path"]),
                    instruction=tuple(d["instruction"]))
            for d in data["episodes"]]
