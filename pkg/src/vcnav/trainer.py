"""Joint training and per-episode test-time adaptation.

Training alternates, per iteration, a teacher-forcing pass (imitation) and a
sampled pass (actor-critic with a replay buffer) over a small batch of
episodes, plus two contrastive consistency terms whose positive keys come
from momentum-encoded augmented views of the same steps. One optimizer step
updates all trainable tensors; momentum twins then track their sources.

Test-time adaptation clones the self-supervised partition per episode,
descends mean prediction entropy over augmented replays of a frozen greedy
probe (plus the contrastive terms), and re-runs greedy inference with the
adapted observation encoder feeding the untouched supervised heads.
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agent as agent_mod
from .agent import AgentParams, KeyQueue
from .augment import apply_augmentation, augmentation_pool, sample_augmentation
from .autodiff import NonFiniteValue, Tape, Tensor, backward
from .config import ConfigError, RunConfig, canonical_json, model_hash, substream, validate
from .metrics import TrajectoryRecord, aggregate_rows, compute_metrics
from .objectives import (actor_loss, critic_loss, entropy_values, il_loss, info_nce,
                         ml_aggregate, sac_target, tta_objective, train_objective)
from .optim import Adam, clip_grad_norm
from .world import (Episode, Scene, SceneMissing, World, apply_action, geodesic, observe,
                    stop_action, teacher_action, world_fingerprint)


class DivergenceDetected(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""


class InsufficientSamples(RuntimeError):
    """Replay buffer holds fewer tuples than the requested batch."""


class TooShortTrajectory(ValueError):
    """Negative-key selection needs at least two steps."""


STOP_REWARD = 2.0
ROLLOUT_MODES = ("teacher", "sample", "greedy", "forced")


# -- replay buffer -------------------------------------------------------------


@dataclass(frozen=True)
class ReplayTuple:
    """One transition from a sampled rollout, with embeddings detached.

    ``next_action``/``next_logp`` are the action actually taken at the next
    step and its log-probability at collection time, so the soft target can
    be formed without re-running the policy.
    """

    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    next_action: int
    next_logp: float
    done: bool


class ReplayBuffer:
    """FIFO ring of transitions; uniform sampling without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._store: collections.deque[ReplayTuple] = collections.deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._store)

    def push(self, t: ReplayTuple) -> None:
        self._store.append(t)

    def sample(self, n: int, rng: np.random.Generator) -> list[ReplayTuple]:
        if n < 1:
            raise ValueError(f"sample size must be >= 1, got {n}")
        if n > len(self._store):
            raise InsufficientSamples(f"buffer holds {len(self._store)} < {n} tuples")
        idx = rng.choice(len(self._store), size=n, replace=False)
        return [self._store[int(i)] for i in idx]

    def clone(self) -> "ReplayBuffer":
        out = ReplayBuffer(self.capacity)
        out._store.extend(self._store)
        return out


# -- rollouts -------------------------------------------------------------------


@dataclass
class RolloutResult:
    """One executed episode with the per-step tensors still attached."""

    episode: Episode
    nodes: list[int]
    actions: list[int]
    dists: list[Tensor]
    pooled: list[Tensor]
    observations: list        # raw (pre-augmentation) Observation per step
    logps: list[float]
    rewards: list[float]
    stop_reason: str

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(
            episode_id=self.episode.episode_id,
            scene_id=self.episode.scene_id,
            nodes=list(self.nodes),
            actions=list(self.actions),
            action_dists=[d.values.copy() for d in self.dists],
            entropies=[entropy_values(d.values) for d in self.dists],
            stop_reason=self.stop_reason,
        )


def rollout(params: AgentParams, scene: Scene, episode: Episode, mode: str, *,
            rng: np.random.Generator | None = None,
            augmentation=None,
            forced_actions: Sequence[int] | None = None,
            instruction_enc: tuple[Tensor, Tensor] | None = None) -> RolloutResult:
    """Run one episode under the given action-selection mode.

    ``teacher`` follows shortest-path supervision, ``sample`` draws from the
    predicted distribution, ``greedy`` takes the argmax, and ``forced``
    replays a given action sequence (used for augmented-view re-decoding).
    The optional augmentation transforms what the encoder sees; rewards are
    geodesic progress per move, scaled by the scene's mean edge length, plus
    a +/- STOP bonus judged at the success radius.
    """
    if mode not in ROLLOUT_MODES:
        raise ValueError(f"mode must be one of {ROLLOUT_MODES}, got {mode!r}")
    if scene.scene_id != episode.scene_id:
        raise SceneMissing(f"episode {episode.episode_id} expects scene "
                           f"{episode.scene_id!r}, got {scene.scene_id!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    if mode == "forced" and forced_actions is None:
        raise ValueError("forced mode needs forced_actions")

    if instruction_enc is None:
        u, summary = agent_mod.encode_instruction(params, episode.instruction)
    else:
        u, summary = instruction_enc
    state = agent_mod.init_decoder(params, summary)
    stop = stop_action(scene.views)

    node = episode.start
    nodes = [node]
    actions: list[int] = []
    dists: list[Tensor] = []
    pooled_seq: list[Tensor] = []
    obs_seq: list = []
    logps: list[float] = []
    rewards: list[float] = []
    stop_reason = "max_steps"

    for step in range(params.cfg.max_steps):
        if mode == "forced" and step >= len(forced_actions):
            stop_reason = "max_steps"
            break
        obs = observe(scene, node)
        obs_in = apply_augmentation(augmentation, obs) if augmentation is not None else obs
        e, pooled = agent_mod.embed_observation(params, obs_in)
        out = agent_mod.decode_step(params, state, e, obs.nav_mask, u)
        p = out.dist.values

        if mode == "teacher":
            a = teacher_action(scene, node, episode.target)
        elif mode == "greedy":
            a = int(np.argmax(p))
        elif mode == "sample":
            a = int(rng.choice(p.size, p=p / p.sum()))
        else:
            a = int(forced_actions[step])
        if p[a] <= 0.0:
            # saturated softmax: the step would contribute log(0) downstream
            raise NonFiniteValue(f"action {a} has zero probability at step {step}")

        dists.append(out.dist)
        pooled_seq.append(pooled)
        obs_seq.append(obs)
        actions.append(a)
        logps.append(float(np.log(p[a])))

        if a == stop:
            near = geodesic(scene, node, episode.target) <= scene.d_th
            rewards.append(STOP_REWARD if near else -STOP_REWARD)
            stop_reason = "stopped"
            break
        prev = node
        node = apply_action(scene, node, a)
        gain = geodesic(scene, prev, episode.target) - geodesic(scene, node, episode.target)
        rewards.append(gain / scene.mean_edge)
        nodes.append(node)
        state = agent_mod.advance(state, out.hidden, a, params.n_actions)

    return RolloutResult(episode=episode, nodes=nodes, actions=actions, dists=dists,
                         pooled=pooled_seq, observations=obs_seq, logps=logps,
                         rewards=rewards, stop_reason=stop_reason)


def select_negatives(step_keys: Sequence[np.ndarray], t: int, queue: KeyQueue) -> np.ndarray:
    """Negatives for step t: every other step's key plus the global queue."""
    if len(step_keys) < 2:
        raise TooShortTrajectory(
            f"need >= 2 steps to form within-trajectory negatives, got {len(step_keys)}")
    if not 0 <= t < len(step_keys):
        raise IndexError(f"step {t} outside trajectory of {len(step_keys)} steps")
    rows = [k for s, k in enumerate(step_keys) if s != t]
    stale = queue.contents()
    if stale.size:
        rows.append(stale)
    return np.vstack(rows)


def _replay_fill(buffer: ReplayBuffer, sp: RolloutResult) -> None:
    """Store the sampled pass's transitions with detached embeddings."""
    T = len(sp.actions)
    for t in range(T):
        last = t == T - 1
        nxt = sp.pooled[t + 1].values if not last else sp.pooled[t].values
        buffer.push(ReplayTuple(
            obs=sp.pooled[t].values.copy(),
            action=sp.actions[t],
            reward=sp.rewards[t],
            next_obs=nxt.copy(),
            next_action=sp.actions[t + 1] if not last else 0,
            next_logp=sp.logps[t + 1] if not last else 0.0,
            done=last,
        ))


def _momentum_keys(params: AgentParams, result: RolloutResult, spec, head: str) -> list[np.ndarray]:
    """Momentum-encoded keys for each step (augmented view, no gradients)."""
    keys = []
    for t, obs in enumerate(result.observations):
        aug = apply_augmentation(spec, obs)
        _, pooled = agent_mod.embed_observation(params, aug, momentum=True)
        if head == "il":
            k = agent_mod.project_il(params, pooled, momentum=True)
        else:
            k = agent_mod.project_rl(params, pooled, result.actions[t], momentum=True)
        keys.append(k.values.copy())
    return keys


def _tensor_sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def _mean(terms: Sequence[Tensor]) -> Tensor:
    return _tensor_sum(terms) * (1.0 / len(terms))


# -- evaluation -----------------------------------------------------------------


def evaluate_policy(params: AgentParams, world: World, episodes: Sequence[Episode]
                    ) -> tuple[list[dict], dict]:
    """Greedy rollouts over the given episodes; per-episode rows plus means."""
    rows = []
    for ep in episodes:
        scene = world.scene(ep.scene_id)
        res = rollout(params, scene, ep, "greedy")
        rec = res.record()
        row = compute_metrics(rec, ep, scene)
        row.update(episode_id=ep.episode_id, nodes=[int(n) for n in rec.nodes],
                   stop_reason=rec.stop_reason)
        rows.append(row)
    return rows, aggregate_rows(rows)


# -- joint training ---------------------------------------------------------------


@dataclass
class TrainResult:
    params: AgentParams
    queue: KeyQueue
    optimizer: Adam
    buffer: ReplayBuffer
    log: list[dict]
    checkpoint_path: Path | None


def train_joint(world: World, dataset: dict[str, list[Episode]], cfg: RunConfig, *,
                out_dir: str | Path | None = None,
                resume_from: str | Path | None = None,
                progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimize supervised and self-supervised partitions jointly.

    Per iteration: encode each batch episode's instruction once, run a
    teacher-forcing pass (imitation + contrastive teacher-forcing term) and a
    sampled pass (actor term, replay fill, contrastive actor-critic term),
    then a critic regression on replayed transitions. One Adam step over all
    trainables, followed by momentum twin updates and key enqueueing. The
    returned log holds one dict per iteration; validation metrics appear
    every ``eval_every`` iterations and at the end.
    """
    validate(cfg)
    for split in ("train", "val_seen", "val_unseen"):
        if not dataset.get(split):
            raise ConfigError(f"dataset split {split!r} is empty")
    train_eps = dataset["train"]
    if cfg.train.batch_size > len(train_eps):
        raise ConfigError(f"batch_size {cfg.train.batch_size} exceeds "
                          f"{len(train_eps)} train episodes")
    sw = cfg.train.switches
    if not (sw.ml or sw.cl_il or sw.cl_rl):
        raise ConfigError("all objective switches are off")
    w = cfg.weights
    fingerprint = world_fingerprint(world)
    mhash = model_hash(cfg)

    if resume_from is not None:
        params, queue, opt_state, meta = agent_mod.load_checkpoint(
            resume_from, expected_model_hash=mhash, expected_world=fingerprint)
        optimizer = Adam(lr=cfg.train.lr)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        start_iter = int(meta["iteration"])
    else:
        rng_init = np.random.default_rng(substream(cfg.seed, "init"))
        params = agent_mod.init_params(cfg.agent, world.config.views,
                                       world.config.feature_dim, world.vocab, rng_init)
        queue = KeyQueue(cfg.agent.queue_size, cfg.agent.proj_dim)
        optimizer = Adam(lr=cfg.train.lr)
        start_iter = 0

    buffer = ReplayBuffer(cfg.train.replay_capacity)
    pool = augmentation_pool(cfg.augment)
    val_seen = dataset["val_seen"][:cfg.train.eval_episodes]
    val_unseen = dataset["val_unseen"][:cfg.train.eval_episodes]
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    log_fh = (out_path / "train_log.jsonl").open("a") if out_path is not None else None
    checkpoint_path: Path | None = None

    def save(step: int, name: str) -> Path:
        meta = {"iteration": step, "model_hash": mhash, "world_fingerprint": fingerprint,
                "switches": sw.label(), "seed": cfg.seed}
        path = out_path / name
        agent_mod.save_checkpoint(path, params, queue, optimizer.state_dict(), meta)
        return path

    try:
        for i in range(start_iter, cfg.train.iters):
            rng_roll = np.random.default_rng(substream(cfg.seed, "rollout", i))
            rng_aug = np.random.default_rng(substream(cfg.seed, "augmentation", i))
            picks = rng_roll.choice(len(train_eps), size=cfg.train.batch_size, replace=False)

            il_terms: list[Tensor] = []
            actor_terms: list[Tensor] = []
            cl_il_terms: list[Tensor] = []
            cl_rl_terms: list[Tensor] = []
            critic_term: Tensor | None = None
            pending_keys: list[np.ndarray] = []

            try:
                with Tape():
                    for pick in picks:
                        ep = train_eps[int(pick)]
                        scene = world.scene(ep.scene_id)
                        instr = agent_mod.encode_instruction(params, ep.instruction)
                        spec_tf = sample_augmentation(pool, rng_aug)
                        spec_sp = sample_augmentation(pool, rng_aug)
                        spec_key_tf = sample_augmentation(pool, rng_aug)
                        spec_key_sp = sample_augmentation(pool, rng_aug)

                        tf = rollout(params, scene, ep, "teacher", augmentation=spec_tf,
                                     instruction_enc=instr)
                        if sw.ml:
                            il_terms.append(il_loss(tf.dists, tf.actions))
                        sp = rollout(params, scene, ep, "sample", rng=rng_roll,
                                     augmentation=spec_sp, instruction_enc=instr)
                        if sw.ml:
                            steps = []
                            for t in range(len(sp.actions)):
                                q_all = agent_mod.critic_q_all(params, sp.pooled[t].values)
                                steps.append(actor_loss(sp.dists[t], q_all, w))
                            actor_terms.append(_tensor_sum(steps))
                            _replay_fill(buffer, sp)

                        if sw.cl_il and len(tf.actions) >= 2:
                            keys = _momentum_keys(params, tf, spec_key_tf, "il")
                            steps = []
                            for t in range(len(keys)):
                                q = agent_mod.project_il(params, tf.pooled[t])
                                negs = select_negatives(keys, t, queue)
                                steps.append(info_nce(q, keys[t], negs,
                                                      params["cl.bilinear_il.W"]))
                            cl_il_terms.append(_tensor_sum(steps))
                            pending_keys.extend(keys)
                        if sw.cl_rl and len(sp.actions) >= 2:
                            keys = _momentum_keys(params, sp, spec_key_sp, "rl")
                            steps = []
                            for t in range(len(keys)):
                                q = agent_mod.project_rl(params, sp.pooled[t], sp.actions[t])
                                negs = select_negatives(keys, t, queue)
                                steps.append(info_nce(q, keys[t], negs,
                                                      params["cl.bilinear_rl.W"]))
                            cl_rl_terms.append(_tensor_sum(steps))
                            pending_keys.extend(keys)

                    if sw.ml and len(buffer) >= cfg.train.replay_min:
                        qs, targets = [], []
                        for tup in buffer.sample(cfg.train.replay_batch, rng_roll):
                            next_q = float(agent_mod.critic_q_all(
                                params, tup.next_obs, momentum=True)[tup.next_action])
                            targets.append(sac_target(tup.reward, tup.done, next_q,
                                                      tup.next_logp, w))
                            qs.append(agent_mod.critic_q(params, tup.obs, tup.action))
                        critic_term = critic_loss(qs, targets)

                    l_ml = None
                    l_il_val = l_actor_val = l_critic_val = None
                    if sw.ml:
                        l_il = _mean(il_terms)
                        l_actor = _mean(actor_terms)
                        l_actor_val = l_actor.item()
                        l_rl = l_actor
                        if critic_term is not None:
                            l_rl = l_rl + critic_term
                            l_critic_val = critic_term.item()
                        l_ml = ml_aggregate(l_rl, l_il, w)
                        l_il_val = l_il.item()
                    l_cl_il = _mean(cl_il_terms) if cl_il_terms else None
                    l_cl_rl = _mean(cl_rl_terms) if cl_rl_terms else None
                    total = train_objective(l_ml, l_cl_il, l_cl_rl, w)

                backward(total)
            except NonFiniteValue as e:
                raise DivergenceDetected(f"iteration {i + 1}: {e}") from e

            trainables = params.trainable()
            norm = clip_grad_norm(trainables, cfg.train.clip_norm)
            if not math.isfinite(norm):
                raise DivergenceDetected(f"iteration {i + 1}: gradient norm {norm}")
            optimizer.step(trainables)
            agent_mod.momentum_update(params, cfg.agent.momentum, "encoder")
            agent_mod.momentum_update(params, cfg.agent.momentum, "critic")
            for k in pending_keys:
                queue.push(k)

            entry = {
                "iter": i + 1,
                "loss": total.item(),
                "il": l_il_val,
                "actor": l_actor_val,
                "critic": l_critic_val,
                "cl_il": l_cl_il.item() if l_cl_il is not None else None,
                "cl_rl": l_cl_rl.item() if l_cl_rl is not None else None,
                "grad_norm": norm,
                "replay": len(buffer),
                "queue": len(queue),
            }
            if (i + 1) % cfg.train.eval_every == 0 or i + 1 == cfg.train.iters:
                _, entry["val_seen"] = evaluate_policy(params, world, val_seen)
                _, entry["val_unseen"] = evaluate_policy(params, world, val_unseen)
            log.append(entry)
            if log_fh is not None:
                log_fh.write(canonical_json(entry) + "\n")
            if progress is not None:
                progress(entry)

            if out_path is not None and (i + 1) % cfg.train.checkpoint_every == 0:
                checkpoint_path = save(i + 1, f"checkpoint_{i + 1:06d}.json")
        if out_path is not None:
            checkpoint_path = save(cfg.train.iters, "checkpoint_final.json")
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(params=params, queue=queue, optimizer=optimizer, buffer=buffer,
                       log=log, checkpoint_path=checkpoint_path)


# -- test-time adaptation ----------------------------------------------------------


def adapt_test_time(params: AgentParams, queue: KeyQueue, world: World, episode: Episode,
                    cfg: RunConfig, rng: np.random.Generator
                    ) -> tuple[TrajectoryRecord, dict]:
    """Adapt the self-supervised partition on one episode, then act greedily.

    A frozen greedy probe fixes the observation/action sequence; each
    adaptation iteration re-decodes ``tta.batch`` augmented views of it and
    descends mean prediction entropy plus the two contrastive terms, stepping
    only the cloned self-supervised tensors. The supervised partition is
    verified bitwise unchanged. The key queue is read for negatives but never
    written. Returns the adapted greedy trajectory and diagnostics including
    the entropy trace on the first iteration's views before and after.
    """
    scene = world.scene(episode.scene_id)
    adapted = params.clone_cl()
    ml_before = adapted.digest()

    probe = rollout(adapted, scene, episode, "greedy")
    diag: dict = {"probe_nodes": list(probe.nodes), "entropy": [],
                  "entropy_before": None, "entropy_after": None}
    if cfg.tta.iters == 0:
        return probe.record(), diag

    pool = augmentation_pool(cfg.augment)
    # the instruction path is entirely supervised-side and frozen here, so
    # its encoding is computed once outside any tape and reused as constants
    u, summary = agent_mod.encode_instruction(adapted, episode.instruction)
    trainables = adapted.cl_params()
    optimizer = Adam(lr=cfg.tta.lr)
    stop = stop_action(scene.views)
    first_specs: list = []

    def forced_dists(spec) -> list[Tensor]:
        state = agent_mod.init_decoder(adapted, summary)
        dists = []
        for t, obs in enumerate(probe.observations):
            aug = apply_augmentation(spec, obs)
            e, _ = agent_mod.embed_observation(adapted, aug)
            out = agent_mod.decode_step(adapted, state, e, obs.nav_mask, u)
            dists.append(out.dist)
            if probe.actions[t] != stop:
                state = agent_mod.advance(state, out.hidden, probe.actions[t],
                                          adapted.n_actions)
        return dists

    try:
        for it in range(cfg.tta.iters):
            specs = [sample_augmentation(pool, rng) for _ in range(cfg.tta.batch)]
            if it == 0:
                first_specs = specs
            with Tape():
                dists: list[Tensor] = []
                for spec in specs:
                    dists.extend(forced_dists(spec))
                l_ent = tta_objective(dists)
                loss = l_ent
                if len(probe.actions) >= 2:
                    spec_k = sample_augmentation(pool, rng)
                    il_keys = _momentum_keys(adapted, probe, spec_k, "il")
                    rl_keys = _momentum_keys(adapted, probe, spec_k, "rl")
                    il_steps, rl_steps = [], []
                    for t, obs in enumerate(probe.observations):
                        _, pooled = agent_mod.embed_observation(adapted, obs)
                        il_steps.append(info_nce(
                            agent_mod.project_il(adapted, pooled), il_keys[t],
                            select_negatives(il_keys, t, queue),
                            adapted["cl.bilinear_il.W"]))
                        rl_steps.append(info_nce(
                            agent_mod.project_rl(adapted, pooled, probe.actions[t]),
                            rl_keys[t], select_negatives(rl_keys, t, queue),
                            adapted["cl.bilinear_rl.W"]))
                    loss = loss + cfg.weights.lambda_cl * (_mean(il_steps) + _mean(rl_steps))
            backward(loss)
            norm = clip_grad_norm(trainables, cfg.train.clip_norm)
            if not math.isfinite(norm):
                raise DivergenceDetected(f"adaptation iteration {it + 1}: norm {norm}")
            optimizer.step(trainables)
            for p in adapted.ml_params().values():
                p.zero_grad()     # scratch grads deposited through shared tensors
            if cfg.tta.update_momentum:
                agent_mod.momentum_update(adapted, cfg.agent.momentum, "encoder")
            diag["entropy"].append(l_ent.item())
    except NonFiniteValue as e:
        raise DivergenceDetected(f"adaptation on {episode.episode_id}: {e}") from e

    diag["entropy_before"] = diag["entropy"][0]
    after = [forced_dists(spec) for spec in first_specs]
    diag["entropy_after"] = tta_objective([d for ds in after for d in ds]).item()

    final = rollout(adapted, scene, episode, "greedy")
    if adapted.digest() != ml_before:
        raise RuntimeError("supervised partition changed during adaptation")
    diag["adapted_nodes"] = list(final.nodes)
    return final.record(), diag


def evaluate_tta(params: AgentParams, queue: KeyQueue, world: World,
                 episodes: Sequence[Episode], cfg: RunConfig, seed: int
                 ) -> tuple[list[dict], dict, list[dict]]:
    """Adapt-then-evaluate over episodes; isolation is per-episode by cloning."""
    rows, diags = [], []
    for idx, ep in enumerate(episodes):
        rng = np.random.default_rng(substream(seed, "tta", idx))
        rec, diag = adapt_test_time(params, queue, world, ep, cfg, rng)
        scene = world.scene(ep.scene_id)
        row = compute_metrics(rec, ep, scene)
        row.update(episode_id=ep.episode_id, nodes=[int(n) for n in rec.nodes],
                   stop_reason=rec.stop_reason)
        rows.append(row)
        diag["episode_id"] = ep.episode_id
        diags.append(diag)
    return rows, aggregate_rows(rows), diags
