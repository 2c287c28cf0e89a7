"""Instruction-conditioned navigation agent.

Parameters are split into two partitions by name prefix. The supervised
partition ("ml.") holds the instruction encoder, attentive decoder, action
readout, and query critic. The self-supervised partition ("cl.") holds the
observation encoder, the contrastive projection heads, and every momentum
twin ("cl.momentum.", never trainable). Because the decoder attends over
encoded sector features, the policy is a function of both partitions, which
is what lets test-time updates of the self-supervised side change behavior
while the supervised side stays frozen.

Action space: sector indices 0..V-1 move through that sector, V stops. The
embedding table has one extra row (V+1) used as the begin-of-episode marker.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteValue, Tensor, constant, parameter
from .config import AgentConfig, canonical_json
from .world import InvalidAction, Observation

MASK_LOGIT = -1e9
CHECKPOINT_FORMAT = 1


class UnknownToken(KeyError):
    """An instruction token is outside the vocabulary."""


class EmptyInstruction(ValueError):
    """encode_instruction was given zero tokens."""


class MaxStepsExceeded(RuntimeError):
    """decode_step was called past the configured step budget."""


class CheckpointMismatch(RuntimeError):
    """A checkpoint does not match the requested model or world identity."""


@dataclass
class AgentParams:
    cfg: AgentConfig
    views: int
    feature_dim: int
    vocab: tuple[str, ...]
    tensors: dict[str, Tensor]
    momentum_map: dict[str, str]        # momentum name -> source name
    token_ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.token_ids:
            self.token_ids = {t: i for i, t in enumerate(self.vocab)}

    @property
    def n_actions(self) -> int:
        return self.views + 1

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def ml_params(self) -> dict[str, Tensor]:
        return self.named("ml.")

    def cl_params(self) -> dict[str, Tensor]:
        """Trainable self-supervised parameters (momentum twins excluded)."""
        return {k: v for k, v in self.tensors.items()
                if k.startswith("cl.") and not k.startswith("cl.momentum.")}

    def momentum_params(self) -> dict[str, Tensor]:
        return self.named("cl.momentum.")

    def trainable(self) -> dict[str, Tensor]:
        return {**self.ml_params(), **self.cl_params()}

    def digest(self, names: Sequence[str] | None = None) -> str:
        """Content hash of a parameter subset (default: the supervised side)."""
        import hashlib
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.ml_params()):
            h.update(name.encode())
            h.update(self.tensors[name].values.tobytes())
        return h.hexdigest()

    def clone_cl(self) -> "AgentParams":
        """Copy with fresh self-supervised tensors; supervised tensors shared.

        Used by test-time adaptation so each episode adapts an isolated copy
        while the frozen partition stays physically shared (and is verified
        unchanged by hash).
        """
        tensors = {}
        for name, t in self.tensors.items():
            if name.startswith("cl."):
                tensors[name] = Tensor(t.values.copy(), requires_grad=t.requires_grad,
                                       name=name)
            else:
                tensors[name] = t
        return AgentParams(cfg=self.cfg, views=self.views, feature_dim=self.feature_dim,
                           vocab=self.vocab, tensors=tensors,
                           momentum_map=dict(self.momentum_map),
                           token_ids=self.token_ids)


def _parameter_spec(cfg: AgentConfig, views: int, feature_dim: int,
                    vocab_size: int) -> list[tuple[str, tuple[int, ...], bool]]:
    """(name, shape, is_bias) for every tensor, in a fixed init order."""
    Wd, H, E, P, A = cfg.word_dim, cfg.hidden, cfg.obs_embed, cfg.proj_dim, cfg.action_embed
    Hc = H // 2
    n_act = views + 1
    spec: list[tuple[str, tuple[int, ...], bool]] = [
        ("ml.instr.embed", (vocab_size, Wd), False),
    ]
    for direction in ("fwd", "bwd"):
        # update/reset gates share one fused weight, candidate gets its own
        spec.append((f"ml.instr.{direction}.Wzr", (Wd + Hc, 2 * Hc), False))
        spec.append((f"ml.instr.{direction}.Wh", (Wd + Hc, Hc), False))
        spec.append((f"ml.instr.{direction}.bzr", (2 * Hc,), True))
        spec.append((f"ml.instr.{direction}.bh", (Hc,), True))
    spec.append(("ml.dec.cell.Wzr", (E + A + H, 2 * H), False))
    spec.append(("ml.dec.cell.Wh", (E + A + H, H), False))
    spec.append(("ml.dec.cell.bzr", (2 * H,), True))
    spec.append(("ml.dec.cell.bh", (H,), True))
    spec += [
        ("ml.dec.W_init", (H, H), False),
        ("ml.dec.b_init", (H,), True),
        ("ml.dec.W_F", (E, H), False),
        ("ml.dec.W_U", (H, H), False),
        ("ml.dec.W_comb", (2 * H, H), False),
        ("ml.dec.b_comb", (H,), True),
        ("ml.dec.W_G", (E, H), False),
        ("ml.dec.stop_cand", (E,), False),
        ("ml.act.embed", (n_act + 1, A), False),
        ("ml.critic.W1", (E + n_act, H), False),
        ("ml.critic.b1", (H,), True),
        ("ml.critic.W2", (H, 1), False),
        ("ml.critic.b2", (1,), True),
        ("cl.enc.W", (feature_dim, E), False),
        ("cl.enc.b", (E,), True),
        ("cl.proj_il.W", (E, P), False),
        ("cl.proj_rl.W", (E + n_act, P), False),
        ("cl.bilinear_il.W", (P, P), False),
        ("cl.bilinear_rl.W", (P, P), False),
    ]
    return spec


_MOMENTUM_SOURCES = {
    "cl.momentum.enc.W": "cl.enc.W",
    "cl.momentum.enc.b": "cl.enc.b",
    "cl.momentum.proj_il.W": "cl.proj_il.W",
    "cl.momentum.proj_rl.W": "cl.proj_rl.W",
    "cl.momentum.critic.W1": "ml.critic.W1",
    "cl.momentum.critic.b1": "ml.critic.b1",
    "cl.momentum.critic.W2": "ml.critic.W2",
    "cl.momentum.critic.b2": "ml.critic.b2",
}


def init_params(cfg: AgentConfig, views: int, feature_dim: int, vocab: Sequence[str],
                rng: np.random.Generator) -> AgentParams:
    """Gaussian init scaled by cfg.init_scale; biases zero; twins copy sources."""
    tensors: dict[str, Tensor] = {}
    for name, shape, is_bias in _parameter_spec(cfg, views, feature_dim, len(vocab)):
        values = np.zeros(shape) if is_bias else cfg.init_scale * rng.normal(size=shape)
        tensors[name] = parameter(values, name=name)
    for mname, src in _MOMENTUM_SOURCES.items():
        tensors[mname] = Tensor(tensors[src].values.copy(), requires_grad=False, name=mname)
    return AgentParams(cfg=cfg, views=views, feature_dim=feature_dim, vocab=tuple(vocab),
                       tensors=tensors, momentum_map=dict(_MOMENTUM_SOURCES))


# -- momentum updates ---------------------------------------------------------


def momentum_update(params: AgentParams, m: float, group: str = "encoder") -> None:
    """EMA update theta_k <- m*theta_k + (1-m)*theta_q for one twin group.

    Pure value arithmetic: never touches tapes or gradients.
    """
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {m}")
    if group not in ("encoder", "critic"):
        raise ValueError(f"unknown momentum group {group!r}")
    for mname, src in params.momentum_map.items():
        is_critic = ".critic." in mname
        if (group == "critic") != is_critic:
            continue
        k, q = params.tensors[mname], params.tensors[src]
        k.values *= m
        k.values += (1.0 - m) * q.values


# -- forward computations -------------------------------------------------------


@dataclass
class DecoderState:
    hidden: Tensor          # (H,)
    prev_action: int        # last action taken; V+1 means begin-of-episode
    step: int = 0


@dataclass
class StepOutput:
    hidden: Tensor          # combined decoder state (H,)
    logits: Tensor          # (V+1,), masked
    dist: Tensor            # (V+1,), softmax of logits
    visual_attention: np.ndarray


def _gru_cell(params: AgentParams, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    n = h.shape[0]
    xh = ad.concat([x, h])
    zr = ad.sigmoid(ad.matmul(xh, params[f"{prefix}.Wzr"]) + params[f"{prefix}.bzr"])
    z, r = zr[:n], zr[n:]
    xrh = ad.concat([x, r * h])
    cand = ad.tanh(ad.matmul(xrh, params[f"{prefix}.Wh"]) + params[f"{prefix}.bh"])
    return h + z * (cand - h)


def encode_instruction(params: AgentParams, tokens: Sequence[str]) -> tuple[Tensor, Tensor]:
    """Bidirectional GRU over word embeddings.

    Returns (per-token features (L, H), summary (H,)), where each row is the
    concatenation of the forward and backward states at that position.
    """
    if len(tokens) == 0:
        raise EmptyInstruction("instruction has no tokens")
    ids = []
    for tok in tokens:
        if tok not in params.token_ids:
            raise UnknownToken(tok)
        ids.append(params.token_ids[tok])
    embeds = [params["ml.instr.embed"][i] for i in ids]
    Hc = params.cfg.hidden // 2
    zero = constant(np.zeros(Hc))

    fwd_states = []
    h = zero
    for x in embeds:
        h = _gru_cell(params, "ml.instr.fwd", x, h)
        fwd_states.append(h)
    bwd_states: list[Tensor] = [None] * len(embeds)
    h = zero
    for j in range(len(embeds) - 1, -1, -1):
        h = _gru_cell(params, "ml.instr.bwd", embeds[j], h)
        bwd_states[j] = h
    rows = [ad.concat([f, b])[None, :] for f, b in zip(fwd_states, bwd_states)]
    features = ad.concat(rows, axis=0)
    summary = ad.concat([fwd_states[-1], bwd_states[0]])
    return features, summary


def embed_observation(params: AgentParams, obs: Observation,
                      momentum: bool = False) -> tuple[Tensor, Tensor]:
    """Encode per-sector features: e = tanh(f W + b); pooled mean over sectors."""
    prefix = "cl.momentum.enc" if momentum else "cl.enc"
    feats = constant(np.asarray(obs.features))
    e = ad.tanh(ad.matmul(feats, params[f"{prefix}.W"]) + params[f"{prefix}.b"])
    pooled = ad.reduce_sum(e, axis=0) * (1.0 / e.shape[0])
    return e, pooled


def init_decoder(params: AgentParams, summary: Tensor) -> DecoderState:
    h0 = ad.tanh(ad.matmul(summary, params["ml.dec.W_init"]) + params["ml.dec.b_init"])
    return DecoderState(hidden=h0, prev_action=params.n_actions, step=0)


def attend_visual(params: AgentParams, e: Tensor, hidden: Tensor) -> tuple[Tensor, np.ndarray]:
    """Attention over encoded sectors: weights softmax(e W_F h), value sum."""
    scores = ad.matmul(e, ad.matmul(params["ml.dec.W_F"], hidden))
    attn = ad.softmax(scores)
    return ad.matmul(attn, e), attn.values.copy()


def attend_text(params: AgentParams, u: Tensor, hidden: Tensor) -> Tensor:
    scores = ad.matmul(u, ad.matmul(params["ml.dec.W_U"], hidden))
    return ad.matmul(ad.softmax(scores), u)


def decode_step(params: AgentParams, state: DecoderState, e: Tensor, nav_mask: np.ndarray,
                u: Tensor) -> StepOutput:
    """One decoder step: attend, recur, combine, and read out masked action logits."""
    if state.step >= params.cfg.max_steps:
        raise MaxStepsExceeded(f"step {state.step} >= max_steps {params.cfg.max_steps}")
    if not 0 <= state.prev_action <= params.n_actions:
        raise InvalidAction(f"previous action {state.prev_action} out of range")
    f_hat, attn = attend_visual(params, e, state.hidden)
    a_prev = params["ml.act.embed"][state.prev_action]
    h_t = _gru_cell(params, "ml.dec.cell", ad.concat([f_hat, a_prev]), state.hidden)
    u_hat = attend_text(params, u, h_t)
    combined = ad.tanh(ad.matmul(ad.concat([u_hat, h_t]), params["ml.dec.W_comb"])
                       + params["ml.dec.b_comb"])
    candidates = ad.concat([e, params["ml.dec.stop_cand"][None, :]], axis=0)
    raw = ad.matmul(candidates, ad.matmul(params["ml.dec.W_G"], combined))
    mask_vec = np.zeros(params.n_actions)
    mask_vec[:params.views][~np.asarray(nav_mask, dtype=bool)] = MASK_LOGIT
    logits = raw + constant(mask_vec)
    return StepOutput(hidden=combined, logits=logits, dist=ad.softmax(logits),
                      visual_attention=attn)


def advance(state: DecoderState, new_hidden: Tensor, action: int, n_actions: int) -> DecoderState:
    if not 0 <= action < n_actions:
        raise InvalidAction(f"action {action} out of range for {n_actions} candidates")
    return DecoderState(hidden=new_hidden, prev_action=action, step=state.step + 1)


def _action_onehot(action: int, n_actions: int) -> np.ndarray:
    if not 0 <= action < n_actions:
        raise InvalidAction(f"action {action} out of range for {n_actions} candidates")
    v = np.zeros(n_actions)
    v[action] = 1.0
    return v


def critic_q(params: AgentParams, pooled, action: int, momentum: bool = False) -> Tensor:
    """Scalar Q(o, a) from the pooled observation embedding and a one-hot action."""
    prefix = "cl.momentum.critic" if momentum else "ml.critic"
    x = ad.concat([pooled if isinstance(pooled, Tensor) else constant(pooled),
                   constant(_action_onehot(action, params.n_actions))])
    h1 = ad.tanh(ad.matmul(x, params[f"{prefix}.W1"]) + params[f"{prefix}.b1"])
    return (ad.matmul(h1, params[f"{prefix}.W2"]) + params[f"{prefix}.b2"])[0]


def critic_q_all(params: AgentParams, pooled: np.ndarray, momentum: bool = False) -> np.ndarray:
    """Q(o, a) for every action at once, as plain numpy (no tape)."""
    prefix = "cl.momentum.critic" if momentum else "ml.critic"
    n = params.n_actions
    x = np.concatenate(
        [np.broadcast_to(np.asarray(pooled), (n, len(pooled))), np.eye(n)], axis=1)
    h1 = np.tanh(x @ params[f"{prefix}.W1"].values + params[f"{prefix}.b1"].values)
    return (h1 @ params[f"{prefix}.W2"].values + params[f"{prefix}.b2"].values).ravel()


def project_il(params: AgentParams, pooled, momentum: bool = False) -> Tensor:
    """Unit-norm contrastive query/key for the imitation-side head."""
    prefix = "cl.momentum.proj_il" if momentum else "cl.proj_il"
    p = pooled if isinstance(pooled, Tensor) else constant(pooled)
    return ad.l2_normalize(ad.matmul(p, params[f"{prefix}.W"]))


def project_rl(params: AgentParams, pooled, action: int, momentum: bool = False) -> Tensor:
    """Unit-norm action-conditioned query/key for the reinforcement-side head."""
    prefix = "cl.momentum.proj_rl" if momentum else "cl.proj_rl"
    p = pooled if isinstance(pooled, Tensor) else constant(pooled)
    x = ad.concat([p, constant(_action_onehot(action, params.n_actions))])
    return ad.l2_normalize(ad.matmul(x, params[f"{prefix}.W"]))


# -- key queue -------------------------------------------------------------------


class KeyQueue:
    """Fixed-capacity FIFO of unit-normalized contrastive keys."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._ring = np.zeros((capacity, dim))
        self._ptr = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, key) -> None:
        k = np.asarray(key.values if isinstance(key, Tensor) else key, dtype=np.float64)
        if k.shape != (self.dim,):
            raise ValueError(f"key shape {k.shape}, expected ({self.dim},)")
        if not np.isfinite(k).all():
            raise NonFiniteValue("non-finite contrastive key")
        norm = float(np.linalg.norm(k))
        if norm <= 0.0:
            raise NonFiniteValue("zero-norm contrastive key")
        self._ring[self._ptr] = k / norm
        self._ptr = (self._ptr + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def contents(self) -> np.ndarray:
        """Keys oldest to newest, shape (len, dim)."""
        if self._size < self.capacity:
            return self._ring[:self._size].copy()
        return np.roll(self._ring, -self._ptr, axis=0).copy()

    def clone(self) -> "KeyQueue":
        q = KeyQueue(self.capacity, self.dim)
        q._ring = self._ring.copy()
        q._ptr = self._ptr
        q._size = self._size
        return q

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "ptr": self._ptr,
                "size": self._size, "ring": self._ring.copy()}

    @classmethod
    def from_state(cls, state: dict) -> "KeyQueue":
        q = cls(int(state["capacity"]), int(state["dim"]))
        q._ring = np.asarray(state["ring"], dtype=np.float64).copy()
        q._ptr = int(state["ptr"])
        q._size = int(state["size"])
        return q


# -- checkpointing -----------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(a, dtype=np.float64).tobytes()).decode()}


def _decode_array(d: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype=np.float64).copy()
    return arr.reshape(d["shape"])


def save_checkpoint(path: str | Path, params: AgentParams, queue: KeyQueue,
                    optimizer_state: dict | None, meta: dict) -> None:
    """Write a deterministic, bit-exact JSON checkpoint (no timestamps inside)."""
    opt = None
    if optimizer_state is not None:
        opt = {"step_count": optimizer_state["step_count"],
               "m": {k: _encode_array(v) for k, v in sorted(optimizer_state["m"].items())},
               "v": {k: _encode_array(v) for k, v in sorted(optimizer_state["v"].items())}}
    qs = queue.state_dict()
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "kind": "checkpoint",
        "meta": meta,
        "agent": {
            "cfg": params.cfg.__dict__,
            "views": params.views,
            "feature_dim": params.feature_dim,
            "vocab": list(params.vocab),
        },
        "tensors": {k: _encode_array(params.tensors[k].values)
                    for k in sorted(params.tensors)},
        "queue": {"capacity": qs["capacity"], "dim": qs["dim"], "ptr": qs["ptr"],
                  "size": qs["size"], "ring": _encode_array(qs["ring"])},
        "optimizer": opt,
    }
    Path(path).write_text(canonical_json(payload) + "\n")


def load_checkpoint(path: str | Path, expected_model_hash: str | None = None,
                    expected_world: str | None = None
                    ) -> tuple[AgentParams, KeyQueue, dict | None, dict]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {e}") from e
    if data.get("kind") != "checkpoint" or data.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"unsupported checkpoint format in {path}")
    meta = data["meta"]
    if expected_model_hash is not None and meta.get("model_hash") != expected_model_hash:
        raise CheckpointMismatch(
            f"checkpoint model hash {meta.get('model_hash')!r} != expected {expected_model_hash!r}")
    if expected_world is not None and meta.get("world_fingerprint") != expected_world:
        raise CheckpointMismatch("checkpoint was trained against a different world")
    ag = data["agent"]
    cfg = AgentConfig(**ag["cfg"])
    tensors: dict[str, Tensor] = {}
    for name, enc in data["tensors"].items():
        trainable = not name.startswith("cl.momentum.")
        tensors[name] = Tensor(_decode_array(enc), requires_grad=trainable, name=name)
    params = AgentParams(cfg=cfg, views=int(ag["views"]), feature_dim=int(ag["feature_dim"]),
                         vocab=tuple(ag["vocab"]), tensors=tensors,
                         momentum_map={k: v for k, v in _MOMENTUM_SOURCES.items()
                                       if k in tensors})
    q = data["queue"]
    queue = KeyQueue.from_state({"capacity": q["capacity"], "dim": q["dim"],
                                 "ptr": q["ptr"], "size": q["size"],
                                 "ring": _decode_array(q["ring"])})
    opt = None
    if data.get("optimizer") is not None:
        o = data["optimizer"]
        opt = {"step_count": o["step_count"],
               "m": {k: _decode_array(v) for k, v in o["m"].items()},
               "v": {k: _decode_array(v) for k, v in o["v"].items()}}
    return params, queue, opt, meta
