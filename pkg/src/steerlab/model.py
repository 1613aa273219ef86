"""Hierarchical decision network: inner encoder, outer causal decoder, heads.

The inner block turns the (state, per-agent observation) token sequence into a
game-state embedding ``s0`` plus one embedding per agent.  The outer causal
block consumes ``[s0, a^1, a^2, ...]`` so that each agent's decision context
combines its own state embedding with a causal summary of the actions already
committed by higher-priority agents.  One critic head and one actor head per
action-space size sit on top of that context; all agents share the trunk.

Execution is autoregressive (one outer pass per agent); training evaluates
stored joint actions in a single teacher-forced pass.  Both paths agree to
float precision, which the test suite checks explicitly.

Ablation variants: ``itb_mlp`` (per-token MLP instead of the inner attention
stack), ``otb_gru`` (recurrent cell instead of the outer stack), ``itb_only``
(heads read the per-agent state embedding, no action information), and
``otb_only`` (heads read the causal summary alone).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn, tensor as T
from .games import GLOBAL_STATE, LOCAL_ONLY, GameSpec, Observation
from .nn import ConfigError

VARIANTS = ("full", "itb_mlp", "otb_gru", "itb_only", "otb_only")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int
    obs_width: int
    state_width: int
    actions: tuple[int, ...]
    obs_mode: str = GLOBAL_STATE
    embed_dim: int = 64
    itb_layers: int = 2
    otb_layers: int = 2
    heads: int = 4
    variant: str = "full"
    priority: tuple[int, ...] = None
    literal_alignment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if self.priority is None:
            object.__setattr__(self, "priority", tuple(range(self.n_agents)))
        else:
            object.__setattr__(self, "priority", tuple(int(p) for p in self.priority))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.obs_mode not in (GLOBAL_STATE, LOCAL_ONLY):
            raise ConfigError(f"unknown obs_mode {self.obs_mode!r}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.itb_layers < 1 or self.otb_layers < 1:
            raise ConfigError("transformer depths must be >= 1")
        if len(self.actions) != self.n_agents:
            raise ConfigError("one action count per agent required")
        if sorted(self.priority) != list(range(self.n_agents)):
            raise ConfigError(f"priority {self.priority} is not a permutation")

    @classmethod
    def from_game(cls, spec: GameSpec, obs_mode: str | None = None,
                  variant: str = "full", priority=None, **overrides):
        return cls(
            n_agents=spec.n_agents,
            obs_width=spec.obs_width,
            state_width=spec.state_width,
            actions=spec.actions,
            obs_mode=obs_mode or spec.obs_mode,
            variant=variant,
            priority=priority,
            **overrides,
        )

    @property
    def has_otb(self) -> bool:
        return self.variant != "itb_only"

    @property
    def action_sizes(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.actions)))


@dataclass
class DecisionOutput:
    """Per-agent (agent-id indexed) results of one decision pass."""

    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    entropies: np.ndarray


class SteerModel(nn.Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        cfg = config
        n, d = cfg.n_agents, cfg.embed_dim
        self.obs_embed = nn.Linear(rng, cfg.obs_width, d)
        if cfg.obs_mode == GLOBAL_STATE:
            self.state_embed = nn.Linear(rng, cfg.state_width, d)
        else:
            self.class_token = nn.uniform_init(rng, (d,), 1.0 / np.sqrt(d))
        self.itb_pos = nn.uniform_init(rng, (n + 1, d), 1.0 / np.sqrt(d))
        if cfg.variant == "itb_mlp":
            self.itb_token_mlp = nn.Mlp(rng, d)
        else:
            self.itb_blocks = [
                nn.TransformerBlock(rng, d, cfg.heads, causal=False)
                for _ in range(cfg.itb_layers)
            ]
        self.itb_out = nn.Mlp(rng, d)
        if cfg.has_otb:
            self.act_embed = {
                str(k): nn.Embedding(rng, k, d) for k in cfg.action_sizes
            }
            self.otb_in = nn.Mlp(rng, d)
            if cfg.variant == "otb_gru":
                self.gru = nn.GruCell(rng, d)
            else:
                self.otb_pos = nn.uniform_init(rng, (n + 1, d), 1.0 / np.sqrt(d))
                self.otb_blocks = [
                    nn.TransformerBlock(rng, d, cfg.heads, causal=True)
                    for _ in range(cfg.otb_layers)
                ]
            self.otb_out = nn.Mlp(rng, d)
        self.critic = nn.Linear(rng, d, 1)
        self.actors = {str(k): nn.Linear(rng, d, k) for k in cfg.action_sizes}
        self.config = cfg

    # -- forward pieces ----------------------------------------------------

    def itb_tokens(self, per_agent: np.ndarray, global_state: np.ndarray | None):
        """(B, n, obs_w) [+ (B, state_w)] -> token outputs (B, n+1, d)."""
        cfg = self.config
        b = per_agent.shape[0]
        d = cfg.embed_dim
        e_agents = self.obs_embed(T.tensor(per_agent))
        if cfg.obs_mode == GLOBAL_STATE:
            if global_state is None:
                raise ConfigError("global obs mode requires a global state vector")
            e0 = T.reshape(self.state_embed(T.tensor(global_state)), (b, 1, d))
        else:
            e0 = T.add(T.tensor(np.zeros((b, 1, d))),
                       T.reshape(self.class_token, (1, 1, d)))
        h = T.concat([e0, e_agents], axis=1) + self.itb_pos
        if cfg.variant == "itb_mlp":
            h = self.itb_token_mlp(h)
        else:
            for blk in self.itb_blocks:
                h = blk(h)
        return self.itb_out(h)

    def otb_tokens(self, s0, action_ids_by_position: np.ndarray):
        """Causal pass over [s0, committed actions]; returns (B, m+1, d).

        ``action_ids_by_position`` has shape (B, m) with m <= n_agents,
        ordered by decision position.
        """
        cfg = self.config
        b = s0.shape[0]
        d = cfg.embed_dim
        m = action_ids_by_position.shape[1]
        parts = [T.reshape(s0, (b, 1, d))]
        for j in range(m):
            agent = cfg.priority[j]
            emb = self.act_embed[str(cfg.actions[agent])](
                action_ids_by_position[:, j]
            )
            parts.append(T.reshape(emb, (b, 1, d)))
        z = self.otb_in(T.concat(parts, axis=1) if m else parts[0])
        if cfg.variant == "otb_gru":
            return self.otb_out(self.gru.scan(z))
        z = z + self.otb_pos[: m + 1]
        for blk in self.otb_blocks:
            z = blk(z)
        return self.otb_out(z)

    def decision_context(self, y_itb, y_otb, position: int):
        """Per-agent head input for the agent deciding at ``position``."""
        cfg = self.config
        agent = cfg.priority[position]
        if cfg.variant == "itb_only":
            return y_itb[:, agent + 1, :]
        if cfg.variant == "otb_only":
            return y_otb[:, position, :]
        if cfg.literal_alignment:
            return y_itb[:, position, :] + y_otb[:, position, :]
        return y_itb[:, agent + 1, :] + y_otb[:, position, :]

    def head_outputs(self, context, agent: int):
        logits = self.actors[str(self.config.actions[agent])](context)
        value = T.reshape(self.critic(context), (context.shape[0],))
        return logits, value


# ---------------------------------------------------------------------------
# Public operations


def build_variant(config: ModelConfig, rng=None) -> SteerModel:
    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return SteerModel(config, rng)


def encode_itb(model: SteerModel, obs: Observation):
    """Single-observation encoding: (s0 vector, per-agent embedding matrix)."""
    cfg = model.config
    if obs.per_agent.shape != (cfg.n_agents, cfg.obs_width):
        raise ConfigError(
            f"observation shape {obs.per_agent.shape} does not match config "
            f"({cfg.n_agents}, {cfg.obs_width})"
        )
    g = None if obs.global_state is None else obs.global_state[None]
    y = model.itb_tokens(obs.per_agent[None], g)
    return y[0, 0, :], y[0, 1:, :]


def _log_softmax_vec(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    s = logits - m
    return s - np.log(np.exp(s).sum())


def _sample(rng: np.random.Generator, logp: np.ndarray) -> int:
    c = np.cumsum(np.exp(logp))
    u = rng.random() * c[-1]
    return int(min(np.searchsorted(c, u, side="right"), logp.size - 1))


def act_autoregressive(model: SteerModel, obs: Observation, rng=None,
                       mode: str = "sample", cache: dict | None = None,
                       cache_key=None) -> DecisionOutput:
    """Roll the decision order once, sampling (or argmaxing) each agent.

    ``cache`` may hold reusable forward results keyed by ``cache_key``; the
    caller guarantees that identical keys imply identical observations and
    that the cache is dropped whenever parameters change.
    """
    if mode not in ("sample", "greedy"):
        raise ConfigError(f"unknown decision mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ConfigError("sampling requires an rng")
    cfg = model.config
    n = cfg.n_agents
    use_cache = cache is not None and cache_key is not None

    with T.no_grad():
        itb_key = (cache_key, "itb")
        if use_cache and itb_key in cache:
            y_itb_np = cache[itb_key]
        else:
            g = None if obs.global_state is None else obs.global_state[None]
            y_itb_np = model.itb_tokens(obs.per_agent[None], g).numpy()
            if use_cache:
                cache[itb_key] = y_itb_np

        actions = np.zeros(n, dtype=np.int64)
        log_probs = np.zeros(n)
        values = np.zeros(n)
        entropies = np.zeros(n)
        prefix: tuple[int, ...] = ()
        for p in range(n):
            agent = cfg.priority[p]
            step_key = (cache_key, prefix)
            if use_cache and step_key in cache:
                logp_all, value = cache[step_key]
            else:
                y_itb = T.tensor(y_itb_np)
                if cfg.has_otb:
                    ids = np.asarray(prefix, dtype=np.int64).reshape(1, len(prefix))
                    y_otb = model.otb_tokens(y_itb[:, 0, :], ids)
                else:
                    y_otb = None
                ctx = model.decision_context(y_itb, y_otb, p)
                logits, value_t = model.head_outputs(ctx, agent)
                logp_all = _log_softmax_vec(logits.numpy()[0])
                value = float(value_t.numpy()[0])
                if use_cache:
                    cache[step_key] = (logp_all, value)
            if mode == "greedy":
                a = int(np.argmax(logp_all))
            else:
                a = _sample(rng, logp_all)
            actions[agent] = a
            log_probs[agent] = logp_all[a]
            values[agent] = value
            entropies[agent] = -float((np.exp(logp_all) * logp_all).sum())
            prefix = prefix + (a,)

    return DecisionOutput(actions=actions, log_probs=log_probs,
                          values=values, entropies=entropies)


def evaluate_parallel(model: SteerModel, per_agent: np.ndarray,
                      global_state: np.ndarray | None, actions: np.ndarray):
    """Teacher-forced evaluation of stored joint actions.

    Returns agent-id-ordered tensors (log_probs, entropies, values), each of
    shape (batch, n_agents), connected to the parameter graph.
    """
    cfg = model.config
    b, n = actions.shape
    if n != cfg.n_agents:
        raise ConfigError(f"actions have {n} columns, config expects {cfg.n_agents}")
    actions = np.asarray(actions, dtype=np.int64)
    for i in range(n):
        col = actions[:, i]
        if (col < 0).any() or (col >= cfg.actions[i]).any():
            raise ConfigError(f"action out of range for agent {i + 1}")

    y_itb = model.itb_tokens(per_agent, global_state)
    y_otb = None
    if cfg.has_otb:
        ids_by_pos = actions[:, list(cfg.priority)]
        y_otb = model.otb_tokens(y_itb[:, 0, :], ids_by_pos)

    logp_cols = [None] * n
    ent_cols = [None] * n
    val_cols = [None] * n
    for p in range(n):
        agent = cfg.priority[p]
        ctx = model.decision_context(y_itb, y_otb, p)
        logits, value = model.head_outputs(ctx, agent)
        logp_all = T.log_softmax(logits)
        logp = T.gather_last(logp_all, actions[:, agent])
        ent = T.neg(T.sum_(T.mul(T.exp(logp_all), logp_all), axis=-1))
        logp_cols[agent] = T.reshape(logp, (b, 1))
        ent_cols[agent] = T.reshape(ent, (b, 1))
        val_cols[agent] = T.reshape(value, (b, 1))

    return (
        T.concat(logp_cols, axis=1),
        T.concat(ent_cols, axis=1),
        T.concat(val_cols, axis=1),
    )


# ---------------------------------------------------------------------------
# Parameter accounting


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; kept in sync with the constructor."""
    d = cfg.embed_dim
    n = cfg.n_agents

    def linear(fin, fout):
        return fin * fout + fout

    mlp = linear(d, 4 * d) + linear(4 * d, d)
    attn_block = 2 * 2 * d + 4 * linear(d, d) + mlp  # two norms, qkvo, mlp

    total = linear(cfg.obs_width, d)
    if cfg.obs_mode == GLOBAL_STATE:
        total += linear(cfg.state_width, d)
    else:
        total += d  # class token
    total += (n + 1) * d  # inner positions
    if cfg.variant == "itb_mlp":
        total += mlp
    else:
        total += cfg.itb_layers * attn_block
    total += mlp  # inner output map
    if cfg.has_otb:
        total += sum(k * d for k in cfg.action_sizes)  # action tables
        total += mlp  # outer input map
        if cfg.variant == "otb_gru":
            total += 2 * d * 3 * d + 3 * d
        else:
            total += (n + 1) * d  # outer positions
            total += cfg.otb_layers * attn_block
        total += mlp  # outer output map
    total += linear(d, 1)  # critic
    total += sum(linear(d, k) for k in cfg.action_sizes)  # actors
    return total


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: SteerModel, path: str) -> None:
    cfg = model.config
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "n_agents": cfg.n_agents,
            "obs_width": cfg.obs_width,
            "state_width": cfg.state_width,
            "actions": list(cfg.actions),
            "obs_mode": cfg.obs_mode,
            "embed_dim": cfg.embed_dim,
            "itb_layers": cfg.itb_layers,
            "otb_layers": cfg.otb_layers,
            "heads": cfg.heads,
            "variant": cfg.variant,
            "priority": list(cfg.priority),
            "literal_alignment": cfg.literal_alignment,
        },
    }
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> SteerModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format {meta.get('format_version')!r}"
            )
        cfg_d = dict(meta["config"])
        cfg_d["actions"] = tuple(cfg_d["actions"])
        cfg_d["priority"] = tuple(cfg_d["priority"])
        cfg = ModelConfig(**cfg_d)
        model = build_variant(cfg)
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in data:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            stored = data[key]
            if stored.shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint parameter {name!r} has shape {stored.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = stored.astype(np.float64)
    return model
