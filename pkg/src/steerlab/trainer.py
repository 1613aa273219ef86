"""On-policy training: rollout collection, advantage estimation, clipped PPO.

Each agent keeps private rewards and a private advantage stream computed from
its own conditional value estimates; ratios condition on the leaders' stored
actions through the teacher-forced evaluation pass, and one combined gradient
step updates the shared trunk and both heads for all agents simultaneously.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import games, tensor as T
from .games import GLOBAL_STATE, GameSpec
from .model import ModelConfig, SteerModel, act_autoregressive, build_variant, evaluate_parallel
from .optim import Adam, clip_grad_global_norm

MAX_GRAD_NORM = 0.5  # global L2 clip before every optimizer step
ADV_STD_FLOOR = 1e-8


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}; diagnostics: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    total_steps: int = 60_000
    rollout_len: int = 128
    epochs: int = 4
    minibatches: int = 2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2  # math.inf disables ratio clipping
    value_clip_eps: float = 0.2  # math.inf disables value clipping
    entropy_coef: float = 0.05
    entropy_coef_final: float = 0.0  # linearly annealed across the step budget
    lr: float = 5e-4
    seed: int = 0
    eval_interval: int = 16  # updates between greedy evaluations
    eval_episodes: int = 4
    # Rewards are divided by this for learning only (value targets stay
    # comparable across payoff scales); None derives 1/max|payoff| from the
    # game table. Evaluation always reports raw returns.
    reward_scale: float | None = None
    adv_norm: bool = True  # per-minibatch per-agent advantage normalization

    def entropy_coef_at(self, update: int, n_updates: int) -> float:
        """Entropy weight for a 1-based update index, linear in env steps."""
        if n_updates <= 1:
            return self.entropy_coef
        frac = (update - 1) / (n_updates - 1)
        return self.entropy_coef + frac * (self.entropy_coef_final - self.entropy_coef)

    def validate(self) -> None:
        for name, eps in (("clip_eps", self.clip_eps), ("value_clip_eps", self.value_clip_eps)):
            if not (0.0 < eps < 1.0 or math.isinf(eps)):
                raise ValueError(f"{name} must lie in (0,1) or be inf to disable")
        for name, v in (("gamma", self.gamma), ("gae_lambda", self.gae_lambda)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1]")
        for name, v in (
            ("total_steps", self.total_steps),
            ("rollout_len", self.rollout_len),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ):
            if v < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < self.rollout_len:
            raise ValueError("total_steps must cover at least one rollout")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RolloutBatch:
    per_agent_obs: np.ndarray  # (T, n, obs_w)
    global_obs: np.ndarray | None  # (T, state_w) in global mode
    state_ids: np.ndarray  # (T,)
    actions: np.ndarray  # (T, n)
    log_probs: np.ndarray  # (T, n)
    values: np.ndarray  # (T, n)
    rewards: np.ndarray  # (T, n)
    dones: np.ndarray  # (T,)
    bootstrap: np.ndarray  # (n,) value at the truncation point, zero if done
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


def reward_unit(spec: GameSpec) -> float:
    """Largest absolute payoff in the game table (at least 1)."""
    peak = max((abs(v) for vec in spec.rewards.values() for v in vec), default=1.0)
    return max(peak, 1.0)


def collect_rollouts(spec: GameSpec, model: SteerModel, steps: int,
                     rng: np.random.Generator, env_state=None, obs=None,
                     cache: dict | None = None, reward_scale: float = 1.0):
    """Sample ``steps`` transitions, auto-resetting episodes as they finish.

    Returns (batch, env_state, obs) so the caller can continue the episode in
    the next collection window.  ``cache`` memoizes forward passes per stage
    state for the duration of one window (parameters must not change inside).
    Stored rewards are multiplied by ``reward_scale``.
    """
    n = spec.n_agents
    use_global = spec.obs_mode == GLOBAL_STATE
    if env_state is None or env_state.done:
        env_state, obs = games.reset(spec)

    per_agent = np.empty((steps, n, spec.obs_width))
    global_obs = np.empty((steps, spec.state_width)) if use_global else None
    state_ids = np.empty(steps, dtype=np.int64)
    actions = np.empty((steps, n), dtype=np.int64)
    log_probs = np.empty((steps, n))
    values = np.empty((steps, n))
    rewards = np.empty((steps, n))
    dones = np.empty(steps, dtype=bool)

    for t in range(steps):
        per_agent[t] = obs.per_agent
        if use_global:
            global_obs[t] = obs.global_state
        state_ids[t] = env_state.state
        decision = act_autoregressive(model, obs, rng, mode="sample",
                                      cache=cache, cache_key=env_state.state)
        actions[t] = decision.actions
        log_probs[t] = decision.log_probs
        values[t] = decision.values
        env_state, nobs, step_rewards, done = games.step(spec, env_state, decision.actions)
        rewards[t] = step_rewards
        if reward_scale != 1.0:
            rewards[t] *= reward_scale
        dones[t] = done
        if done:
            env_state, obs = games.reset(spec)
        else:
            obs = nobs

    if dones[-1]:
        bootstrap = np.zeros(n)
    else:
        tail = act_autoregressive(model, obs, rng, mode="sample",
                                  cache=cache, cache_key=env_state.state)
        bootstrap = tail.values

    batch = RolloutBatch(
        per_agent_obs=per_agent,
        global_obs=global_obs,
        state_ids=state_ids,
        actions=actions,
        log_probs=log_probs,
        values=values,
        rewards=rewards,
        dones=dones,
        bootstrap=bootstrap,
    )
    return batch, env_state, obs


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Exponentially-weighted advantage recursion per agent, plus returns."""
    steps, n = batch.rewards.shape
    adv = np.zeros((steps, n))
    gae = np.zeros(n)
    next_values = batch.bootstrap
    for t in range(steps - 1, -1, -1):
        live = 0.0 if batch.dones[t] else 1.0
        delta = batch.rewards[t] + gamma * live * next_values - batch.values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
        next_values = batch.values[t]
    batch.advantages = adv
    batch.returns = adv + batch.values
    return batch


def _dedup_minibatch(batch: RolloutBatch, chunk: np.ndarray, norm_adv: np.ndarray):
    """Collapse identical training rows into (row indices, occurrence weights).

    Rows agree when state, joint action and every per-agent scalar agree, so
    the weighted loss over unique rows equals the plain mean over the chunk.
    Matrix-game batches collapse to a handful of rows.
    """
    key = np.concatenate(
        [
            batch.state_ids[chunk, None].astype(np.float64),
            batch.actions[chunk].astype(np.float64),
            batch.log_probs[chunk],
            batch.values[chunk],
            norm_adv,
            batch.returns[chunk],
        ],
        axis=1,
    )
    _, first, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
    weights = counts / chunk.size
    return first, weights


def _weighted_mean(x, weights_col, n_agents: int):
    """Mean over (row, agent) where each row carries an occurrence weight."""
    return T.sum_(T.mul(x, weights_col)) * (1.0 / n_agents)


def ppo_update(model: SteerModel, opt: Adam, batch: RolloutBatch,
               cfg: TrainConfig, rng: np.random.Generator,
               entropy_coef: float | None = None) -> dict:
    """Clipped-surrogate update over all epochs/minibatches of one batch."""
    if batch.advantages is None:
        raise TrainingAborted("advantages not computed", {})
    eta = cfg.entropy_coef if entropy_coef is None else entropy_coef
    steps, n = batch.actions.shape
    params = model.parameters()
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
              "clip_fraction": 0.0, "grad_norm": 0.0}
    first_ratio_dev = None
    iters = 0

    for _ in range(cfg.epochs):
        perm = rng.permutation(steps)
        for chunk in np.array_split(perm, cfg.minibatches):
            adv = batch.advantages[chunk]
            if cfg.adv_norm:
                mean = adv.mean(axis=0, keepdims=True)
                std = adv.std(axis=0, keepdims=True)
                norm_adv = (adv - mean) / (std + ADV_STD_FLOOR)
            else:
                norm_adv = adv

            first, weights = _dedup_minibatch(batch, chunk, norm_adv)
            rows = chunk[first]
            norm_rows = norm_adv[first]
            w_col = weights[:, None]

            T.clear_graph()
            g = batch.global_obs[rows] if batch.global_obs is not None else None
            logp, ent, values = evaluate_parallel(
                model, batch.per_agent_obs[rows], g, batch.actions[rows]
            )
            ratio = T.exp(logp - T.tensor(batch.log_probs[rows]))
            if first_ratio_dev is None:
                first_ratio_dev = float(np.abs(ratio.numpy() - 1.0).max())
            adv_t = T.tensor(norm_rows)
            surr1 = ratio * adv_t
            surr2 = T.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv_t
            policy_obj = _weighted_mean(T.minimum(surr1, surr2), w_col, n)
            entropy_mean = _weighted_mean(ent, w_col, n)

            rets = T.tensor(batch.returns[rows])
            v_old = batch.values[rows]
            err = values - rets
            e_unclipped = err * err
            v_clipped = T.clip(values, v_old - cfg.value_clip_eps, v_old + cfg.value_clip_eps)
            err_c = v_clipped - rets
            e_clipped = err_c * err_c
            value_loss = _weighted_mean(T.maximum(e_unclipped, e_clipped), w_col, n)

            loss = T.neg(policy_obj + eta * entropy_mean) + 0.5 * value_loss

            snapshot = {
                "policy_loss": -policy_obj.item(),
                "value_loss": value_loss.item(),
                "entropy": entropy_mean.item(),
            }
            if not all(math.isfinite(v) for v in snapshot.values()):
                raise TrainingAborted("non-finite loss", {
                    **snapshot,
                    "ratio_max": float(np.abs(ratio.numpy()).max()),
                    "adv_max": float(np.abs(norm_rows).max()),
                })

            T.backward(loss)
            grad_norm = clip_grad_global_norm(params, MAX_GRAD_NORM)
            opt.step()

            clip_frac = float(
                ((np.abs(ratio.numpy() - 1.0) > cfg.clip_eps) * w_col).sum() / n
            )
            totals["policy_loss"] += snapshot["policy_loss"]
            totals["value_loss"] += snapshot["value_loss"]
            totals["entropy"] += snapshot["entropy"]
            totals["clip_fraction"] += clip_frac
            totals["grad_norm"] += grad_norm
            iters += 1

    T.clear_graph()
    stats = {k: v / iters for k, v in totals.items()}
    stats["first_ratio_max_dev"] = first_ratio_dev
    return stats


def discounted_returns(rewards: list, gamma: float, n: int) -> np.ndarray:
    out = np.zeros(n)
    disc = 1.0
    for r in rewards:
        out += disc * np.asarray(r)
        disc *= gamma
    return out


def evaluate_greedy(spec: GameSpec, model: SteerModel, episodes: int,
                    gamma: float, se_paths=None):
    """Greedy rollouts; returns (mean per-agent discounted return, trajectory,
    se_match flag or None when no oracle paths were supplied)."""
    cache: dict = {}
    totals = np.zeros(spec.n_agents)
    trajectory = None
    for _ in range(episodes):
        env_state, obs = games.reset(spec)
        rewards = []
        joints = []
        while not env_state.done:
            decision = act_autoregressive(model, obs, mode="greedy",
                                          cache=cache, cache_key=env_state.state)
            env_state, nobs, r, done = games.step(spec, env_state, decision.actions)
            rewards.append(r)
            joints.append(tuple(int(a) for a in decision.actions))
            if not done:
                obs = nobs
        totals += discounted_returns(rewards, gamma, spec.n_agents)
        trajectory = tuple(joints)
    mean_returns = totals / episodes
    se_match = None
    if se_paths is not None:
        se_match = trajectory in set(se_paths)
    return mean_returns, trajectory, se_match


METRIC_FIELDS = ["update", "env_steps", "policy_loss", "value_loss", "entropy",
                 "clip_fraction", "grad_norm"]


@dataclass
class TrainResult:
    model: SteerModel
    metrics: list[dict] = field(default_factory=list)
    final_eval: dict | None = None


def train(spec: GameSpec, model_cfg: ModelConfig, cfg: TrainConfig,
          se_paths=None, metrics_path: str | None = None) -> TrainResult:
    """Alternate collect / estimate / update until the step budget is spent.

    Greedy evaluations run every ``eval_interval`` updates and always on the
    final update; when oracle paths are supplied each evaluation also records
    whether the greedy trajectory is an equilibrium path.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    model = build_variant(model_cfg, rng)
    opt = Adam(model.parameters(), lr=cfg.lr)
    n_updates = cfg.total_steps // cfg.rollout_len
    scale = (1.0 / reward_unit(spec)) if cfg.reward_scale is None else cfg.reward_scale
    env_state, obs = games.reset(spec)
    rows: list[dict] = []
    final_eval = None

    for update in range(1, n_updates + 1):
        cache: dict = {}
        batch, env_state, obs = collect_rollouts(
            spec, model, cfg.rollout_len, rng, env_state, obs, cache,
            reward_scale=scale,
        )
        compute_gae(batch, cfg.gamma, cfg.gae_lambda)
        stats = ppo_update(model, opt, batch, cfg, rng,
                           entropy_coef=cfg.entropy_coef_at(update, n_updates))

        row = {
            "update": update,
            "env_steps": update * cfg.rollout_len,
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
            "clip_fraction": stats["clip_fraction"],
            "grad_norm": stats["grad_norm"],
        }
        if update % cfg.eval_interval == 0 or update == n_updates:
            mean_returns, trajectory, se_match = evaluate_greedy(
                spec, model, cfg.eval_episodes, cfg.gamma, se_paths
            )
            for i in range(spec.n_agents):
                row[f"eval_return_{i + 1}"] = mean_returns[i]
            row["se_match"] = "" if se_match is None else int(se_match)
            final_eval = {
                "update": update,
                "returns": mean_returns,
                "trajectory": trajectory,
                "se_match": se_match,
            }
        else:
            for i in range(spec.n_agents):
                row[f"eval_return_{i + 1}"] = ""
            row["se_match"] = ""
        rows.append(row)

    if metrics_path:
        write_metrics_csv(metrics_path, rows, spec.n_agents)
    return TrainResult(model=model, metrics=rows, final_eval=final_eval)


def write_metrics_csv(path: str, rows: list[dict], n_agents: int) -> None:
    fields = METRIC_FIELDS + [f"eval_return_{i + 1}" for i in range(n_agents)] + ["se_match"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt_cell(row.get(k, "")) for k in fields])


def _fmt_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
