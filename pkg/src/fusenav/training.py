"""Clipped policy-gradient training (PPO + GAE) over parallel environments.

Rollouts are collected from env_count synchronous environments stepping in
lockstep; parameters stay fixed during collection and a single update is
applied per iteration. Recurrent state is checkpointed at segment starts, so
updates replay each segment forward from the stored state (truncated BPTT)
with episode boundaries masking both bootstrapping and state gradients.

The reward is shaped: w_success on a successful STOP, w_progress times the
per-step reduction in geodesic distance to the goal, and a constant slack
penalty.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .episodes import (ActionId, AgentState, Episode, initial_state, spl,
                       step, success_rate)
from .geometry import Pose
from .nnops import Adam
from .obsdb import ObservationDB, retrieve
from .policy import (N_ACTIONS, FusionSpec, Policy, goal_vector, init_params,
                     save_checkpoint, stack_to_input)
from .sensing import RenderCache, cached_render
from .world import OccupancyWorld


@dataclass(frozen=True)
class RewardWeights:
    success: float = 2.5
    progress: float = 1.0
    slack: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    total_frames: int = 200_000
    env_count: int = 8
    rollout_len: int = 128
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 2
    minibatches: int = 2
    learning_rate: float = 2.5e-4
    lr_decay: bool = True
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    seed: int = 0
    collision_mode: str = "stop"
    eval_every_frames: int = 25_000
    eval_episodes: int = 30
    stop_at_sr: float | None = None
    cache_max_entries: int = 300_000

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip epsilon must be positive")


def reward(prev_state: AgentState, state: AgentState, episode: Episode,
           weights: RewardWeights, world: OccupancyWorld) -> float:
    """Shaped step reward; the progress term uses geodesic distance to goal."""
    goal_cell = world.cell_of(*episode.goal)
    dist_field = world.distance_field(goal_cell)
    d_prev = float(dist_field[world.cell_of(prev_state.pose.x, prev_state.pose.z)])
    d_cur = float(dist_field[world.cell_of(state.pose.x, state.pose.z)])
    r = -weights.slack
    if math.isfinite(d_prev) and math.isfinite(d_cur):
        r += weights.progress * (d_prev - d_cur)
    if state.done and state.success:
        r += weights.success
    return r


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float, bootstrap_value: np.ndarray):
    """Generalized advantage estimation over a (T, ...) rollout.

    dones mask both the bootstrap value and the advantage recursion at
    episode boundaries. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values, dones must align")
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=float)
    next_adv = np.zeros_like(next_value)
    for t in reversed(range(horizon)):
        cont = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * cont - values[t]
        next_adv = delta + gamma * lam * cont * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


# -- rollout storage -------------------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: np.ndarray          # (T, B, K, W)
    prev: np.ndarray         # (T, B, 4)
    goal: np.ndarray         # (T, B, 3)
    actions: np.ndarray      # (T, B) int
    log_probs: np.ndarray    # (T, B)
    values: np.ndarray       # (T, B)
    rewards: np.ndarray      # (T, B)
    dones: np.ndarray        # (T, B)
    start_h: np.ndarray      # (L, B, H) recurrent checkpoint at segment start
    start_c: np.ndarray
    start_subs: list | None  # late fusion: per-sub (h, c) checkpoints
    bootstrap: np.ndarray    # (B,)

    @property
    def frames(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]


class _VecEnvs:
    """env_count episode runners stepping in lockstep."""

    def __init__(self, world: OccupancyWorld, pool: list[Episode],
                 policy: Policy, config: TrainConfig, cache: RenderCache,
                 obs_db: ObservationDB | None, rng: np.random.Generator):
        if not pool:
            raise ValueError("episode pool is empty")
        self.world = world
        self.policy = policy
        self.config = config
        self.cache = cache
        self.obs_db = obs_db
        self.rng = rng
        self.order = rng.permutation(len(pool))
        self.pool = pool
        self.cursor = 0
        self.n = config.env_count
        self.episodes: list[Episode] = [self._next_episode() for _ in range(self.n)]
        self.states: list[AgentState] = [initial_state(ep) for ep in self.episodes]
        self.prev_actions: list[int | None] = [None] * self.n
        self.rnn = policy.initial_state(self.n)
        self.finished: list[tuple[bool, float, float]] = []

    def _next_episode(self) -> Episode:
        ep = self.pool[self.order[self.cursor % len(self.pool)]]
        self.cursor += 1
        return ep

    def _zero_slot(self, state, i: int):
        if state.subs is not None:
            for sub in state.subs:
                self._zero_slot(sub, i)
        if state.h.size:
            state.h[:, i, :] = 0.0
            state.c[:, i, :] = 0.0

    def fetch_stack(self, i: int):
        pose = self.states[i].pose
        if self.obs_db is not None:
            return retrieve(self.obs_db, pose).record.stack
        return cached_render(self.cache, self.world, pose,
                             self.policy.spec.channel_names,
                             width=self.policy.spec.obs_width,
                             fov=self.policy.spec.obs_fov,
                             max_range=self.policy.spec.obs_max_range,
                             base_seed=self.config.seed)

    def observe(self):
        spec = self.policy.spec
        obs = np.empty((self.n, len(spec.channel_names), spec.obs_width))
        goal = np.empty((self.n, 3))
        prev = np.zeros((self.n, N_ACTIONS))
        for i in range(self.n):
            obs[i] = stack_to_input(self.fetch_stack(i), spec)
            goal[i] = goal_vector(self.states[i].pose, self.episodes[i].goal,
                                  spec.goal_rho_max)
            if self.prev_actions[i] is not None:
                prev[i, self.prev_actions[i]] = 1.0
        return obs, prev, goal

    def apply_actions(self, actions: np.ndarray):
        rewards = np.empty(self.n)
        dones = np.zeros(self.n)
        for i in range(self.n):
            ep = self.episodes[i]
            st = step(self.world, self.states[i], ActionId(int(actions[i])), ep,
                      self.config.collision_mode)
            rewards[i] = reward(self.states[i], st, ep,
                                self.config.reward_weights, self.world)
            self.states[i] = st
            self.prev_actions[i] = int(actions[i])
            if st.done:
                dones[i] = 1.0
                self.finished.append((st.success, ep.geodesic_length,
                                      st.path_length))
                self.episodes[i] = self._next_episode()
                self.states[i] = initial_state(self.episodes[i])
                self.prev_actions[i] = None
                self._zero_slot(self.rnn, i)
        return rewards, dones


def _state_checkpoint(state):
    if state.subs is not None:
        return [(s.h.copy(), s.c.copy()) for s in state.subs]
    return None


def collect_rollout(envs: _VecEnvs, rng: np.random.Generator) -> RolloutBuffer:
    cfg = envs.config
    spec = envs.policy.spec
    horizon, n = cfg.rollout_len, envs.n
    k = len(spec.channel_names)
    buf = RolloutBuffer(
        obs=np.empty((horizon, n, k, spec.obs_width)),
        prev=np.empty((horizon, n, N_ACTIONS)),
        goal=np.empty((horizon, n, 3)),
        actions=np.empty((horizon, n), dtype=np.int64),
        log_probs=np.empty((horizon, n)),
        values=np.empty((horizon, n)),
        rewards=np.empty((horizon, n)),
        dones=np.empty((horizon, n)),
        start_h=envs.rnn.h.copy(), start_c=envs.rnn.c.copy(),
        start_subs=_state_checkpoint(envs.rnn),
        bootstrap=np.empty(n))
    for t in range(horizon):
        obs, prev, goal = envs.observe()
        probs, values, envs.rnn, _ = envs.policy.forward(
            obs, prev, goal, envs.rnn, need_trace=False)
        u = rng.random(n)
        cum = np.cumsum(probs, axis=1)
        cum[:, -1] = 1.0 + 1e-12
        actions = (u[:, None] < cum).argmax(axis=1)
        rewards, dones = envs.apply_actions(actions)
        buf.obs[t] = obs
        buf.prev[t] = prev
        buf.goal[t] = goal
        buf.actions[t] = actions
        buf.log_probs[t] = np.log(np.maximum(probs[np.arange(n), actions], 1e-300))
        buf.values[t] = values
        buf.rewards[t] = rewards
        buf.dones[t] = dones
    obs, prev, goal = envs.observe()
    _, boot, _, _ = envs.policy.forward(obs, prev, goal, envs.rnn,
                                        need_trace=False)
    buf.bootstrap = boot
    return buf


# -- PPO update -------------------------------------------------------------------


def _slice_state(policy: Policy, buf: RolloutBuffer, idx: np.ndarray):
    state = policy.initial_state(len(idx))
    if buf.start_subs is not None:
        for sub_state, (h, c) in zip(state.subs, buf.start_subs):
            sub_state.h[:] = h[:, idx, :]
            sub_state.c[:] = c[:, idx, :]
    else:
        state.h[:] = buf.start_h[:, idx, :]
        state.c[:] = buf.start_c[:, idx, :]
    return state


def _mask_state_slots(state, reset: np.ndarray):
    keep = (1.0 - reset)[None, :, None]
    if state.subs is not None:
        for sub in state.subs:
            if sub.h.size:
                sub.h *= keep
                sub.c *= keep
    if state.h.size:
        state.h *= keep
        state.c *= keep


def ppo_update(policy: Policy, buf: RolloutBuffer, config: TrainConfig,
               optimizer: Adam, rng: np.random.Generator,
               lr_scale: float = 1.0) -> dict:
    """One clipped-surrogate update over the buffer; returns loss statistics."""
    horizon, n = buf.rewards.shape
    adv, returns = gae(buf.rewards, buf.values, buf.dones,
                       config.gamma, config.gae_lambda, buf.bootstrap)
    adv_flat = adv.reshape(-1)
    adv = (adv - adv_flat.mean()) / (adv_flat.std() + 1e-8)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_fraction": 0.0, "approx_kl": 0.0, "aborted": False}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for chunk in np.array_split(perm, min(config.minibatches, n)):
            if chunk.size == 0:
                continue
            out = _minibatch_step(policy, buf, config, optimizer, chunk,
                                  adv[:, chunk], returns[:, chunk], lr_scale)
            if out is None:
                stats["aborted"] = True
                return stats
            for key in ("policy_loss", "value_loss", "entropy",
                        "clip_fraction", "approx_kl"):
                stats[key] += out[key]
            count += 1
    for key in ("policy_loss", "value_loss", "entropy", "clip_fraction",
                "approx_kl"):
        stats[key] /= max(count, 1)
    return stats


def _minibatch_step(policy: Policy, buf: RolloutBuffer, config: TrainConfig,
                    optimizer: Adam, idx: np.ndarray, adv: np.ndarray,
                    returns: np.ndarray, lr_scale: float):
    horizon = buf.rewards.shape[0]
    b = len(idx)
    n_elems = horizon * b
    state = _slice_state(policy, buf, idx)

    traces = []
    new_probs = np.empty((horizon, b, N_ACTIONS))
    new_values = np.empty((horizon, b))
    for t in range(horizon):
        probs, values, state, trace = policy.forward(
            buf.obs[t, idx], buf.prev[t, idx], buf.goal[t, idx], state,
            need_trace=True)
        traces.append(trace)
        new_probs[t] = probs
        new_values[t] = values
        _mask_state_slots(state, buf.dones[t, idx])

    rows = np.arange(b)
    acts = buf.actions[:, idx]
    p_new = np.maximum(new_probs[np.arange(horizon)[:, None], rows[None, :], acts],
                       1e-300)
    old_logp = buf.log_probs[:, idx]
    ratio = np.exp(np.log(p_new) - old_logp)
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    use_unclipped = unclipped_term <= clipped_term
    surr = np.minimum(unclipped_term, clipped_term)
    entropy = -(new_probs * np.log(np.maximum(new_probs, 1e-300))).sum(axis=2)

    policy_loss = -surr.mean()
    value_err = new_values - returns
    value_loss = (value_err ** 2).mean()
    loss = (policy_loss + config.value_coef * value_loss
            - config.entropy_coef * entropy.mean())
    if not np.isfinite(loss):
        return None

    # d loss / d probs and d loss / d value, per element
    dprobs = np.zeros_like(new_probs)
    dP_chosen = np.where(use_unclipped, adv / np.exp(old_logp), 0.0)
    dprobs[np.arange(horizon)[:, None], rows[None, :], acts] -= dP_chosen / n_elems
    dprobs += (config.entropy_coef / n_elems) * (
        np.log(np.maximum(new_probs, 1e-300)) + 1.0)
    dvalue = (2.0 * config.value_coef / n_elems) * value_err

    grad = policy.params.zeros_like()
    dstate = None
    for t in reversed(range(horizon)):
        if dstate is not None:
            keep = (1.0 - buf.dones[t, idx])[None, :, None]
            dstate = (dstate[0] * keep, dstate[1] * keep)
        dstate = policy.backward(traces[t], dprobs[t], dvalue[t], grad, dstate)
    optimizer.step(policy.params.vector, grad, lr_scale=lr_scale)

    return {"policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy.mean()),
            "clip_fraction": float((np.abs(ratio - 1.0) > config.clip_eps).mean()),
            "approx_kl": float((old_logp - np.log(p_new)).mean())}


# -- training loop ------------------------------------------------------------------


def quick_validation(policy: Policy, world: OccupancyWorld,
                     episodes: list[Episode], cache: RenderCache,
                     config: TrainConfig,
                     obs_db: ObservationDB | None = None) -> tuple[float, float]:
    """Greedy SR/SPL over a validation batch, all episodes in lockstep."""
    if not episodes:
        return math.nan, math.nan
    spec = policy.spec
    n = len(episodes)
    states = [initial_state(ep) for ep in episodes]
    prev: list[int | None] = [None] * n
    rnn = policy.initial_state(n)
    results = [None] * n
    live = list(range(n))
    for _ in range(max(ep.max_steps for ep in episodes)):
        if not live:
            break
        obs = np.empty((len(live), len(spec.channel_names), spec.obs_width))
        goal = np.empty((len(live), 3))
        prev_oh = np.zeros((len(live), N_ACTIONS))
        for row, i in enumerate(live):
            if obs_db is not None:
                stack = retrieve(obs_db, states[i].pose).record.stack
            else:
                stack = cached_render(cache, world, states[i].pose,
                                      spec.channel_names, width=spec.obs_width,
                                      fov=spec.obs_fov,
                                      max_range=spec.obs_max_range,
                                      base_seed=config.seed)
            obs[row] = stack_to_input(stack, spec)
            goal[row] = goal_vector(states[i].pose, episodes[i].goal,
                                    spec.goal_rho_max)
            if prev[i] is not None:
                prev_oh[row, prev[i]] = 1.0
        sub = _gather_state(rnn, live)
        probs, _, new_sub, _ = policy.forward(obs, prev_oh, goal, sub,
                                              need_trace=False)
        _scatter_state(rnn, new_sub, live)
        actions = probs.argmax(axis=1)
        next_live = []
        for row, i in enumerate(live):
            st = step(world, states[i], ActionId(int(actions[row])),
                      episodes[i], config.collision_mode)
            states[i] = st
            prev[i] = int(actions[row])
            if st.done:
                results[i] = (st.success, episodes[i].geodesic_length,
                              st.path_length)
            else:
                next_live.append(i)
        live = next_live
    rows = [r for r in results if r is not None]
    return (success_rate([r[0] for r in rows]), spl(rows))


def _gather_state(state, idx):
    from .policy import RecurrentState
    subs = None
    if state.subs is not None:
        subs = [_gather_state(s, idx) for s in state.subs]
    return RecurrentState(h=state.h[:, idx, :].copy(),
                          c=state.c[:, idx, :].copy(), subs=subs)


def _scatter_state(state, new_state, idx):
    if state.subs is not None:
        for s, ns in zip(state.subs, new_state.subs):
            _scatter_state(s, ns, idx)
    if state.h.size:
        state.h[:, idx, :] = new_state.h
        state.c[:, idx, :] = new_state.c


def train(policy_or_spec, config: TrainConfig, world: OccupancyWorld,
          episode_pool: list[Episode],
          val_episodes: list[Episode] | None = None,
          obs_db: ObservationDB | None = None,
          verbose: bool = False) -> tuple[Policy, list[dict]]:
    """Train a policy until total_frames (or the early-stop SR) is reached.

    Passing an ObservationDB replaces rendering with database retrieval
    during collection (the fine-tune-on-target mode). Returns the trained
    policy and the training curve rows.
    """
    if isinstance(policy_or_spec, Policy):
        policy = policy_or_spec
    else:
        policy = Policy(spec=policy_or_spec,
                        params=init_params(policy_or_spec, seed=config.seed))
    cache = RenderCache(max_entries=config.cache_max_entries)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x7EA1)))
    envs = _VecEnvs(world, episode_pool, policy, config, cache, obs_db, rng)
    optimizer = Adam(lr=config.learning_rate, clip_norm=config.max_grad_norm)

    curve: list[dict] = []
    frames = 0
    next_eval = config.eval_every_frames
    t0 = time.time()
    while frames < config.total_frames:
        buf = collect_rollout(envs, rng)
        frames += buf.frames
        lr_scale = (1.0 - frames / config.total_frames) if config.lr_decay else 1.0
        lr_scale = max(lr_scale, 0.05)
        stats = ppo_update(policy, buf, config, optimizer, rng, lr_scale)

        window = envs.finished[-100:]
        row = {"frame": frames,
               "mean_reward": float(buf.rewards.mean()),
               "episode_sr": (success_rate([w[0] for w in window])
                              if window else math.nan),
               "val_sr": math.nan, "val_spl": math.nan,
               **{k: stats[k] for k in ("policy_loss", "value_loss", "entropy",
                                        "clip_fraction", "approx_kl")}}
        if val_episodes and frames >= next_eval:
            next_eval += config.eval_every_frames
            sr, spl_v = quick_validation(policy, world, val_episodes, cache,
                                         config)
            row["val_sr"], row["val_spl"] = sr, spl_v
            if verbose:
                print(f"[train] frame {frames} sr {sr:.3f} spl {spl_v:.3f} "
                      f"reward {row['mean_reward']:.4f} "
                      f"({time.time() - t0:.0f}s)")
            if config.stop_at_sr is not None and sr >= config.stop_at_sr:
                curve.append(row)
                break
        curve.append(row)
    policy.metadata = {**policy.metadata, "frames": frames,
                       "train_seed": config.seed}
    return policy, curve


def train_late_fusion(sub_policies: list[Policy], config: TrainConfig,
                      world: OccupancyWorld, episode_pool: list[Episode],
                      val_episodes: list[Episode] | None = None,
                      obs_db: ObservationDB | None = None,
                      spec: FusionSpec | None = None,
                      verbose: bool = False) -> tuple[Policy, list[dict]]:
    """Train only the policy fusion module over frozen sub-policies."""
    if len(sub_policies) < 2:
        raise ValueError("late fusion requires >= 2 trained sub-policies")
    if spec is None:
        union: list[str] = []
        for sub in sub_policies:
            for name in sub.spec.channel_names:
                if name not in union:
                    union.append(name)
        spec = replace(sub_policies[0].spec, architecture="late_fusion",
                       channel_names=tuple(union))
    policy = Policy(spec=spec,
                    params=init_params(spec, seed=config.seed,
                                       n_sub_policies=len(sub_policies)),
                    subs=sub_policies)
    return train(policy, config, world, episode_pool, val_episodes, obs_db,
                 verbose)


def save_curve(curve: list[dict], path: str):
    if not curve:
        return
    fields = list(curve[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(curve)
