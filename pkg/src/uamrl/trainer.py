"""Centralised-critic actor-critic training and the independent-Q baseline.

``commnet`` mode trains one CommNet actor shared by all agents together with a
critic that sees every observation and action. The actor ascends
``mean_i Q(S_i, A_i) * grad log pi(A_i | S_i)``, the score-function estimate of
the policy gradient for discrete actions. ``iql-dnn`` mode gives each agent its
own DNN Q-network trained on its own observation and reward, with no
communication and no shared critic. Both modes use the same replay buffer,
target networks and exploration schedule so only the learner differs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import Callable, Sequence

import numpy as np

from uamrl import env as sim
from uamrl.nn import Adam, CommNetPolicy, Critic, DnnPolicy, NumericFault, load_checkpoint, save_checkpoint, softmax
from uamrl.reward import RewardConfig, compute_rewards

log = logging.getLogger(__name__)

MODES = ("commnet", "iql-dnn")


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 5e-4
    batch_size: int = 256
    buffer_capacity: int = 10_000
    epsilon_start: float = 0.3
    epsilon_decay: float = 1e-4
    epsilon_floor: float = 0.01
    episodes: int = 5000
    update_every: int = 4
    target_sync_every: int = 100
    min_fill: int | None = None
    hidden: int = 64
    layers: int = 6
    eval_episodes: int = 10
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ("epsilon_start", "epsilon_floor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.epsilon_decay < 0:
            raise ValueError("epsilon_decay must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        for name in ("batch_size", "buffer_capacity", "episodes", "update_every", "target_sync_every", "hidden",
                     "layers", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer_capacity")
        if self.min_fill is not None and not 1 <= self.min_fill <= self.buffer_capacity:
            raise ValueError("min_fill must lie in [1, buffer_capacity]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def ready_at(self) -> int:
        return self.batch_size if self.min_fill is None else self.min_fill


def epsilon_at(cfg: TrainerConfig, episode: int) -> float:
    """Linear per-episode annealing with a floor."""
    return max(cfg.epsilon_floor, cfg.epsilon_start - cfg.epsilon_decay * episode)


# --------------------------------------------------------------------------- replay


@dataclass
class Transition:
    obs: np.ndarray
    actions: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    masks: np.ndarray | None = None
    next_masks: np.ndarray | None = None
    agent_rewards: np.ndarray | None = None


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    masks: np.ndarray
    next_masks: np.ndarray
    agent_rewards: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, n_agents: int, obs_len: int, n_actions: int = sim.N_ACTIONS,
                 min_fill: int = 1):
        self.capacity, self.min_fill = capacity, min_fill
        self.obs = np.zeros((capacity, n_agents, obs_len))
        self.next_obs = np.zeros((capacity, n_agents, obs_len))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.agent_rewards = np.zeros((capacity, n_agents))
        self.dones = np.zeros(capacity, dtype=bool)
        self.masks = np.ones((capacity, n_agents, n_actions), dtype=bool)
        self.next_masks = np.ones((capacity, n_agents, n_actions), dtype=bool)
        # Insertion serial of each slot, so eviction order can be audited.
        self.serial = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.size = 0
        self.pushed = 0
        self.reads = 0

    def __len__(self) -> int:
        return self.size

    @property
    def ready(self) -> bool:
        return self.size >= self.min_fill

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.actions[i] = t.actions
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.masks[i] = True if t.masks is None else t.masks
        self.next_masks[i] = True if t.next_masks is None else t.next_masks
        self.agent_rewards[i] = 0.0 if t.agent_rewards is None else t.agent_rewards
        self.serial[i] = self.pushed
        self.pushed += 1
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def in_order(self) -> np.ndarray:
        """Slot indices of the stored transitions, oldest first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch | None:
        """Uniform draw with replacement, or ``None`` while below ``min_fill``."""
        if not self.ready:
            return None
        self.reads += 1
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx],
                     self.masks[idx], self.next_masks[idx], self.agent_rewards[idx], idx)


# --------------------------------------------------------------------------- acting


def select_actions(probs: np.ndarray, epsilon: float, rng: np.random.Generator, masks: np.ndarray) -> np.ndarray:
    """Epsilon-greedy sampling from per-agent distributions restricted to legal actions.

    ``probs`` is ``[M, A]``. With probability ``epsilon`` an agent picks uniformly
    among its legal actions, otherwise it samples from its distribution with
    illegal actions removed and the rest renormalised.
    """
    actions = np.empty(len(masks), dtype=np.int64)
    for m, (p, mask) in enumerate(zip(probs, masks)):
        legal = np.flatnonzero(mask)
        if legal.size == 0:
            raise sim.ContractViolation(f"agent {m} has no legal action")
        if rng.random() < epsilon:
            actions[m] = legal[rng.integers(legal.size)]
            continue
        w = np.asarray(p, dtype=float)[legal]
        total = w.sum()
        if not total > 0:
            w, total = np.ones(legal.size), float(legal.size)
        actions[m] = legal[np.searchsorted(np.cumsum(w / total), rng.random(), side="right").clip(0, legal.size - 1)]
    return actions


def greedy_actions(scores: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Arg-max over legal actions along the last axis; ties go to the lowest id."""
    return np.where(masks, scores, -np.inf).argmax(axis=-1)


# --------------------------------------------------------------------------- learners


def critic_target(batch: Batch, target_actor: CommNetPolicy, target_critic: Critic, gamma: float) -> np.ndarray:
    """``y = r + gamma * Q'(S', argmax pi'(S'))``, with no bootstrap on terminal steps."""
    if gamma == 0.0:
        return batch.rewards.copy()
    next_actions = greedy_actions(target_actor.logits(batch.next_obs), batch.next_masks)
    q_next = target_critic.forward(batch.next_obs, next_actions).astype(float)
    return batch.rewards + gamma * np.where(batch.dones, 0.0, q_next)


def critic_update(batch: Batch, critic: Critic, y: np.ndarray, optimizer: Adam) -> float:
    """One Adam step on the mean squared error between ``y`` and ``Q(S, A)``."""
    q = critic.forward(batch.obs, batch.actions)
    err = y - q
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise NumericFault(f"critic loss is {loss}")
    grads = critic.backward(-2.0 * err / len(err))
    optimizer.step(critic.params, grads)
    return loss


def actor_update(batch: Batch, actor: CommNetPolicy, critic: Critic, optimizer: Adam) -> float:
    """One Adam ascent step on ``mean_i Q(S_i, A_i) * log pi(A_i | S_i)``.

    This stands in for the deterministic form ``E[Q(s, a) grad pi(s)]``, which has
    no direct meaning for a categorical policy. The critic is held fixed.
    Returns the surrogate objective before the step.
    """
    q = critic.forward(batch.obs, batch.actions).astype(float)
    critic._cache = None
    logits = actor.logits(batch.obs)
    probs = softmax(logits, batch.masks)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, batch.actions[..., None], 1.0, axis=-1)
    chosen = np.take_along_axis(probs, batch.actions[..., None], axis=-1)[..., 0]
    n = len(q)
    objective = float(np.sum(q * np.log(np.maximum(chosen, 1e-300)).sum(axis=1)) / n)
    dlogits = (q / n)[:, None, None] * (onehot - probs)
    grads = actor.backward(-dlogits)
    optimizer.step(actor.params, grads)
    return objective


def sync_targets(online: Sequence, targets: Sequence, updates: int, period: int) -> bool:
    """Hard-copy online parameters into the targets when ``updates`` hits the period."""
    if updates % period != 0:
        return False
    for src, dst in zip(online, targets):
        for a, b in zip(src.params, dst.params):
            b[...] = a
    return True


class CommNetLearner:
    mode = "commnet"

    def __init__(self, obs_len: int, n_agents: int, cfg: TrainerConfig, seed: int):
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.actor = CommNetPolicy(obs_len, n_agents, sim.N_ACTIONS, cfg.hidden, cfg.layers, seed=seed, dtype=dtype)
        self.critic = Critic(obs_len, n_agents, sim.N_ACTIONS, cfg.hidden, cfg.layers, seed=seed + 1, dtype=dtype)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, lr=cfg.lr)
        self.critic_opt = Adam(self.critic.params, lr=cfg.lr)
        self.updates = 0

    def probs(self, obs: np.ndarray, masks: np.ndarray | None = None) -> np.ndarray:
        return self.actor.forward(obs, masks)

    def greedy(self, obs: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return greedy_actions(self.actor.logits(obs), masks)

    def update(self, batch: Batch) -> dict:
        y = critic_target(batch, self.target_actor, self.target_critic, self.cfg.gamma)
        loss = critic_update(batch, self.critic, y, self.critic_opt)
        objective = actor_update(batch, self.actor, self.critic, self.actor_opt)
        self.updates += 1
        sync_targets((self.actor, self.critic), (self.target_actor, self.target_critic),
                     self.updates, self.cfg.target_sync_every)
        return {"loss": loss, "objective": objective}

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic}


class IqlLearner:
    """Independent per-agent Q-networks; no parameters or hidden states are shared."""

    mode = "iql-dnn"

    def __init__(self, obs_len: int, n_agents: int, cfg: TrainerConfig, seed: int):
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.qnets = [DnnPolicy(obs_len, sim.N_ACTIONS, cfg.hidden, cfg.layers, seed=seed + 7 * m, dtype=dtype)
                      for m in range(n_agents)]
        self.targets = [q.copy() for q in self.qnets]
        self.opts = [Adam(q.params, lr=cfg.lr) for q in self.qnets]
        self.updates = 0

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """``[M, D]`` or ``[B, M, D]`` observations to per-agent Q-values."""
        axis = obs.ndim - 2
        return np.stack([q.logits(np.take(obs, m, axis=axis)) for m, q in enumerate(self.qnets)], axis=axis)

    def probs(self, obs: np.ndarray, masks: np.ndarray | None = None) -> np.ndarray:
        return softmax(self.q_values(obs), masks)

    def greedy(self, obs: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return greedy_actions(self.q_values(obs), masks)

    def update(self, batch: Batch) -> dict:
        losses = []
        n = len(batch)
        rows = np.arange(n)
        for m, (q, target, opt) in enumerate(zip(self.qnets, self.targets, self.opts)):
            q_next = np.where(batch.next_masks[:, m], target.logits(batch.next_obs[:, m]), -np.inf).max(axis=1)
            y = batch.agent_rewards[:, m] + self.cfg.gamma * np.where(batch.dones, 0.0, q_next)
            out = q.logits(batch.obs[:, m])
            err = y - out[rows, batch.actions[:, m]]
            loss = float(np.mean(err * err))
            if not math.isfinite(loss):
                raise NumericFault(f"agent {m} Q loss is {loss}")
            dout = np.zeros_like(out)
            dout[rows, batch.actions[:, m]] = -2.0 * err / n
            opt.step(q.params, q.backward(dout))
            losses.append(loss)
        self.updates += 1
        sync_targets(self.qnets, self.targets, self.updates, self.cfg.target_sync_every)
        return {"loss": float(np.mean(losses)), "objective": float("nan")}

    def networks(self) -> dict:
        return {f"q{m}": q for m, q in enumerate(self.qnets)}


def make_learner(mode: str, sim_cfg: sim.SimConfig, cfg: TrainerConfig, seed: int):
    if mode == "commnet":
        return CommNetLearner(sim_cfg.obs_len, sim_cfg.n_agents, cfg, seed)
    if mode == "iql-dnn":
        return IqlLearner(sim_cfg.obs_len, sim_cfg.n_agents, cfg, seed)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


# --------------------------------------------------------------------------- loops


def episode_seed(seed: int, episode: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, episode]).generate_state(1)[0])


@dataclass
class CurveRow:
    episode: int
    total_reward: float
    epsilon: float
    loss: float
    serviced: int


@dataclass
class TrainResult:
    mode: str
    seed: int
    learner: object
    curve: list[CurveRow]
    transitions: int
    updates: int


def train(
    sim_cfg: sim.SimConfig,
    reward_cfg: RewardConfig,
    cfg: TrainerConfig,
    mode: str,
    seed: int,
    episodes: int | None = None,
    progress: Callable[[CurveRow], None] | None = None,
) -> TrainResult:
    episodes = cfg.episodes if episodes is None else episodes
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    learner = make_learner(mode, sim_cfg, cfg, seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, sim_cfg.n_agents, sim_cfg.obs_len, min_fill=cfg.ready_at)
    curve = []
    steps = 0
    for ep in range(episodes):
        eps = epsilon_at(cfg, ep)
        state = sim.reset(sim_cfg, episode_seed(seed, ep), record=False)
        obs, masks = sim.observe_all(state), sim.legal_masks(state)
        total, losses = 0.0, []
        done = False
        while not done:
            actions = select_actions(learner.probs(obs), eps, rng, masks)
            try:
                state, events, done = sim.step(state, actions)
                rewards = compute_rewards(state, events, reward_cfg)
            except (FloatingPointError, sim.ContractViolation) as exc:
                raise type(exc)(f"episode {ep}, step {state.clock}: {exc}") from exc
            next_obs, next_masks = sim.observe_all(state), sim.legal_masks(state)
            buffer.push(Transition(obs, actions, rewards.team, next_obs, done, masks, next_masks, rewards.total))
            total += rewards.team
            obs, masks = next_obs, next_masks
            steps += 1
            if steps % cfg.update_every == 0:
                batch = buffer.sample(cfg.batch_size, rng)
                if batch is not None:
                    try:
                        losses.append(learner.update(batch)["loss"])
                    except FloatingPointError as exc:
                        raise NumericFault(f"episode {ep}, step {state.clock}: {exc}") from exc
        row = CurveRow(ep, total, eps, float(np.mean(losses)) if losses else float("nan"),
                       sum(a.delivered for a in state.agents))
        curve.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(mode, seed, learner, curve, buffer.pushed, learner.updates)


@dataclass
class EpisodeReport:
    seed: int
    serviced_per_agent: list[int]
    vertiports_per_agent: list[int]
    mean_wait_min: float | None
    total_reward: float

    @property
    def serviced_total(self) -> int:
        return sum(self.serviced_per_agent)


@dataclass
class EvalReport:
    mode: str
    episodes: list[EpisodeReport]
    trajectory_files: list[str] = field(default_factory=list)

    @property
    def serviced_total(self) -> float:
        return float(np.mean([e.serviced_total for e in self.episodes]))

    @property
    def mean_wait_min(self) -> float | None:
        """Average over every delivered passenger in every episode; ``None`` if nobody arrived."""
        num = sum(e.mean_wait_min * e.serviced_total for e in self.episodes if e.mean_wait_min is not None)
        den = sum(e.serviced_total for e in self.episodes if e.mean_wait_min is not None)
        return num / den if den else None

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "mode": self.mode,
            "serviced_total": self.serviced_total,
            "mean_wait_min": self.mean_wait_min,
            "episodes": [asdict(e) | {"serviced_total": e.serviced_total} for e in self.episodes],
            "trajectory_files": self.trajectory_files,
        }


def run_episode(learner, sim_cfg: sim.SimConfig, reward_cfg: RewardConfig, seed: int, record: bool = False):
    """Greedy rollout; returns the final state and the summed team reward."""
    state = sim.reset(sim_cfg, seed, record=record)
    total, done = 0.0, False
    while not done:
        actions = learner.greedy(sim.observe_all(state), sim.legal_masks(state))
        state, events, done = sim.step(state, actions)
        total += compute_rewards(state, events, reward_cfg).team
    return state, total


def evaluate(
    learner,
    sim_cfg: sim.SimConfig,
    reward_cfg: RewardConfig,
    episodes: int,
    seed: int,
    out_dir: str | Path | None = None,
) -> EvalReport:
    reports, files = [], []
    for ep in range(episodes):
        ep_seed = episode_seed(seed, ep, stream=1)
        state, total = run_episode(learner, sim_cfg, reward_cfg, ep_seed, record=out_dir is not None)
        delivered = [p for p in state.passengers if p.status is sim.Status.DELIVERED]
        waits = [sim.waiting_time(state, p.id) for p in delivered]
        reports.append(EpisodeReport(
            seed=ep_seed,
            serviced_per_agent=[a.delivered for a in state.agents],
            vertiports_per_agent=[len(a.visited) for a in state.agents],
            mean_wait_min=float(np.mean(waits)) if waits else None,
            total_reward=total,
        ))
        if out_dir is not None:
            paths = sim.write_trajectories(state, out_dir, prefix=f"trajectory_ep{ep}")
            files += [str(p) for p in paths]
    return EvalReport(learner.mode, reports, files)


def save_learner(path: str | Path, learner, sim_cfg: sim.SimConfig, seed: int) -> Path:
    meta = {"mode": learner.mode, "seed": seed, "obs_len": sim_cfg.obs_len, "n_agents": sim_cfg.n_agents,
            "dtype": learner.cfg.dtype}
    return save_checkpoint(path, learner.networks(), meta)


def load_learner(path: str | Path, sim_cfg: sim.SimConfig, cfg: TrainerConfig):
    """Rebuild a learner from a checkpoint, rejecting files whose shapes do not fit ``sim_cfg``."""
    with np.load(Path(path)) as data:
        if "__header__" not in data:
            raise ValueError(f"{path}: not a checkpoint")
    _, meta = load_checkpoint(path, dtype=np.dtype(cfg.dtype))
    mode = meta.get("mode")
    learner = make_learner(mode, sim_cfg, cfg, int(meta.get("seed", 0)))
    expect = {name: net.spec() for name, net in learner.networks().items()}
    nets, _ = load_checkpoint(path, expect=expect, dtype=np.dtype(cfg.dtype))
    for name, net in learner.networks().items():
        net.load_params(nets[name].params)
    return learner


@dataclass
class ComparisonRow:
    seed: int
    mode: str
    serviced_total: float
    mean_wait_min: float | None
    final_reward: float


def _summarise(rows: Sequence[ComparisonRow]) -> dict:
    waits = [r.mean_wait_min for r in rows if r.mean_wait_min is not None]
    return {
        "median_serviced": median(r.serviced_total for r in rows),
        "median_mean_wait_min": median(waits) if waits else None,
    }


def compare_table(proposed: Sequence[ComparisonRow], baseline: Sequence[ComparisonRow]) -> dict:
    """Per-method medians and relative deltas ``(proposed - baseline) / baseline``."""
    a, b = _summarise(proposed), _summarise(baseline)
    return {
        "proposed": a,
        "baseline": b,
        "delta": {
            "serviced": _rel(a["median_serviced"], b["median_serviced"]),
            "mean_wait_min": _rel(a["median_mean_wait_min"], b["median_mean_wait_min"]),
        },
    }


def _rel(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or b == 0:
        return None
    return (a - b) / b
