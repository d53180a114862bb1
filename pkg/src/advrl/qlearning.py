"""Vanilla DQN: replay memory, epsilon-greedy exploration, TD targets, target sync.

The same :class:`DqnLearner` drives both the victim agent and the attacker; only the
source of transitions differs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import LayerStack, NumericsError, desk_layers, atari_layers, make_optimizer, mlp_layers

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DqnConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    buffer_capacity: int = 20_000
    gamma: float = 0.99
    update_every: int = 4
    target_sync_every: int = 100
    learn_start_steps: int = 500
    max_steps: int = 200_000
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_fraction: float = 0.1
    optimizer: str = "adam"
    network: str = "desk"
    hidden: list = field(default_factory=lambda: [64])
    frame_stack: int = 1
    eval_episodes: int = 20

    def validate(self) -> "DqnConfig":
        positive = ("learning_rate", "batch_size", "buffer_capacity", "update_every",
                    "target_sync_every", "max_steps", "frame_stack", "eval_episodes")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size exceeds buffer_capacity")
        if self.learn_start_steps < 0:
            raise ValueError("learn_start_steps must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return self

    def layers(self, n_actions: int):
        if self.network == "desk":
            return desk_layers(n_actions)
        if self.network == "atari":
            return atari_layers(n_actions)
        if self.network == "mlp":
            return mlp_layers(self.hidden, n_actions)
        raise ValueError(f"unknown network {self.network!r}")

    def schedule(self) -> "EpsilonSchedule":
        return EpsilonSchedule(self.eps_start, self.eps_end, self.eps_fraction, self.max_steps)


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.01
    fraction: float = 0.1
    total_steps: int = 1

    def value(self, t: int) -> float:
        horizon = self.fraction * self.total_steps
        if horizon <= 0 or t >= horizon:
            return self.end
        return self.start + (self.end - self.start) * (t / horizon)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored in preallocated arrays."""

    def __init__(self, capacity: int, frame_shape):
        self.capacity = int(capacity)
        self.frame_shape = tuple(frame_shape)
        self.s = np.zeros((self.capacity,) + self.frame_shape, dtype=np.float32)
        self.s_next = np.zeros_like(self.s)
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity, dtype=np.float64)
        self.done = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self.next_index = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        if np.shape(tr.s) != self.frame_shape or np.shape(tr.s_next) != self.frame_shape:
            raise ValueError(f"transition frames must have shape {self.frame_shape}")
        i = self.next_index
        self.s[i] = tr.s
        self.s_next[i] = tr.s_next
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.done[i] = tr.done
        self.next_index = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def indices_oldest_first(self) -> np.ndarray:
        start = self.next_index if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self.size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]


def greedy_action(q: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest-index tie-break
    return int(np.argmax(q))


def select_action(net: LayerStack, s: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; one uniform draw decides explore vs. exploit."""
    if rng.random() < epsilon:
        return int(rng.integers(net.n_outputs))
    return greedy_action(net(s))


def td_targets(target_net: LayerStack, batch, gamma: float) -> np.ndarray:
    _, _, r, s_next, done = batch
    q_next = target_net(s_next)
    return r + gamma * np.where(done, 0.0, q_next.max(axis=1))


def dqn_update(net: LayerStack, target_net: LayerStack, buffer: ReplayBuffer, config: DqnConfig,
               optimizer, rng: np.random.Generator) -> float:
    """One gradient step on the mean squared TD error of a sampled minibatch."""
    if len(buffer) < config.batch_size:
        raise ValueError(f"buffer underfull: {len(buffer)} < {config.batch_size}")
    batch = buffer.sample(config.batch_size, rng)
    s, a, _, _, _ = batch
    y = td_targets(target_net, batch, config.gamma)
    q, tape = net.forward(s)
    rows = np.arange(len(a))
    err = q[rows, a] - y
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite TD loss ({loss})")
    grad_q = np.zeros_like(q)
    grad_q[rows, a] = 2.0 * err / len(a)
    grads = net.backward_params(tape, grad_q)
    try:
        optimizer.step(net.params, grads, config.learning_rate)
    except NumericsError as exc:
        raise TrainingDiverged(str(exc)) from exc
    return loss


def sync_target(net: LayerStack, target_net: LayerStack) -> None:
    target_net.load_params_from(net)


def build_network(frame_shape, n_actions: int, config: DqnConfig, rng: np.random.Generator) -> LayerStack:
    return LayerStack.build(frame_shape, config.layers(n_actions), rng)


class DqnLearner:
    """Online net, target net, optimizer and replay memory advanced one env step at a time."""

    def __init__(self, frame_shape, n_actions: int, config: DqnConfig, rng: np.random.Generator, net=None):
        self.config = config.validate()
        self.rng = rng
        self.net = net if net is not None else build_network(frame_shape, n_actions, config, rng)
        self.target = self.net.copy()
        self.optimizer = make_optimizer(config.optimizer)
        self.buffer = ReplayBuffer(config.buffer_capacity, frame_shape)
        self.schedule = config.schedule()
        self.steps = 0
        self.losses: list[float] = []

    @property
    def epsilon(self) -> float:
        return self.schedule.value(self.steps)

    def act(self, s: np.ndarray) -> int:
        return select_action(self.net, s, self.epsilon, self.rng)

    def observe(self, tr: Transition) -> None:
        cfg = self.config
        self.buffer.add(tr)
        self.steps += 1
        if (self.steps > cfg.learn_start_steps and len(self.buffer) >= cfg.batch_size
                and self.steps % cfg.update_every == 0):
            self.losses.append(dqn_update(self.net, self.target, self.buffer, cfg, self.optimizer, self.rng))
        if self.steps % cfg.target_sync_every == 0:
            sync_target(self.net, self.target)

    def pop_losses(self) -> float:
        mean = float(np.mean(self.losses)) if self.losses else float("nan")
        self.losses = []
        return mean


def greedy_return(env, net: LayerStack, seed: int) -> float:
    res = env.reset(seed)
    total = 0.0
    while not res.done:
        res = env.step(greedy_action(net(res.frame)))
        total += res.reward
    return total


def train_victim(env, config: DqnConfig, seed: int, progress=None):
    """Train a DQN agent on ``env``. Returns ``(net, curve)``.

    ``curve`` holds one dict per episode: episode, return, epsilon, loss_mean.
    Everything is derived from ``seed``; repeated calls give identical results.
    """
    learner, curve = run_victim_training(env, config, seed, progress)
    return learner.net, curve


def run_victim_training(env, config: DqnConfig, seed: int, progress=None):
    """Like :func:`train_victim` but returns the whole learner (net, optimizer state)."""
    rng = np.random.default_rng(seed)
    learner = DqnLearner(env.spec.frame_shape, env.spec.action_count, config, rng)
    curve = []
    episode = 0
    while learner.steps < config.max_steps:
        res = env.reset(int(rng.integers(2**31)))
        ep_return = 0.0
        while not res.done and learner.steps < config.max_steps:
            s = res.frame
            a = learner.act(s)
            res = env.step(a)
            ep_return += res.reward
            learner.observe(Transition(s, a, res.reward, res.frame, res.terminal))
        curve.append({"episode": episode, "return": ep_return, "epsilon": learner.epsilon,
                      "loss_mean": learner.pop_losses()})
        if progress is not None:
            progress(curve[-1])
        episode += 1
    return learner, curve
