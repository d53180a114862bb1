"""Small deterministic pixel games and a tabular MDP with exact tables.

All environments share one interface::

    first = env.reset(seed)          # StepResult with the initial frame
    result = env.step(action)        # StepResult(frame, reward, done, truncated)
    frame = env.render_frame()

Frames are float32 arrays of ``env.spec.frame_shape`` = (H, W, C) with values in
[0, 1]. Pixel games draw on an integer grid with four intensity levels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 0.0
DIM = 0.33
MID = 0.66
BRIGHT = 1.0


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    action_count: int
    frame_shape: tuple
    reward_upper: float
    reward_lower: float
    max_steps: int = 200

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("action_count must be >= 2")
        if not self.reward_upper > self.reward_lower:
            raise ValueError("reward_upper must exceed reward_lower")


@dataclass
class StepResult:
    frame: np.ndarray
    reward: float = 0.0
    done: bool = False
    # true only when the step cap ended the episode; such steps are not terminal for bootstrapping
    truncated: bool = False
    info: dict = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.done and not self.truncated


def frame_hash(frame: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(frame, dtype=np.float32).tobytes()).hexdigest()[:16]


class Env:
    """Common bookkeeping: step counting, truncation and done-state checks."""

    spec: EnvSpec

    def __init__(self):
        self._active = False
        self.t = 0
        self.episode_return = 0.0

    def reset(self, seed: int) -> StepResult:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.episode_return = 0.0
        self._reset_state()
        self._active = True
        return StepResult(self.render_frame())

    def step(self, action: int) -> StepResult:
        if not self._active:
            raise EnvError("step() called on a finished episode; call reset() first")
        action = int(action)
        if not 0 <= action < self.spec.action_count:
            raise EnvError(f"action {action} out of range [0, {self.spec.action_count})")
        reward, terminated = self._advance(action)
        self.t += 1
        self.episode_return += reward
        truncated = not terminated and self.t >= self.spec.max_steps
        done = terminated or truncated
        frame = self.render_frame()
        if done:
            self._active = False
        return StepResult(frame, float(reward), done, truncated)

    @property
    def active(self) -> bool:
        return self._active

    def render_frame(self) -> np.ndarray:
        raise NotImplementedError

    def _reset_state(self) -> None:
        raise NotImplementedError

    def _advance(self, action: int) -> tuple[float, bool]:
        raise NotImplementedError


class MiniPong(Env):
    """Single-paddle rally on a 21x21 grid against a server at the top.

    The server launches the ball from the centre row toward the player's paddle
    on the bottom row; the ball drifts one column per step. Serve columns are drawn
    so the ball lands without touching a side wall. Returning the ball scores +1, missing it -1. First to ``points_to_win``
    ends the episode, so returns lie in [-21, 21].

    Actions: 0 stay, 1 left, 2 right. The paddle is three cells wide.
    Rendering: paddles MID, ball BRIGHT, the ball's previous cell DIM (so its
    direction is visible in a single frame).
    """

    SIZE = 21
    CENTER = 10

    def __init__(self, points_to_win: int = 21, max_steps: int = 500):
        super().__init__()
        self.points_to_win = points_to_win
        self.spec = EnvSpec("minipong", 3, (self.SIZE, self.SIZE, 1), float(points_to_win),
                            -float(points_to_win), max_steps)

    def _serve(self, col: int, vx: int) -> None:
        self.ball = [self.CENTER, col]
        self.vx = vx
        self.trail = (self.CENTER - 1, col - vx)
        self.paddle = self.CENTER
        self.server = col

    def _reset_state(self):
        self.score = [0, 0]
        # the only seeded bit of the initial state: horizontal direction of the first serve
        vx = 1 if self.rng.integers(2) else -1
        self._serve(self.CENTER, vx)

    def _advance(self, action):
        if action == 1:
            self.paddle = max(1, self.paddle - 1)
        elif action == 2:
            self.paddle = min(self.SIZE - 2, self.paddle + 1)
        by, bx = self.ball
        nx = bx + self.vx
        if nx < 0 or nx >= self.SIZE:
            self.vx = -self.vx
            nx = bx + self.vx
        ny = by + 1
        self.trail = (by, bx)
        self.ball = [ny, nx]
        if ny < self.SIZE - 1:
            return 0.0, False
        reward = 1.0 if abs(nx - self.paddle) <= 1 else -1.0
        self.score[0 if reward > 0 else 1] += 1
        terminated = max(self.score) >= self.points_to_win
        if not terminated:
            vx = 1 if self.rng.integers(2) else -1
            # serve columns keep the ball off the side walls until it lands
            lo, hi = (1, self.CENTER) if vx > 0 else (self.CENTER, self.SIZE - 2)
            self._serve(int(self.rng.integers(lo, hi + 1)), vx)
        return reward, terminated

    def landing_column(self) -> int:
        """Column where the ball reaches the paddle row, following wall bounces."""
        by, bx = self.ball
        vx = self.vx
        for _ in range(self.SIZE - 1 - by):
            nx = bx + vx
            if nx < 0 or nx >= self.SIZE:
                vx = -vx
                nx = bx + vx
            bx = nx
        return bx

    def entity_cells(self) -> set:
        cells = {(0, c) for c in range(self.server - 1, self.server + 2)}
        cells |= {(self.SIZE - 1, c) for c in range(self.paddle - 1, self.paddle + 2)}
        cells.add(tuple(self.ball))
        if 0 <= self.trail[1] < self.SIZE:
            cells.add(tuple(self.trail))
        return cells

    def render_frame(self):
        f = np.zeros((self.SIZE, self.SIZE, 1), dtype=np.float32)
        ty, tx = self.trail
        if 0 <= tx < self.SIZE:
            f[ty, tx, 0] = DIM
        f[0, self.server - 1:self.server + 2, 0] = MID
        f[self.SIZE - 1, self.paddle - 1:self.paddle + 2, 0] = MID
        by, bx = self.ball
        if by < self.SIZE:
            f[by, bx, 0] = BRIGHT
        return f


def scripted_pong_action(env: MiniPong) -> int:
    """Perfect play: walk the paddle toward the landing column."""
    target = min(max(env.landing_column(), 1), env.SIZE - 2)
    if target < env.paddle:
        return 1
    if target > env.paddle:
        return 2
    return 0


class GridChase(Env):
    """Collector vs. pursuer on a 21x21 grid.

    The collector (BRIGHT) picks up coins (DIM), +1 each; after 20 coins the episode
    ends. Each coin appears within ``coin_radius`` cells (Chebyshev) of the collector. A pursuer (MID) steps toward the collector on every other tick; being caught
    ends the episode. Returns lie in [0, 20].

    Actions: 0 stay, 1 up, 2 down, 3 left, 4 right.
    """

    SIZE = 21
    MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, coins_to_win: int = 20, max_steps: int = 200, coin_radius: int = 4):
        super().__init__()
        if coin_radius < 1:
            raise EnvError("coin_radius must be at least 1")
        self.coins_to_win = coins_to_win
        self.coin_radius = coin_radius
        self.spec = EnvSpec("gridchase", 5, (self.SIZE, self.SIZE, 1), float(coins_to_win), 0.0, max_steps)

    def _free_cell(self):
        r = self.coin_radius
        lo_y, hi_y = max(0, self.agent[0] - r), min(self.SIZE - 1, self.agent[0] + r)
        lo_x, hi_x = max(0, self.agent[1] - r), min(self.SIZE - 1, self.agent[1] + r)
        while True:
            cell = (int(self.rng.integers(lo_y, hi_y + 1)), int(self.rng.integers(lo_x, hi_x + 1)))
            if cell != self.agent and cell != self.pursuer:
                return cell

    def _reset_state(self):
        self.agent = (self.SIZE // 2, self.SIZE // 2)
        self.pursuer = (0, 0)
        self.coins = 0
        self.coin = self._free_cell()

    def _advance(self, action):
        dy, dx = self.MOVES[action]
        ay = min(max(self.agent[0] + dy, 0), self.SIZE - 1)
        ax = min(max(self.agent[1] + dx, 0), self.SIZE - 1)
        self.agent = (ay, ax)
        reward = 0.0
        if self.agent == self.coin:
            reward = 1.0
            self.coins += 1
            if self.coins >= self.coins_to_win:
                return reward, True
            self.coin = self._free_cell()
        if self.agent == self.pursuer:
            return reward, True
        if self.t % 2 == 1:
            py, px = self.pursuer
            ddy, ddx = ay - py, ax - px
            if abs(ddy) >= abs(ddx):
                py += int(np.sign(ddy))
            else:
                px += int(np.sign(ddx))
            self.pursuer = (py, px)
            if self.pursuer == self.agent:
                return reward, True
        return reward, False

    def entity_cells(self) -> set:
        return {self.agent, self.pursuer, self.coin}

    def render_frame(self):
        f = np.zeros((self.SIZE, self.SIZE, 1), dtype=np.float32)
        f[self.coin + (0,)] = DIM
        f[self.pursuer + (0,)] = MID
        f[self.agent + (0,)] = BRIGHT
        return f


class TabularMDP(Env):
    """Finite MDP with explicit tables, observed as a one-hot row frame.

    ``transitions[s, a, s']`` are probabilities, ``rewards[s, a]`` expected rewards.
    States listed in ``terminal`` end the episode on entry. Episodes start in a
    state drawn uniformly from the non-terminal states.
    """

    def __init__(self, transitions, rewards, terminal=(), max_steps: int = 50, name: str = "tabular"):
        super().__init__()
        self.transitions = np.asarray(transitions, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        n, m, n2 = self.transitions.shape
        if n != n2 or self.rewards.shape != (n, m):
            raise ValueError("inconsistent table shapes")
        if not np.allclose(self.transitions.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to 1")
        self.terminal = frozenset(int(s) for s in terminal)
        self.n_states, self.n_actions = n, m
        hi = max(0.0, float(self.rewards.max())) * max_steps
        lo = min(0.0, float(self.rewards.min())) * max_steps
        if hi == lo:
            hi = lo + 1.0
        self.spec = EnvSpec(name, m, (1, n, 1), hi, lo, max_steps)

    @classmethod
    def random_deterministic(cls, n_states: int, n_actions: int, seed: int, max_steps: int = 50):
        """Seeded MDP with deterministic transitions, rewards in [0, 1) and one absorbing goal."""
        rng = np.random.default_rng(seed)
        P = np.zeros((n_states, n_actions, n_states))
        nxt = rng.integers(0, n_states, size=(n_states, n_actions))
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
        R = rng.random((n_states, n_actions))
        return cls(P, R, terminal=(n_states - 1,), max_steps=max_steps)

    def _reset_state(self):
        starts = [s for s in range(self.n_states) if s not in self.terminal]
        self.state = int(starts[self.rng.integers(len(starts))])

    def _advance(self, action):
        probs = self.transitions[self.state, action]
        reward = float(self.rewards[self.state, action])
        if np.count_nonzero(probs) == 1:
            self.state = int(np.argmax(probs))
        else:
            self.state = int(self.rng.choice(self.n_states, p=probs))
        return reward, self.state in self.terminal

    def render_frame(self):
        f = np.zeros(self.spec.frame_shape, dtype=np.float32)
        f[0, self.state, 0] = 1.0
        return f

    def one_hot(self, s: int) -> np.ndarray:
        f = np.zeros(self.spec.frame_shape, dtype=np.float32)
        f[0, s, 0] = 1.0
        return f


def value_iteration(mdp: TabularMDP, gamma: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Exact Q* for ``mdp`` (terminal states have value 0). Returns ``(Q, V, policy)``."""
    P, R = mdp.transitions, mdp.rewards
    alive = np.ones(mdp.n_states)
    alive[list(mdp.terminal)] = 0.0
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = R + gamma * P @ (alive * V)
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = R + gamma * P @ (alive * V)
    return Q, Q.max(axis=1), Q.argmax(axis=1)


class FrameStack:
    """Concatenate the last ``depth`` frames along the channel axis."""

    def __init__(self, env: Env, depth: int):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.env = env
        self.depth = depth
        h, w, c = env.spec.frame_shape
        s = env.spec
        self.spec = EnvSpec(s.name, s.action_count, (h, w, c * depth), s.reward_upper, s.reward_lower, s.max_steps)
        self._frames: list = []

    def _stacked(self):
        return np.concatenate(self._frames, axis=2)

    def reset(self, seed):
        first = self.env.reset(seed)
        self._frames = [first.frame] * self.depth
        return StepResult(self._stacked())

    def step(self, action):
        res = self.env.step(action)
        self._frames = self._frames[1:] + [res.frame]
        return StepResult(self._stacked(), res.reward, res.done, res.truncated)

    def render_frame(self):
        return self._stacked()

    @property
    def active(self):
        return self.env.active

    @property
    def episode_return(self):
        return self.env.episode_return

    @property
    def t(self):
        return self.env.t


ENV_REGISTRY = {
    "minipong": MiniPong,
    "gridchase": GridChase,
}


def make_env(name: str, frame_stack: int = 1, **overrides):
    if name != "tabular" and name not in ENV_REGISTRY:
        raise EnvError(f"unknown environment {name!r}")
    try:
        if name == "tabular":
            overrides = dict(overrides)
            env = TabularMDP.random_deterministic(
                overrides.pop("n_states", 12), overrides.pop("n_actions", 3), overrides.pop("mdp_seed", 0),
                **overrides
            )
        else:
            env = ENV_REGISTRY[name](**overrides)
    except TypeError as exc:
        raise EnvError(f"bad overrides for {name}: {exc}") from None
    if frame_stack != 1:
        env = FrameStack(env, frame_stack)
    return env


def trace_record(t: int, action: int, result: StepResult, **extra) -> str:
    rec = {"t": t, "action": int(action), "reward": result.reward, "done": result.done,
           "frame_hash": frame_hash(result.frame)}
    rec.update(extra)
    return json.dumps(rec, sort_keys=True)
