"""Learned attack timing.

A DQN attacker sits between the environment and a frozen victim. Each step it
sees the clean frame and picks None or Attack; on Attack the frame is perturbed
before the victim acts. Its reward mixes a short-term term (success rate minus
attack rate) with a long-term term (normalized drop of the victim's return).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackResult, AttackSpec, craft
from .baselines import ATTACK, NONE
from .envs import EnvSpec, StepResult
from .numerics import LayerStack
from .qlearning import DqnConfig, DqnLearner, Transition, greedy_action


@dataclass
class AttackStats:
    """Running per-episode counters."""

    reward_upper: float
    reward_lower: float
    n_success: int = 0   # N_a
    n_attacks: int = 0   # N_s
    n_steps: int = 0     # N_t
    reward_acc: float = 0.0
    attack_steps: list = field(default_factory=list)

    @classmethod
    def for_env(cls, spec: EnvSpec) -> "AttackStats":
        return cls(spec.reward_upper, spec.reward_lower)

    def check(self) -> None:
        assert 0 <= self.n_success <= self.n_attacks <= self.n_steps
        assert len(self.attack_steps) == self.n_attacks


def success_rate(stats: AttackStats) -> float:
    # no attacks yet counts as zero success, not undefined
    return stats.n_success / stats.n_attacks if stats.n_attacks else 0.0


def attack_rate(stats: AttackStats) -> float:
    return stats.n_attacks / stats.n_steps if stats.n_steps else 0.0


def short_term_reward(stats: AttackStats) -> float:
    return success_rate(stats) - attack_rate(stats)


def long_term_from_return(episode_reward: float, upper: float, lower: float) -> float:
    if not upper > lower:
        raise ValueError("reward_upper must exceed reward_lower")
    return min(1.0, max(0.0, (upper - episode_reward) / (upper - lower)))


def long_term_reward(stats: AttackStats) -> float:
    return long_term_from_return(stats.reward_acc, stats.reward_upper, stats.reward_lower)


def mix(r_str: float, r_ltr: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * r_str + (1.0 - alpha) * r_ltr


def combined_reward(stats: AttackStats, alpha: float) -> float:
    return mix(short_term_reward(stats), long_term_reward(stats), alpha)


def metrics_from_rates(r_s: float, r_a: float, episode_reward: float, upper: float, lower: float,
                       alpha: float = 0.5) -> dict:
    """The derived metrics for given success rate, attack rate and episode reward."""
    r_str = r_s - r_a
    r_ltr = long_term_from_return(episode_reward, upper, lower)
    return {"r_s": r_s, "r_a": r_a, "r_str": r_str, "r_ltr": r_ltr, "r_X": mix(r_str, r_ltr, alpha)}


@dataclass
class MitmOutcome:
    executed_action: int
    result: StepResult
    success: bool
    delivered_frame: np.ndarray
    clean_action: int
    attack: AttackResult | None = None


def mitm_step(victim: LayerStack, attacker_action: int, env, spec: AttackSpec, stats: AttackStats,
              clean_q: np.ndarray | None = None) -> MitmOutcome:
    """Advance ``env`` by one victim step with the attacker in the middle.

    On NONE the victim acts on the clean frame. On ATTACK the frame is perturbed
    with ``spec``; the victim acts greedily on the perturbed frame and the env
    executes that action. ``stats`` is updated in place.
    """
    frame = env.render_frame()
    q = victim(frame) if clean_q is None else clean_q
    clean_action = greedy_action(q)
    attack = None
    success = False
    delivered = frame
    executed = clean_action
    if attacker_action == ATTACK:
        attack = craft(victim, frame, spec, clean_action=clean_action)
        delivered = attack.adv_frame
        executed = attack.adv_action
        success = attack.success
        stats.attack_steps.append(stats.n_steps)
        stats.n_attacks += 1
        stats.n_success += int(success)
    elif attacker_action != NONE:
        raise ValueError(f"attacker action must be NONE or ATTACK, got {attacker_action}")
    result = env.step(executed)
    stats.n_steps += 1
    stats.reward_acc += result.reward
    return MitmOutcome(executed, result, success, delivered, clean_action, attack)


@dataclass
class AttackerConfig:
    alpha: float = 0.5
    # shorter horizon and faster steps than the victim; the running-metric reward is noisy
    dqn: DqnConfig = field(
        default_factory=lambda: DqnConfig(max_steps=100_000, gamma=0.9, learning_rate=2.5e-4)
    )
    attack: AttackSpec = field(default_factory=AttackSpec)
    victim_checkpoint: str = ""

    def validate(self) -> "AttackerConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.dqn.validate()
        self.attack.validate()
        return self


def train_attacker(env, victim: LayerStack, config: AttackerConfig, seed: int, progress=None):
    """Train the timing policy against a frozen victim. Returns ``(attacker_net, curve)``.

    ``curve`` rows: episode, return (victim), r_s, r_a, r_str, r_ltr, r_X, epsilon, loss_mean.
    """
    learner, curve = run_attacker_training(env, victim, config, seed, progress)
    return learner.net, curve


def run_attacker_training(env, victim: LayerStack, config: AttackerConfig, seed: int, progress=None):
    """Like :func:`train_attacker` but returns the whole learner."""
    config.validate()
    rng = np.random.default_rng(seed)
    learner = DqnLearner(env.spec.frame_shape, 2, config.dqn, rng)
    curve = []
    episode = 0
    while learner.steps < config.dqn.max_steps:
        res = env.reset(int(rng.integers(2**31)))
        stats = AttackStats.for_env(env.spec)
        while not res.done and learner.steps < config.dqn.max_steps:
            s = res.frame
            a_x = learner.act(s)
            out = mitm_step(victim, a_x, env, config.attack, stats)
            res = out.result
            r_x = combined_reward(stats, config.alpha)
            learner.observe(Transition(s, a_x, r_x, res.frame, res.terminal))
        row = {"episode": episode, "return": stats.reward_acc, "r_s": success_rate(stats),
               "r_a": attack_rate(stats), "r_str": short_term_reward(stats),
               "r_ltr": long_term_reward(stats), "r_X": combined_reward(stats, config.alpha),
               "epsilon": learner.epsilon, "loss_mean": learner.pop_losses()}
        curve.append(row)
        if progress is not None:
            progress(row)
        episode += 1
    return learner, curve
