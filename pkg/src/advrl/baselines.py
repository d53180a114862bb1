"""Rule-based attack timing: uniform random attacks and the softmax-gap threshold rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LayerStack
from .qlearning import greedy_action

NONE = 0
ATTACK = 1


def _softmax(q):
    z = np.exp(q - np.max(q))
    return z / z.sum()


def attack_score(net: LayerStack, s: np.ndarray) -> float:
    """max - min of softmax(Q(s)); lies in [0, 1)."""
    return score_from_q(net(s))


def score_from_q(q: np.ndarray) -> float:
    p = _softmax(np.asarray(q, dtype=np.float64))
    return float(p.max() - p.min())


def policy_score(net: LayerStack, s: np.ndarray) -> float:
    # a softmax head over Q is read as the policy pi(s, .)
    return attack_score(net, s)


def variance_from_q(q: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    if q.size < 2:
        raise ValueError("need at least two actions")
    return float(np.sum((q - q.mean()) ** 2) / (q.size - 1))


def q_variance(net: LayerStack, s: np.ndarray) -> float:
    """Sample variance of the Q-vector (squared deviations, |A| - 1 denominator)."""
    return variance_from_q(net(s))


@dataclass(frozen=True)
class Uniform:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")

    def describe(self) -> str:
        return f"uniform(p={self.p:g})"


@dataclass(frozen=True)
class StrategicallyTimed:
    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    def describe(self) -> str:
        return f"strategic(th={self.threshold:g})"


@dataclass(frozen=True, eq=False)
class LearnedAttacker:
    net: LayerStack
    name: str = "learned"

    def describe(self) -> str:
        return self.name


TimingStrategy = Uniform | StrategicallyTimed | LearnedAttacker


def decide(strategy, net: LayerStack, s: np.ndarray, rng: np.random.Generator, q=None) -> int:
    """Return NONE or ATTACK for the clean frame ``s``.

    ``net`` is the victim; ``q`` may carry its already computed Q-vector for ``s``.
    Uniform draws once from ``rng`` per call regardless of ``p``.
    """
    if isinstance(strategy, Uniform):
        return ATTACK if rng.random() < strategy.p else NONE
    if isinstance(strategy, StrategicallyTimed):
        score = score_from_q(net(s) if q is None else q)
        return ATTACK if score > strategy.threshold else NONE
    if isinstance(strategy, LearnedAttacker):
        return greedy_action(strategy.net(s))
    raise TypeError(f"unknown strategy {strategy!r}")


UNIFORM_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
THRESHOLD_SWEEP = (0.2, 0.4, 0.6, 0.8)
