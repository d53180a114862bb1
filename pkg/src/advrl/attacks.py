"""White-box observation perturbations against a frozen Q-network: FGSM, PGD, C&W (L2).

The victim's label is its own clean greedy action; every attack tries to move the
greedy action away from it. All arithmetic runs in float64 and the returned frame is
cast back to float32 inside the [0, 1] pixel box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Adam, LayerStack
from .qlearning import greedy_action

METHODS = ("FGSM", "PGD", "CW")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackSpec:
    method: str = "PGD"
    epsilon: float = 0.1
    pgd_steps: int = 10
    pgd_step_size: float | None = None  # defaults to epsilon / 4
    cw_constant: float = 1.0
    cw_confidence: float = 0.0
    cw_iters: int = 50
    cw_lr: float = 0.01
    clip_min: float = 0.0
    clip_max: float = 1.0
    atanh_delta: float = 1e-6

    def __post_init__(self):
        self.method = self.method.upper()
        if self.pgd_step_size is None:
            self.pgd_step_size = self.epsilon / 4

    def validate(self) -> "AttackSpec":
        if self.method not in METHODS:
            raise AttackError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0 or self.pgd_step_size < 0:
            raise AttackError("epsilon and pgd_step_size must be non-negative")
        if self.pgd_steps < 1 or self.cw_iters < 1:
            raise AttackError("pgd_steps and cw_iters must be >= 1")
        if self.cw_constant < 0 or self.cw_confidence < 0:
            raise AttackError("cw_constant and cw_confidence must be non-negative")
        return self

    def with_method(self, method: str) -> "AttackSpec":
        d = dict(self.__dict__)
        d["method"] = method
        return AttackSpec(**d)


@dataclass
class AttackResult:
    adv_frame: np.ndarray
    linf_dist: float
    l2_dist: float
    success: bool
    iterations_used: int
    op_count: int
    clean_action: int
    adv_action: int


def _softmax(q: np.ndarray) -> np.ndarray:
    z = np.exp(q - q.max())
    return z / z.sum()


def attack_loss(net: LayerStack, frame: np.ndarray, label_action: int):
    """Cross-entropy of softmax(Q(frame)) against ``label_action`` and its input gradient."""
    q, tape = net.forward(np.asarray(frame, dtype=np.float64))
    p = _softmax(q)
    m = q.max()
    loss = float(m + np.log(np.exp(q - m).sum()) - q[label_action])
    dq = p.copy()
    dq[label_action] -= 1.0
    return loss, net.backward_input(tape, dq)


def _finish(net, clean, adv, clean_action, iterations, spec) -> AttackResult:
    adv32 = np.clip(adv, spec.clip_min, spec.clip_max).astype(np.float32)
    if not np.all(np.isfinite(adv32)):
        raise AttackError("non-finite adversarial frame")
    diff = adv32.astype(np.float64) - np.asarray(clean, dtype=np.float64)
    adv_action = greedy_action(net(adv32))
    return AttackResult(
        adv_frame=adv32,
        linf_dist=float(np.abs(diff).max()) if diff.size else 0.0,
        l2_dist=float(np.sqrt(np.sum(diff * diff))),
        success=adv_action != clean_action,
        iterations_used=iterations,
        op_count=2 * iterations,
        clean_action=clean_action,
        adv_action=adv_action,
    )


def _label(net, frame, clean_action):
    return greedy_action(net(frame)) if clean_action is None else int(clean_action)


def fgsm(net: LayerStack, frame: np.ndarray, spec: AttackSpec, clean_action: int | None = None) -> AttackResult:
    label = _label(net, frame, clean_action)
    x = np.asarray(frame, dtype=np.float64)
    _, g = attack_loss(net, x, label)
    adv = np.clip(x + spec.epsilon * np.sign(g), spec.clip_min, spec.clip_max)
    return _finish(net, frame, adv, label, 1, spec)


def pgd_iterates(net: LayerStack, frame: np.ndarray, spec: AttackSpec, label: int):
    """Yield each PGD iterate (already projected and clamped), starting from the clean frame."""
    x = np.asarray(frame, dtype=np.float64)
    lo = x - spec.epsilon
    hi = x + spec.epsilon
    adv = x.copy()
    for _ in range(spec.pgd_steps):
        _, g = attack_loss(net, adv, label)
        adv = np.clip(adv + spec.pgd_step_size * np.sign(g), lo, hi)
        adv = np.clip(adv, spec.clip_min, spec.clip_max)
        yield adv


def pgd(net: LayerStack, frame: np.ndarray, spec: AttackSpec, clean_action: int | None = None) -> AttackResult:
    label = _label(net, frame, clean_action)
    adv = np.asarray(frame, dtype=np.float64)
    for adv in pgd_iterates(net, frame, spec, label):
        pass
    return _finish(net, frame, adv, label, spec.pgd_steps, spec)


def cw(net: LayerStack, frame: np.ndarray, spec: AttackSpec, clean_action: int | None = None) -> AttackResult:
    """Untargeted C&W with a fixed constant and tanh box reparameterization.

    Minimizes ``||x' - x||_2 + c * max(Z_t - max_{i != t} Z_i, -k)`` over ``w`` where
    ``x' = (tanh(w) + 1) / 2``, ``Z = softmax(Q(x'))`` and ``t`` is the clean action.
    Returns the closest iterate that changed the greedy action, else the last iterate.
    """
    label = _label(net, frame, clean_action)
    x = np.asarray(frame, dtype=np.float64)
    span = spec.clip_max - spec.clip_min
    unit = (np.clip(x, spec.clip_min, spec.clip_max) - spec.clip_min) / span
    w = {"w": np.arctanh(2.0 * np.clip(unit, spec.atanh_delta, 1.0 - spec.atanh_delta) - 1.0)}
    opt = Adam()
    best, best_dist = None, np.inf
    cand = x
    for _ in range(spec.cw_iters):
        tanh_w = np.tanh(w["w"])
        cand = spec.clip_min + span * 0.5 * (tanh_w + 1.0)
        d = cand - x
        dist = float(np.sqrt(np.sum(d * d)))
        q, tape = net.forward(cand)
        if greedy_action(q) != label and dist < best_dist:
            best, best_dist = cand.copy(), dist
        z = _softmax(q)
        others = z.copy()
        others[label] = -np.inf
        j = int(np.argmax(others))
        dz = np.zeros_like(z)
        if z[label] - z[j] > -spec.cw_confidence:
            dz[label] = spec.cw_constant
            dz[j] = -spec.cw_constant
        dq = z * (dz - np.dot(dz, z))
        g_cand = net.backward_input(tape, dq)
        if dist > 0:
            g_cand = g_cand + d / dist
        grad_w = g_cand * span * 0.5 * (1.0 - tanh_w ** 2)
        opt.step(w, {"w": grad_w}, spec.cw_lr)
        if not np.all(np.isfinite(w["w"])):
            raise AttackError("C&W diverged: non-finite w")
    adv = best if best is not None else cand
    return _finish(net, frame, adv, label, spec.cw_iters, spec)


_DISPATCH = {"FGSM": fgsm, "PGD": pgd, "CW": cw}


def craft(net: LayerStack, frame: np.ndarray, spec: AttackSpec, clean_action: int | None = None) -> AttackResult:
    try:
        fn = _DISPATCH[spec.method.upper()]
    except KeyError:
        raise AttackError(f"unknown attack method {spec.method!r}") from None
    return fn(net, frame, spec, clean_action)


def op_count(spec: AttackSpec) -> int:
    """Forward+backward passes per craft call."""
    iters = {"FGSM": 1, "PGD": spec.pgd_steps, "CW": spec.cw_iters}[spec.method.upper()]
    return 2 * iters
