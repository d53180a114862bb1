"""Greedy evaluation rollouts, transfer grids, adversarial fine-tuning and distance reports."""

from __future__ import annotations

import copy
import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacker import (AttackStats, attack_rate, combined_reward, long_term_reward, mitm_step,
                       short_term_reward, success_rate)
from .attacks import METHODS, AttackSpec, craft, op_count
from .baselines import (ATTACK, NONE, THRESHOLD_SWEEP, UNIFORM_SWEEP, LearnedAttacker,
                        StrategicallyTimed, Uniform, decide)
from .envs import frame_hash
from .numerics import LayerStack
from .qlearning import DqnConfig, DqnLearner, Transition, greedy_action


class EvaluationError(RuntimeError):
    pass


@dataclass
class EpisodeReport:
    env_name: str
    strategy: str
    method: str
    seed: int
    episode_return: float
    r_s: float
    r_a: float
    r_str: float
    r_ltr: float
    r_X: float
    alpha: float
    n_steps: int
    n_attacks: int
    n_success: int
    attack_steps: list = field(default_factory=list)
    mean_l2_dist: float = 0.0
    mean_linf_dist: float = 0.0
    craft_op_count: int = 0

    def validate(self) -> "EpisodeReport":
        expected = self.alpha * self.r_str + (1 - self.alpha) * self.r_ltr
        if abs(self.r_X - expected) > 1e-9:
            raise EvaluationError(f"r_X {self.r_X} inconsistent with components ({expected})")
        if len(self.attack_steps) != self.n_attacks:
            raise EvaluationError("attack_steps length differs from the attack count")
        if not 0 <= self.n_success <= self.n_attacks <= self.n_steps:
            raise EvaluationError("counter ordering violated")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self.validate()), sort_keys=True)


def _check_compatible(env, net: LayerStack, what: str) -> None:
    if tuple(net.input_shape) != tuple(env.spec.frame_shape):
        raise EvaluationError(f"{what} expects frames {net.input_shape}, env {env.spec.name} "
                              f"renders {env.spec.frame_shape}")


def run_episode(env, victim: LayerStack, strategy, spec: AttackSpec, seed: int, alpha: float = 0.5,
                trace: list | None = None) -> EpisodeReport:
    """One greedy episode of ``victim`` on ``env`` with ``strategy`` deciding when to attack."""
    _check_compatible(env, victim, "victim")
    if isinstance(strategy, LearnedAttacker):
        _check_compatible(env, strategy.net, "attacker")
    rng = np.random.default_rng(seed)
    res = env.reset(seed)
    stats = AttackStats.for_env(env.spec)
    l2, linf, ops = [], [], 0
    while not res.done:
        frame = res.frame
        q = victim(frame)
        a_x = decide(strategy, victim, frame, rng, q=q)
        out = mitm_step(victim, a_x, env, spec, stats, clean_q=q)
        res = out.result
        if out.attack is not None:
            l2.append(out.attack.l2_dist)
            linf.append(out.attack.linf_dist)
            ops += out.attack.op_count
        if trace is not None:
            trace.append({
                "t": stats.n_steps - 1, "action": out.executed_action, "clean_action": out.clean_action,
                "reward": res.reward, "done": res.done, "frame_hash": frame_hash(out.delivered_frame),
                "attacked": a_x == ATTACK, "success": out.success,
                "l2": out.attack.l2_dist if out.attack else 0.0,
                "linf": out.attack.linf_dist if out.attack else 0.0,
            })
    stats.check()
    return EpisodeReport(
        env_name=env.spec.name, strategy=strategy.describe(), method=spec.method, seed=int(seed),
        episode_return=stats.reward_acc, r_s=success_rate(stats), r_a=attack_rate(stats),
        r_str=short_term_reward(stats), r_ltr=long_term_reward(stats),
        r_X=combined_reward(stats, alpha), alpha=alpha, n_steps=stats.n_steps,
        n_attacks=stats.n_attacks, n_success=stats.n_success, attack_steps=list(stats.attack_steps),
        mean_l2_dist=float(np.mean(l2)) if l2 else 0.0, mean_linf_dist=float(np.mean(linf)) if linf else 0.0,
        craft_op_count=ops,
    ).validate()


def _episode_job(args):
    return run_episode(*args)


def _traced_episode_job(args):
    trace = []
    return run_episode(*args, trace=trace), trace


def _run_seeds(job, env, victim, strategy, spec, seeds, alpha, jobs):
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise EvaluationError("at least one evaluation seed is required")
    args = [(env, victim, strategy, spec, s, alpha) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(job, args))
    return [job(a) for a in args]


def evaluate(env, victim: LayerStack, strategy, spec: AttackSpec, seeds, alpha: float = 0.5,
             jobs: int = 1) -> list[EpisodeReport]:
    """One greedy episode per seed; reports come back sorted by seed whatever ``jobs`` is."""
    reports = _run_seeds(_episode_job, env, victim, strategy, spec, seeds, alpha, jobs)
    return sorted(reports, key=lambda r: r.seed)


def evaluate_traced(env, victim: LayerStack, strategy, spec: AttackSpec, seeds, alpha: float = 0.5,
                    jobs: int = 1) -> list[tuple[EpisodeReport, list]]:
    """Like :func:`evaluate` but also returns each episode's per-step trace records."""
    out = _run_seeds(_traced_episode_job, env, victim, strategy, spec, seeds, alpha, jobs)
    return sorted(out, key=lambda pair: pair[0].seed)


def aggregate(reports, key: str = "r_X") -> dict:
    values = [getattr(r, key) for r in reports]
    return {
        "mean": float(np.mean(values)),
        "median": float(statistics.median(values)),
        "std": float(np.std(values)),
        "n": len(values),
    }


def sweep_baselines(env, victim, spec, seeds, alpha=0.5, uniform_ps=UNIFORM_SWEEP,
                    thresholds=THRESHOLD_SWEEP, jobs: int = 1) -> dict:
    """Evaluate every Uniform(p) and StrategicallyTimed(th); pick the best of each by median r_X."""
    out = {"uniform": {}, "strategic": {}}
    for p in uniform_ps:
        out["uniform"][p] = evaluate(env, victim, Uniform(p), spec, seeds, alpha, jobs)
    for th in thresholds:
        out["strategic"][th] = evaluate(env, victim, StrategicallyTimed(th), spec, seeds, alpha, jobs)
    for kind in ("uniform", "strategic"):
        best = max(out[kind], key=lambda k: (aggregate(out[kind][k])["median"], -k))
        out[f"best_{kind}"] = best
    return out


# ---------------------------------------------------------------------------
# Transfer grids
# ---------------------------------------------------------------------------


@dataclass
class TransferCell:
    from_context: str
    to_context: str
    r_X: float
    delta_vs_native: float


def transfer_env(attackers: dict, targets: dict, spec: AttackSpec, seeds, alpha: float = 0.5,
                 jobs: int = 1) -> list[TransferCell]:
    """Evaluate every attacker (trained on env ``from``) against every env ``to``.

    ``attackers`` maps env name -> attacker net; ``targets`` maps env name -> (env, victim).
    Cell value is the mean r_X over ``seeds``.
    """
    for name, net in attackers.items():
        for to, (env, _) in targets.items():
            _check_compatible(env, net, f"attacker from {name}")
    values = {}
    for frm, net in attackers.items():
        for to, (env, victim) in targets.items():
            reports = evaluate(env, victim, LearnedAttacker(net, f"learned[{frm}]"), spec, seeds, alpha, jobs)
            values[frm, to] = aggregate(reports)["mean"]
    return [TransferCell(frm, to, values[frm, to], values[frm, to] - values[to, to])
            for frm in attackers for to in targets if (to, to) in values]


def transfer_attack(policies: dict, env, victim: LayerStack, spec: AttackSpec, seeds, alpha: float = 0.5,
                    methods=METHODS, jobs: int = 1) -> list[TransferCell]:
    """Policy (trained with method m) x evaluation-time method grid on one env."""
    values = {}
    for pm, net in policies.items():
        for em in methods:
            reports = evaluate(env, victim, LearnedAttacker(net, f"learned[{pm}]"), spec.with_method(em),
                               seeds, alpha, jobs)
            values[pm, em] = aggregate(reports)["mean"]
    return [TransferCell(pm, em, values[pm, em], values[pm, em] - values.get((em, em), float("nan")))
            for pm in policies for em in methods]


# ---------------------------------------------------------------------------
# Adversarial fine-tuning
# ---------------------------------------------------------------------------


def clean_returns(env, net: LayerStack, seeds) -> list[float]:
    return [r.episode_return for r in evaluate(env, net, Uniform(0.0), AttackSpec(), seeds)]


def relative_degradation(clean: float, attacked: float) -> float:
    return (clean - attacked) / abs(clean) if clean else float("inf") if attacked < clean else 0.0


def finetune_under_attack(env, victim: LayerStack, attacker: LayerStack, config: DqnConfig, spec: AttackSpec,
                          steps: int, seed: int, optimizer=None):
    """Continue DQN training of a copy of ``victim`` while the frozen ``attacker`` perturbs its inputs.

    Perturbations are crafted against the network being fine-tuned. Stored transitions pair the
    delivered (possibly perturbed) frame with the clean next frame. ``optimizer`` (e.g. the state
    saved with the victim checkpoint) is copied and resumed; None starts a fresh one.
    """
    _check_compatible(env, victim, "victim")
    _check_compatible(env, attacker, "attacker")
    rng = np.random.default_rng(seed)
    cfg = replace(config, eps_start=config.eps_end, max_steps=max(steps, 1))
    learner = DqnLearner(env.spec.frame_shape, env.spec.action_count, cfg, rng, net=victim.copy())
    if optimizer is not None:
        learner.optimizer = copy.deepcopy(optimizer)
    while learner.steps < steps:
        res = env.reset(int(rng.integers(2**31)))
        while not res.done and learner.steps < steps:
            frame = res.frame
            obs = frame
            if greedy_action(attacker(frame)) == ATTACK:
                obs = craft(learner.net, frame, spec).adv_frame
            a = learner.act(obs)
            res = env.step(a)
            learner.observe(Transition(obs, a, res.reward, res.frame, res.terminal))
    return learner.net


def adversarial_train(env, victim: LayerStack, attacker: LayerStack, config: DqnConfig, spec: AttackSpec,
                      seed: int, eval_seeds, steps: int | None = None, alpha: float = 0.5, jobs: int = 1,
                      optimizer=None):
    """Fine-tune ``victim`` against the frozen PGD-trained ``attacker``; report before/after returns.

    ``steps`` defaults to a quarter of ``config.max_steps``. Returns ``(robust_net, report)`` where
    report rows follow the layout: clean T, clean T_R, then attacked returns per method for T and T_R.
    """
    if spec.method != "PGD":
        raise EvaluationError("adversarial training expects an attacker trained with PGD")
    steps = config.max_steps // 4 if steps is None else steps
    robust = finetune_under_attack(env, victim, attacker, config, spec, steps, seed, optimizer)
    strategy = LearnedAttacker(attacker)
    report = {"T": clean_returns(env, victim, eval_seeds), "T_R": clean_returns(env, robust, eval_seeds)}
    for method in METHODS:
        s = spec.with_method(method)
        report[f"T/attack({method})"] = [r.episode_return for r in evaluate(env, victim, strategy, s, eval_seeds, alpha, jobs)]
        report[f"T_R/attack({method})"] = [r.episode_return for r in evaluate(env, robust, strategy, s, eval_seeds, alpha, jobs)]
    return robust, report


def degradation_summary(report: dict, method: str = "PGD") -> dict:
    """Median per-seed relative degradation of T and T_R under ``method``."""
    t = [relative_degradation(c, a) for c, a in zip(report["T"], report[f"T/attack({method})"])]
    tr = [relative_degradation(c, a) for c, a in zip(report["T_R"], report[f"T_R/attack({method})"])]
    return {
        "clean_T": float(statistics.median(report["T"])),
        "clean_T_R": float(statistics.median(report["T_R"])),
        "degradation_T": float(statistics.median(t)),
        "degradation_T_R": float(statistics.median(tr)),
    }


# ---------------------------------------------------------------------------
# Perturbation distances
# ---------------------------------------------------------------------------


def rollout_frames(env, victim: LayerStack, seed: int, limit: int | None = None) -> list[np.ndarray]:
    res = env.reset(seed)
    frames = []
    while not res.done and (limit is None or len(frames) < limit):
        frames.append(res.frame)
        res = env.step(greedy_action(victim(res.frame)))
    return frames


def distance_report(env, victim: LayerStack, specs, seeds, frames_per_seed: int | None = None) -> dict:
    """Attack every frame of clean greedy rollouts with each spec.

    Per method: mean L2 / Linf over all attacked frames, success rate and op count per craft.
    ``common`` holds the same means restricted to frames on which every method succeeded.
    """
    specs = list(specs)
    per = {s.method: {"l2": [], "linf": [], "success": []} for s in specs}
    for seed in seeds:
        for frame in rollout_frames(env, victim, int(seed), frames_per_seed):
            clean_action = greedy_action(victim(frame))
            for s in specs:
                res = craft(victim, frame, s, clean_action=clean_action)
                per[s.method]["l2"].append(res.l2_dist)
                per[s.method]["linf"].append(res.linf_dist)
                per[s.method]["success"].append(res.success)
    all_ok = np.logical_and.reduce([np.array(per[s.method]["success"]) for s in specs])
    out = {"methods": {}, "n_frames": int(all_ok.size), "n_common": int(all_ok.sum())}
    for s in specs:
        d = per[s.method]
        l2, linf = np.array(d["l2"]), np.array(d["linf"])
        out["methods"][s.method] = {
            "mean_l2": float(l2.mean()) if l2.size else float("nan"),
            "mean_linf": float(linf.mean()) if linf.size else float("nan"),
            "success_rate": float(np.mean(d["success"])) if d["success"] else 0.0,
            "op_count": op_count(s),
            "common_mean_l2": float(l2[all_ok].mean()) if all_ok.any() else float("nan"),
            "common_mean_linf": float(linf[all_ok].mean()) if all_ok.any() else float("nan"),
        }
    return out


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def write_jsonl(path, reports) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write((r.to_json() if isinstance(r, EpisodeReport) else json.dumps(r, sort_keys=True)) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EvaluationError(f"{path}:{n}: malformed JSON ({exc.msg})") from None
    return out


def write_csv(path, rows, fieldnames=None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fieldnames})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def stats_from_trace(records, reward_upper: float, reward_lower: float) -> AttackStats:
    """Rebuild episode counters from per-step trace records."""
    stats = AttackStats(reward_upper, reward_lower)
    for rec in records:
        if rec.get("attacked"):
            stats.attack_steps.append(stats.n_steps)
            stats.n_attacks += 1
            stats.n_success += int(bool(rec.get("success")))
        stats.n_steps += 1
        stats.reward_acc += float(rec["reward"])
    stats.check()
    return stats


def metrics_row(stats: AttackStats, alpha: float = 0.5) -> dict:
    return {
        "rewards": stats.reward_acc,
        "r_s": success_rate(stats),
        "r_a": attack_rate(stats),
        "r_str": short_term_reward(stats),
        "r_ltr": long_term_reward(stats),
        "r": combined_reward(stats, alpha),
    }
