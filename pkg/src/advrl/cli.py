"""Command-line front end.

    advrl train-victim   --config cfg.json
    advrl train-attacker --config cfg.json
    advrl evaluate       --config cfg.json
    advrl transfer       --config cfg.json
    advrl advtrain       --config cfg.json
    advrl report         --config cfg.json

Every command writes ``resolved_config.json`` plus its outputs under ``output_dir``
(checkpoints/, traces/, reports/).
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import statistics
import sys

import numpy as np

from . import evaluation as ev
from .attacker import run_attacker_training
from .attacks import METHODS, AttackError, op_count
from .baselines import LearnedAttacker, StrategicallyTimed, Uniform
from .config import ConfigError, ExperimentConfig, load_config
from .envs import EnvError, make_env
from .numerics import NumericsError, load_checkpoint, save_checkpoint
from .qlearning import greedy_return, run_victim_training

log = logging.getLogger("advrl")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Paths and I/O helpers
# ---------------------------------------------------------------------------


def out_path(cfg: ExperimentConfig, kind: str, name: str = "") -> str:
    d = os.path.join(cfg.output_dir, kind) if kind else cfg.output_dir
    os.makedirs(d, exist_ok=True)
    return os.path.join(d, name) if name else d


def victim_ckpt_path(cfg, env_name: str) -> str:
    return os.path.join(cfg.output_dir, "checkpoints", f"victim_{env_name}.ckpt")


def attacker_ckpt_path(cfg, env_name: str, method: str) -> str:
    return os.path.join(cfg.output_dir, "checkpoints", f"attacker_{env_name}_{method}.ckpt")


def write_resolved(cfg: ExperimentConfig) -> None:
    with open(out_path(cfg, "", "resolved_config.json"), "w") as f:
        f.write(cfg.dumps())


def load_net(path: str):
    if not path or not os.path.isfile(path):
        raise CliError(f"checkpoint not found: {path}")
    net, _, _, _ = load_checkpoint(path)
    return net


def build_env(cfg: ExperimentConfig, name: str | None = None):
    name = name or cfg.env.name
    overrides = cfg.env.overrides if name == cfg.env.name else {}
    return make_env(name, frame_stack=cfg.victim.frame_stack, **overrides)


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _progress(label, every=25):
    def cb(row):
        if row["episode"] % every == 0:
            log.info("%s episode %d return %.2f eps %.3f", label, row["episode"], row["return"], row["epsilon"])
    return cb


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_victim(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    env = build_env(cfg)
    seed = cfg.seed("victim-train")
    learner, curve = run_victim_training(env, cfg.victim, seed, _progress(f"victim[{env.spec.name}]"))
    path = out_path(cfg, "checkpoints", f"victim_{env.spec.name}.ckpt")
    save_checkpoint(path, learner.net, learner.optimizer, seed, {"kind": "victim", "env": env.spec.name})
    ev.write_csv(out_path(cfg, "reports", f"victim_curve_{env.spec.name}.csv"), curve)
    seeds = [cfg.seed(f"victim-eval-{i}") for i in range(cfg.victim.eval_episodes)]
    returns = [greedy_return(env, learner.net, s) for s in seeds]
    summary = {"env": env.spec.name, "eval_seeds": seeds, "returns": returns,
               "mean_return": float(np.mean(returns)), "median_return": float(statistics.median(returns))}
    write_json(out_path(cfg, "reports", f"victim_eval_{env.spec.name}.json"), summary)
    return summary


def cmd_train_attacker(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    env = build_env(cfg)
    victim = load_net(cfg.attacker.victim_checkpoint or victim_ckpt_path(cfg, env.spec.name))
    method = cfg.attacker.attack.method
    seed = cfg.seed("attacker-train")
    learner, curve = run_attacker_training(env, victim, cfg.attacker, seed,
                                           _progress(f"attacker[{env.spec.name},{method}]"))
    path = out_path(cfg, "checkpoints", f"attacker_{env.spec.name}_{method}.ckpt")
    save_checkpoint(path, learner.net, learner.optimizer, seed,
                    {"kind": "attacker", "env": env.spec.name, "method": method, "alpha": cfg.attacker.alpha})
    ev.write_csv(out_path(cfg, "reports", f"attacker_curve_{env.spec.name}_{method}.csv"), curve)
    return {"checkpoint": path, "episodes": len(curve)}


def _strategies(cfg, env_name: str, method: str, victim, env, jobs):
    """Timing strategies selected by ``strategy.kind``."""
    s = cfg.strategy
    out = []
    learned = None
    if s.kind in ("learned", "sweep") or s.matched_budget:
        path = s.attacker_checkpoint or attacker_ckpt_path(cfg, env_name, method)
        learned = LearnedAttacker(load_net(path), f"learned[{method}]")
    if s.kind in ("learned", "sweep"):
        out.append(learned)
    if s.kind == "uniform":
        p = s.p
        if s.matched_budget:
            reports = ev.evaluate(env, victim, learned, cfg.attacker.attack.with_method(method),
                                  cfg.eval_seeds(), cfg.attacker.alpha, jobs)
            p = round(float(np.mean([r.r_a for r in reports])), 6)
            log.info("matched-budget uniform p=%g", p)
        out.append(Uniform(p))
    if s.kind == "strategic":
        out.append(StrategicallyTimed(s.threshold))
    if s.kind == "sweep":
        out += [Uniform(p) for p in ev.UNIFORM_SWEEP]
        out += [StrategicallyTimed(t) for t in ev.THRESHOLD_SWEEP]
    return out


def cmd_evaluate(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    env = build_env(cfg)
    name = env.spec.name
    victim = load_net(cfg.attacker.victim_checkpoint or victim_ckpt_path(cfg, name))
    seeds = cfg.eval_seeds()
    alpha = cfg.attacker.alpha
    all_reports = []
    for method in cfg.eval.methods:
        spec = cfg.attacker.attack.with_method(method).validate()
        for strategy in _strategies(cfg, name, method, victim, env, jobs):
            for rep, trace in ev.evaluate_traced(env, victim, strategy, spec, seeds, alpha, jobs):
                all_reports.append(rep)
                tname = f"{name}__{strategy.describe()}__{method}__{rep.seed}.jsonl"
                ev.write_jsonl(out_path(cfg, "traces", tname), [dict(r, env=name) for r in trace])
    all_reports.sort(key=lambda r: (r.method, r.strategy, r.seed))
    ev.write_jsonl(out_path(cfg, "reports", f"eval_{name}.jsonl"), all_reports)
    table = summary_rows(all_reports)
    ev.write_csv(out_path(cfg, "reports", f"strategy_summary_{name}.csv"), table)
    result = {"strategy_summary": table}
    if cfg.eval.distance_frames_per_seed > 0:
        specs = [cfg.attacker.attack.with_method(m) for m in METHODS]
        dist = ev.distance_report(env, victim, specs, seeds, cfg.eval.distance_frames_per_seed)
        write_json(out_path(cfg, "reports", f"distances_{name}.json"), dist)
        result["distances"] = dist
    return result


def summary_rows(reports) -> list[dict]:
    groups = {}
    for r in reports:
        groups.setdefault((r.env_name, r.method, r.strategy), []).append(r)
    rows = []
    for (env_name, method, strategy), reps in sorted(groups.items()):
        rx = ev.aggregate(reps)
        rows.append({
            "env": env_name, "method": method, "strategy": strategy, "n_seeds": rx["n"],
            "r_X_mean": rx["mean"], "r_X_median": rx["median"],
            "r_str_mean": ev.aggregate(reps, "r_str")["mean"], "r_ltr_mean": ev.aggregate(reps, "r_ltr")["mean"],
            "r_s_mean": ev.aggregate(reps, "r_s")["mean"], "r_a_mean": ev.aggregate(reps, "r_a")["mean"],
            "return_mean": ev.aggregate(reps, "episode_return")["mean"],
        })
    return rows


def cmd_transfer(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    spec = cfg.attacker.attack.validate()
    seeds = cfg.eval_seeds()
    targets, attackers = {}, {}
    for name in cfg.transfer.envs:
        env = build_env(cfg, name)
        victim = load_net(cfg.transfer.victim_checkpoints.get(name) or victim_ckpt_path(cfg, name))
        targets[name] = (env, victim)
        attackers[name] = load_net(cfg.transfer.attacker_checkpoints.get(name)
                                   or attacker_ckpt_path(cfg, name, spec.method))
    cells = ev.transfer_env(attackers, targets, spec, seeds, cfg.attacker.alpha, jobs)
    rows = [vars(c) for c in cells]
    ev.write_csv(out_path(cfg, "reports", "transfer_env.csv"), rows)
    result = {"transfer_env": rows}
    if cfg.transfer.method_policies:
        env, victim = targets.get(cfg.env.name) or (build_env(cfg), load_net(victim_ckpt_path(cfg, cfg.env.name)))
        policies = {m.upper(): load_net(p) for m, p in sorted(cfg.transfer.method_policies.items())}
        cells = ev.transfer_attack(policies, env, victim, spec, seeds, cfg.attacker.alpha, jobs=jobs)
        rows = [vars(c) for c in cells]
        ev.write_csv(out_path(cfg, "reports", "transfer_attack.csv"), rows)
        result["transfer_attack"] = rows
    return result


def cmd_advtrain(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    env = build_env(cfg)
    name = env.spec.name
    victim_path = cfg.attacker.victim_checkpoint or victim_ckpt_path(cfg, name)
    victim = load_net(victim_path)
    _, optimizer, _, _ = load_checkpoint(victim_path)
    attacker = load_net(cfg.advtrain.attacker_checkpoint or attacker_ckpt_path(cfg, name, "PGD"))
    steps = int(round(cfg.advtrain.finetune_fraction * cfg.victim.max_steps))
    seed = cfg.seed("advtrain")
    robust, report = ev.adversarial_train(env, victim, attacker, cfg.victim,
                                          cfg.attacker.attack.with_method("PGD"), seed,
                                          cfg.eval_seeds(), steps, cfg.attacker.alpha, jobs, optimizer)
    save_checkpoint(out_path(cfg, "checkpoints", f"robust_{name}.ckpt"), robust, None, seed,
                    {"kind": "robust-victim", "env": name, "finetune_steps": steps})
    rows = [{"policy": k, "median_return": float(statistics.median(v)), "mean_return": float(np.mean(v)),
             "returns": json.dumps(v)} for k, v in report.items()]
    ev.write_csv(out_path(cfg, "reports", f"robustness_{name}.csv"), rows)
    summary = ev.degradation_summary(report)
    summary["finetune_steps"] = steps
    write_json(out_path(cfg, "reports", f"robustness_{name}.json"), {"returns": report, "summary": summary})
    return summary


def _classify(path):
    records = ev.read_jsonl(path)
    if not records:
        return None, records
    if "r_X" in records[0]:
        return "reports", records
    if "t" in records[0]:
        return "trace", records
    return None, records


def cmd_report(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Aggregate traces and episode reports found in ``report.inputs`` (or under output_dir)."""
    inputs = list(cfg.report.inputs)
    if not inputs:
        inputs = sorted(glob.glob(os.path.join(cfg.output_dir, "traces", "*.jsonl"))
                        + glob.glob(os.path.join(cfg.output_dir, "reports", "eval_*.jsonl")))
    for p in inputs:
        if not os.path.isfile(p):
            raise CliError(f"report input not found: {p}")
    metric_rows, reports = [], []
    for p in sorted(inputs):
        kind, records = _classify(p)
        if kind == "trace":
            env_name = records[0].get("env", cfg.env.name)
            spec = make_env(env_name).spec
            stats = ev.stats_from_trace(records, spec.reward_upper, spec.reward_lower)
            row = {"source": os.path.basename(p)}
            row.update(ev.metrics_row(stats, cfg.attacker.alpha))
            metric_rows.append(row)
        elif kind == "reports":
            reports += [ev.EpisodeReport(**r).validate() for r in records]
    result = {}
    if metric_rows:
        ev.write_csv(out_path(cfg, "reports", "episode_metrics.csv"), metric_rows)
        result["episode_metrics"] = metric_rows
    if reports:
        rows = summary_rows(reports)
        ev.write_csv(out_path(cfg, "reports", "strategy_summary.csv"), rows)
        scatter = [{"env": r["env"], "method": r["method"], "strategy": r["strategy"],
                    "r_str": r["r_str_mean"], "r_ltr": r["r_ltr_mean"], "r_X": r["r_X_mean"]} for r in rows]
        ev.write_csv(out_path(cfg, "reports", "reward_scatter.csv"), scatter)
        result["strategy_summary"] = rows
    for extra in ("transfer_env", "transfer_attack"):
        if os.path.isfile(os.path.join(cfg.output_dir, "reports", f"{extra}.csv")):
            result[extra] = os.path.join(cfg.output_dir, "reports", f"{extra}.csv")
    result["op_counts"] = {m: op_count(cfg.attacker.attack.with_method(m)) for m in METHODS}
    write_json(out_path(cfg, "reports", "op_counts.json"), result["op_counts"])
    return result


COMMANDS = {
    "train-victim": cmd_train_victim,
    "train-attacker": cmd_train_attacker,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "advtrain": cmd_advtrain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advrl", description="Attack-timing experiments on small pixel games.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="overrides master_seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation rollouts")
        p.add_argument("--output", help="overrides output_dir")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output)
        write_resolved(cfg)
        result = COMMANDS[args.command](cfg, args.jobs)
    except (ConfigError, CliError, EnvError, AttackError, NumericsError, ev.EvaluationError) as exc:
        print(f"advrl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str)[:2000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
