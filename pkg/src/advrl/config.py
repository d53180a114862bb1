"""Experiment configuration: JSON file -> env-var overrides -> flags, plus sub-seed derivation.

See docs/config_schema.md for the full key list. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .attacker import AttackerConfig
from .attacks import AttackSpec
from .qlearning import DqnConfig

ENV_PREFIX = "ADVRL_"


class ConfigError(ValueError):
    pass


def derive_seed(master_seed: int, tag: str) -> int:
    """First 8 bytes (big-endian) of sha256("<master_seed>/<tag>")."""
    digest = hashlib.sha256(f"{int(master_seed)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class EnvSection:
    name: str = "minipong"
    overrides: dict = field(default_factory=dict)


@dataclass
class StrategySection:
    # learned | uniform | strategic | sweep (learned plus both baseline sweeps)
    kind: str = "sweep"
    p: float = 0.5
    threshold: float = 0.5
    # uniform p set to the learned attacker's mean attack rate when true
    matched_budget: bool = False
    attacker_checkpoint: str = ""


@dataclass
class EvalSection:
    seeds: int = 5
    episodes: int = 1
    methods: list = field(default_factory=lambda: ["PGD"])
    distance_frames_per_seed: int = 100


@dataclass
class TransferSection:
    envs: list = field(default_factory=lambda: ["minipong", "gridchase"])
    # env name -> checkpoint path; empty means the default location under output_dir
    victim_checkpoints: dict = field(default_factory=dict)
    attacker_checkpoints: dict = field(default_factory=dict)
    # method -> attacker checkpoint for the method grid; empty skips it
    method_policies: dict = field(default_factory=dict)


@dataclass
class AdvTrainSection:
    finetune_fraction: float = 0.25
    attacker_checkpoint: str = ""


@dataclass
class ReportSection:
    # result/trace files to aggregate; empty means everything under output_dir
    inputs: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    victim: DqnConfig = field(default_factory=DqnConfig)
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    strategy: StrategySection = field(default_factory=StrategySection)
    eval: EvalSection = field(default_factory=EvalSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    advtrain: AdvTrainSection = field(default_factory=AdvTrainSection)
    report: ReportSection = field(default_factory=ReportSection)
    output_dir: str = "runs/default"
    master_seed: int = 0

    def validate(self) -> "ExperimentConfig":
        for name, section in (("victim", self.victim), ("attacker", self.attacker)):
            try:
                section.validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if self.strategy.kind not in ("learned", "uniform", "strategic", "sweep"):
            raise ConfigError(f"strategy.kind: unknown value {self.strategy.kind!r}")
        if self.eval.seeds < 1:
            raise ConfigError("eval.seeds must be at least 1")
        if self.eval.episodes != 1:
            raise ConfigError("eval.episodes: only one episode per seed is supported")
        if not self.eval.methods:
            raise ConfigError("eval.methods must not be empty")
        if not 0 <= self.advtrain.finetune_fraction <= 1:
            raise ConfigError("advtrain.finetune_fraction must lie in [0, 1]")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        return self

    def seed(self, tag: str) -> int:
        return derive_seed(self.master_seed, tag)

    def eval_seeds(self) -> list[int]:
        return [self.seed(f"eval-seed-{i}") for i in range(self.eval.seeds)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _from_dict(default, data: dict, path: str = ""):
    """Overlay ``data`` onto the dataclass instance ``default`` (nested sections recurse)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(path + u for u in unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_dict(current, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    if isinstance(default, AttackSpec) and "epsilon" in data and "pgd_step_size" not in data:
        kwargs["pgd_step_size"] = None  # re-derive from the new epsilon
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig(), data)


def _set_path(data: dict, keys: list[str], value) -> None:
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override below scalar key {k!r}")
    node[keys[-1]] = value


def env_overrides(environ=None) -> list[tuple[list[str], object]]:
    """``ADVRL_VICTIM__MAX_STEPS=1000`` -> (["victim", "max_steps"], 1000). Values parse as JSON when they can."""
    environ = os.environ if environ is None else environ
    out = []
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key[len(ENV_PREFIX):].lower().split("__"), value))
    return out


def load_config(path: str | None = None, environ=None, seed: int | None = None,
                output_dir: str | None = None) -> ExperimentConfig:
    """Resolve file, then ``ADVRL_*`` env vars, then explicit flag values."""
    data = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    for keys, value in env_overrides(environ):
        _set_path(data, keys, value)
    if seed is not None:
        data["master_seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    return from_dict(data).validate()
