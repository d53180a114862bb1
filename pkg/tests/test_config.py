import hashlib
import json

import pytest

from advrl.config import ConfigError, ExperimentConfig, derive_seed, env_overrides, from_dict, load_config


def test_derive_seed_is_sha256_prefix():
    want = int(hashlib.sha256(b"7/victim-train").hexdigest()[:16], 16)
    assert derive_seed(7, "victim-train") == want
    assert derive_seed(7, "victim-train") != derive_seed(8, "victim-train")
    assert derive_seed(0, "eval-seed-0") != derive_seed(0, "eval-seed-1")


def test_defaults_resolve_and_round_trip(tmp_path):
    cfg = load_config()
    assert cfg.victim.max_steps > 0 and cfg.attacker.dqn.max_steps > 0
    assert cfg.attacker.attack.method == "PGD" and cfg.attacker.attack.pgd_step_size == 0.025
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    assert load_config(str(path)).dumps() == cfg.dumps()


def test_partial_file_keeps_nested_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"attacker": {"dqn": {"gamma": 0.5}}}))
    cfg = load_config(str(path))
    assert cfg.attacker.dqn.gamma == 0.5
    assert cfg.attacker.dqn.max_steps == ExperimentConfig().attacker.dqn.max_steps


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="victim.learning_rat"):
        from_dict({"victim": {"learning_rat": 1e-3}})
    with pytest.raises(ConfigError):
        from_dict({"bogus": 1})


def test_env_vars_override_file_and_flags_override_env(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"victim": {"max_steps": 10}, "master_seed": 1}))
    environ = {"ADVRL_VICTIM__MAX_STEPS": "20", "ADVRL_MASTER_SEED": "2", "HOME": "/x"}
    cfg = load_config(str(path), environ=environ)
    assert cfg.victim.max_steps == 20 and cfg.master_seed == 2
    cfg = load_config(str(path), environ=environ, seed=3)
    assert cfg.master_seed == 3
    assert env_overrides({"ADVRL_ENV__NAME": "gridchase"}) == [(["env", "name"], "gridchase")]


def test_epsilon_override_rederives_step_size():
    cfg = from_dict({"attacker": {"attack": {"epsilon": 0.2}}})
    assert cfg.attacker.attack.pgd_step_size == pytest.approx(0.05)
    cfg = from_dict({"attacker": {"attack": {"epsilon": 0.2, "pgd_step_size": 0.01}}})
    assert cfg.attacker.attack.pgd_step_size == 0.01


def test_invalid_values_fail(tmp_path):
    with pytest.raises(ConfigError, match="seeds"):
        load_config(environ={"ADVRL_EVAL__SEEDS": "0"})
    with pytest.raises(ConfigError, match="strategy.kind"):
        load_config(environ={"ADVRL_STRATEGY__KIND": "sometimes"})
    with pytest.raises(ValueError):
        load_config(environ={"ADVRL_VICTIM__GAMMA": "2.0"})


def test_missing_and_malformed_files(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match=str(missing)):
        load_config(str(missing))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(bad))


def test_eval_seeds_are_derived():
    cfg = from_dict({"eval": {"seeds": 3}, "master_seed": 4})
    assert cfg.eval_seeds() == [derive_seed(4, f"eval-seed-{i}") for i in range(3)]
