import numpy as np
import pytest
from hypothesis import given, strategies as st

from advrl.attacker import (AttackerConfig, AttackStats, attack_rate, combined_reward, long_term_from_return,
                            metrics_from_rates, mitm_step, mix, short_term_reward, success_rate, train_attacker)
from advrl.attacks import AttackSpec
from advrl.baselines import ATTACK, NONE, LearnedAttacker
from advrl.envs import MiniPong, TabularMDP
from advrl.evaluation import evaluate
from advrl.numerics import Dense, LayerStack, desk_layers
from advrl.qlearning import DqnConfig

REFERENCE_ROWS = [
    # (r_s, r_a, reward) -> (r_str, r_ltr, r) at two decimals
    ((1.00, 0.56, -9.38), (0.44, 0.72, 0.58)),
    ((1.00, 0.15, -8.69), (0.85, 0.71, 0.78)),
    ((0.98, 0.04, -11.44), (0.94, 0.77, 0.86)),
]


@pytest.mark.parametrize("inputs,expected", REFERENCE_ROWS)
def test_reference_metric_rows(inputs, expected):
    m = metrics_from_rates(*inputs, upper=21, lower=-21, alpha=0.5)
    for got, want in zip((m["r_str"], m["r_ltr"], m["r_X"]), expected):
        assert abs(got - want) <= 0.005


def test_mix_example():
    assert mix(0.94, 0.77, 0.5) == pytest.approx(0.855)
    with pytest.raises(ValueError):
        mix(0.5, 0.5, 1.2)


def test_rates_without_attacks():
    stats = AttackStats(21, -21)
    assert success_rate(stats) == 0.0 and attack_rate(stats) == 0.0
    stats.n_steps = 10
    assert short_term_reward(stats) == 0.0


def test_long_term_clamped():
    assert long_term_from_return(30, 21, -21) == 0.0
    assert long_term_from_return(-30, 21, -21) == 1.0
    assert long_term_from_return(0, 21, -21) == 0.5
    with pytest.raises(ValueError):
        long_term_from_return(0, 1, 1)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(1, 200), st.floats(-21, 21), st.floats(0, 1))
def test_reward_ranges(n_a, n_s, n_t, ret, alpha):
    n_s = min(n_s, n_t)
    n_a = min(n_a, n_s)
    stats = AttackStats(21, -21, n_a, n_s, n_t, ret, list(range(n_s)))
    stats.check()
    assert -1.0 <= short_term_reward(stats) <= 1.0
    assert -1.0 <= combined_reward(stats, alpha) <= 1.0


def test_mitm_none_executes_clean_action():
    env = MiniPong()
    env.reset(0)
    victim = LayerStack.build((21, 21, 1), desk_layers(3), np.random.default_rng(0))
    stats = AttackStats.for_env(env.spec)
    out = mitm_step(victim, NONE, env, AttackSpec(), stats)
    assert out.attack is None and out.executed_action == out.clean_action
    assert (stats.n_attacks, stats.n_steps) == (0, 1)


def test_mitm_attack_executes_perturbed_action():
    env = MiniPong()
    env.reset(0)
    victim = LayerStack.build((21, 21, 1), desk_layers(3), np.random.default_rng(0))
    stats = AttackStats.for_env(env.spec)
    clean_frame = env.render_frame()
    out = mitm_step(victim, ATTACK, env, AttackSpec(), stats)
    assert out.executed_action == out.attack.adv_action
    assert out.success == (out.attack.adv_action != out.clean_action)
    assert np.abs(out.delivered_frame - clean_frame).max() <= 0.1 + 1e-6
    assert stats.attack_steps == [0] and stats.n_success == int(out.success)
    with pytest.raises(ValueError):
        mitm_step(victim, 2, env, AttackSpec(), stats)


def test_unattackable_victim_teaches_attacker_to_abstain():
    # a constant-output victim can never be flipped, so every attack only raises r_a
    env = TabularMDP.random_deterministic(6, 2, 0)
    victim = LayerStack((1, 6, 1), [Dense(2)], params={"0.weight": np.zeros((6, 2)), "0.bias": np.ones(2)})
    cfg = AttackerConfig(dqn=DqnConfig(max_steps=4000, learn_start_steps=200, learning_rate=1e-3,
                                       eps_fraction=0.3, gamma=0.9, network="mlp", hidden=[32]))
    net, curve = train_attacker(env, victim, cfg, seed=0)
    assert all(row["r_s"] == 0.0 for row in curve)
    reports = evaluate(env, victim, LearnedAttacker(net), cfg.attack, range(10))
    assert all(r.r_a == 0.0 for r in reports)


def test_attacker_training_is_deterministic():
    env = MiniPong(points_to_win=2)
    victim = LayerStack.build((21, 21, 1), desk_layers(3), np.random.default_rng(1))
    cfg = AttackerConfig(dqn=DqnConfig(max_steps=300, learn_start_steps=100))
    a, ca = train_attacker(env, victim, cfg, seed=5)
    b, cb = train_attacker(env, victim, cfg, seed=5)
    assert a.fingerprint() == b.fingerprint()
    assert [r["r_X"] for r in ca] == [r["r_X"] for r in cb]
