"""Unit tests for the episode environment and the training loop."""
import os

import numpy as np
import pytest

from hammersim.config import ConfigError, load_config
from hammersim.federation import read_round_records
from hammersim.metrics import compute_rur
from hammersim.training import LOG_HEADER, AttackEnv, train
from hammersim.seeding import generator


def quick_config(rounds=15, iterations=3):
    exp = load_config(None)
    exp.override("run", "rounds_per_episode", rounds)
    exp.override("run", "iterations", iterations)
    exp.override("federation", "in_dim", 30)
    exp.override("federation", "hidden_dim", 12)
    exp.override("federation", "shard_size", 8)
    exp.override("adversary", "stft_frame", 16)
    exp.override("adversary", "stft_hop", 8)
    return exp


# -- environment ------------------------------------------------------------

def test_env_reset_restarts_federation():
    env = AttackEnv(quick_config(), seed=3)
    obs0 = env.reset()
    _, _, rec_a = env.step(np.zeros(env.latent_dim))
    obs1 = env.reset()
    _, _, rec_b = env.step(np.zeros(env.latent_dim))
    np.testing.assert_array_equal(obs0, obs1)
    np.testing.assert_array_equal(rec_a.indices, rec_b.indices)
    assert env.fed.round_number == 1


def test_env_observation_layout():
    env = AttackEnv(quick_config(), seed=3)
    obs = env.reset()
    assert obs.shape == (env.obs_dim,) == (env.in_dim + env.total_params,)
    np.testing.assert_array_equal(obs[: env.in_dim], env.x_summary)
    np.testing.assert_array_equal(obs[env.in_dim:], 0.0)


def test_env_step_reports_record_mask():
    env = AttackEnv(quick_config(), seed=4)
    env.reset()
    obs, breakdown, rec = env.step(np.zeros(env.latent_dim))
    mask = obs[env.in_dim:]
    np.testing.assert_array_equal(np.flatnonzero(mask), rec.indices)
    assert breakdown.total == pytest.approx(
        breakdown.stability + 0.8 * breakdown.focus - 0.6 * breakdown.stealth)


def test_env_action_clipped_to_epsilon():
    env = AttackEnv(quick_config(), seed=5)
    delta = env.action_to_delta(100.0 * np.ones(env.latent_dim))
    assert np.abs(delta).max() <= env.epsilon
    assert delta.shape == (env.in_dim,)


# -- training loop ----------------------------------------------------------

def test_train_writes_outputs(tmp_path):
    exp = quick_config()
    out = tmp_path / "run"
    res = train(exp, out_dir=str(out), seed=11, iterations=3)
    assert res.mode == "ppo"
    assert len(res.stats) == 3
    assert res.window is not None
    lines = (out / "training_log.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash={exp.hash_hex}"
    assert lines[1] == "# mode=ppo"
    assert lines[2] == LOG_HEADER
    assert len(lines) == 3 + 3
    assert os.path.exists(res.checkpoint_path)
    records, header = read_round_records(res.records_path)
    assert len(records) == 15
    # records carry global round numbers from the final iteration
    assert records[0].round_number == 2 * 15
    assert header["config_hash"] == exp.hash_hex


def test_train_random_baseline(tmp_path):
    res = train(quick_config(), baseline="random", out_dir=str(tmp_path / "b"),
                seed=11, iterations=3)
    assert res.mode == "random"
    assert res.agent is None
    assert not os.path.exists(os.path.join(str(tmp_path / "b"), "agent.ckpt"))
    with pytest.raises(ConfigError):
        train(quick_config(), baseline="zeros")


def test_train_is_deterministic(tmp_path):
    a = train(quick_config(), out_dir=str(tmp_path / "a"), seed=7, iterations=3)
    b = train(quick_config(), out_dir=str(tmp_path / "b"), seed=7, iterations=3)
    assert [s.csv_line() for s in a.stats] == [s.csv_line() for s in b.stats]
    assert (a.window.start, a.window.end) == (b.window.start, b.window.end)
    ra = (tmp_path / "a" / "training_log.csv").read_bytes()
    rb = (tmp_path / "b" / "training_log.csv").read_bytes()
    assert ra == rb


def test_train_seeds_differ():
    a = train(quick_config(), seed=7, iterations=2)
    b = train(quick_config(), seed=8, iterations=2)
    assert [s.mean_reward for s in a.stats] != [s.mean_reward for s in b.stats]


def test_train_stats_match_records():
    res = train(quick_config(), seed=13, iterations=2)
    rur = compute_rur([r.index_set() for r in res.records])
    assert res.stats[-1].rur == pytest.approx(rur)


def test_window_frozen_after_warmup():
    exp = quick_config()
    warmup = exp.get("adversary", "warmup_rounds")
    res = train(exp, seed=17, iterations=2)
    env = AttackEnv(exp, seed=17)
    assert res.window.length == -(-env.total_params // 50)
    # re-running with more iterations keeps the same frozen window
    res2 = train(exp, seed=17, iterations=3)
    assert (res.window.start, res.window.end) == (res2.window.start, res2.window.end)


def test_window_len_override():
    exp = quick_config()
    exp.override("adversary", "window_len", 37)
    res = train(exp, seed=19, iterations=2)
    assert res.window.length == 37


def test_result_slices():
    res = train(quick_config(), seed=23, iterations=4)
    rewards = [s.mean_reward for s in res.stats]
    assert res.mean_reward_slice(0.0, 0.25) == pytest.approx(rewards[0])
    assert res.mean_reward_slice(0.75, 1.0) == pytest.approx(rewards[3])
    assert res.final_fraction_rur(0.5) == pytest.approx(
        np.mean([s.rur for s in res.stats[2:]]))
