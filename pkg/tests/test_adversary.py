"""Unit tests for reward shaping, the policy network and PPO updates."""
import numpy as np
import pytest

from hammersim.adversary import (
    AgentState,
    PolicyConfig,
    RewardConfig,
    TargetWindow,
    Trajectory,
    WEIGHT_KEYS,
    build_observation,
    compute_emd,
    compute_gae,
    compute_reward,
    gaussian_log_prob,
    init_policy,
    load_checkpoint,
    perceptibility_audio,
    perceptibility_image,
    policy_forward,
    ppo_loss,
    ppo_loss_and_grads,
    ppo_update,
    sample_action,
    save_checkpoint,
    select_target_window,
    target_focus,
)
from hammersim.channel import stft
from hammersim.seeding import generator

import oracles


# -- earth mover's distance -------------------------------------------------

def test_emd_identical_sets():
    assert compute_emd([3, 7, 9], [3, 7, 9], 100) == 0.0


def test_emd_singleton_shift():
    # point masses half the space apart
    assert compute_emd([0], [50], 100) == pytest.approx(0.5)


def test_emd_matches_grid_reference():
    rng = generator(13, "emd-test")
    for _ in range(15):
        na, nb = rng.integers(1, 7, size=2)
        a = rng.choice(60, size=na, replace=False).tolist()
        b = rng.choice(60, size=nb, replace=False).tolist()
        assert compute_emd(a, b, 60) == pytest.approx(
            oracles.emd_reference(a, b, 60), abs=1e-9)


def test_emd_validation():
    with pytest.raises(ValueError):
        compute_emd([], [1], 10)
    with pytest.raises(ValueError):
        compute_emd([1], [10], 10)


# -- target window ----------------------------------------------------------

def test_target_window_basics():
    w = TargetWindow(10, 20)
    assert w.length == 10
    assert target_focus([9, 10, 19, 20], w) == 0.5
    assert target_focus([], w) == 0.0
    with pytest.raises(ValueError):
        TargetWindow(5, 5)


def test_select_target_window_finds_densest():
    sets = [[50, 51, 52, 90]] * 10
    w = select_target_window(sets, 100, 5)
    # starts 48, 49, 50 all cover the cluster; ties go to the lowest
    assert w.start == 48
    assert sum(1 for i in (50, 51, 52) if w.start <= i < w.end) == 3


def test_select_target_window_tie_breaks_low():
    # two equally dense clusters: the earlier start must win
    sets = [[10, 11, 70, 71]] * 10
    w = select_target_window(sets, 100, 2)
    assert w.start == 10


def test_select_target_window_validation():
    with pytest.raises(ValueError):
        select_target_window([[1]] * 3, 100, 5, warmup_rounds=10)
    with pytest.raises(ValueError):
        select_target_window([[1]] * 10, 100, 0)


# -- perceptibility and reward ----------------------------------------------

def test_perceptibility_audio_zero_delta():
    x = generator(1, "perc").standard_normal(512)
    assert perceptibility_audio(np.zeros(512), x, 0.5, 0.5) == 0.0


def test_perceptibility_audio_terms():
    rng = generator(2, "perc-terms")
    x = rng.standard_normal(512)
    d = 0.05 * rng.standard_normal(512)
    rms = float(np.sqrt(np.mean(d**2)))
    spec = float(np.sqrt(np.sum(np.abs(stft(x + d, 64, 32) - stft(x, 64, 32)) ** 2)))
    got = perceptibility_audio(d, x, 0.3, 0.7, frame_len=64, hop=32)
    assert got == pytest.approx(0.3 * spec + 0.7 * rms, rel=1e-12)
    # lambda1 = 0 skips the spectral term entirely
    assert perceptibility_audio(d, x, 0.0, 0.7, 64, 32) == pytest.approx(0.7 * rms)


def test_perceptibility_image_energy():
    d = np.full((4, 4), 0.5)
    assert perceptibility_image(d, 0.8) == pytest.approx(0.8 * 16 * 0.25)


def test_compute_reward_composition():
    cfg = RewardConfig(alpha=1.0, beta=0.8, gamma=0.6, lambda1=0.0, lambda2=1.0,
                       stft_frame=32, stft_hop=16)
    x = np.zeros(64)
    d = np.full(64, 0.2)
    window = TargetWindow(0, 50)
    br = compute_reward([1, 2], [1, 2, 60], window, d, x, cfg, "audio", 100)
    assert br.stability == pytest.approx(1.0 - compute_emd([1, 2], [1, 2, 60], 100))
    assert br.focus == pytest.approx(2 / 3)
    assert br.stealth == pytest.approx(0.2)
    assert br.total == pytest.approx(br.stability + 0.8 * br.focus - 0.6 * br.stealth)


def test_compute_reward_warmup_defaults():
    cfg = RewardConfig(lambda1=0.0, stft_frame=32, stft_hop=16)
    br = compute_reward(None, [1, 2], None, np.zeros(64), np.zeros(64), cfg, "audio", 100)
    assert br.stability == 0.0 and br.focus == 0.0


# -- policy network ---------------------------------------------------------

def agent_for_test(obs_dim=6, action_dim=3, **kw):
    cfg = PolicyConfig(obs_dim=obs_dim, action_dim=action_dim, hidden1=8, hidden2=8, **kw)
    return init_policy(cfg, seed=42)


def test_policy_forward_shapes_and_init():
    state = agent_for_test()
    obs = np.zeros(6)
    mean, log_std, value = policy_forward(obs, state)
    assert mean.shape == (3,) and log_std.shape == (3,)
    # zero observation passes through zero biases: log-std bias dominates
    np.testing.assert_allclose(log_std, state.cfg.log_std_init, atol=1e-12)
    assert isinstance(value, float)


def test_gaussian_log_prob_matches_scipy():
    from scipy import stats
    rng = generator(3, "glp")
    a = rng.standard_normal((5, 4))
    m = rng.standard_normal((5, 4))
    ls = rng.normal(-0.5, 0.3, size=(5, 4))
    want = stats.norm.logpdf(a, loc=m, scale=np.exp(ls)).sum(axis=1)
    np.testing.assert_allclose(gaussian_log_prob(a, m, ls), want, atol=1e-10)


def test_sample_action_is_seeded_and_consistent():
    state = agent_for_test()
    obs = generator(4, "obs").standard_normal(6)
    a1, logp1, v1 = sample_action(state, obs, generator(7, "act"))
    a2, logp2, v2 = sample_action(state, obs, generator(7, "act"))
    np.testing.assert_array_equal(a1, a2)
    assert logp1 == logp2 and v1 == v2
    mean, log_std, _ = policy_forward(obs, state)
    want = gaussian_log_prob(a1[None, :], mean[None, :], log_std[None, :])[0]
    assert logp1 == pytest.approx(float(want), rel=1e-12)


# -- GAE --------------------------------------------------------------------

def test_gae_single_step():
    adv, ret = compute_gae(np.array([2.0]), np.array([0.5]), 0.9, 0.8)
    assert adv[0] == pytest.approx(2.0 - 0.5)
    assert ret[0] == pytest.approx(2.0)


def test_gae_matches_direct_recursion():
    rng = generator(5, "gae")
    r = rng.standard_normal(12)
    v = rng.standard_normal(12)
    gamma, lam = 0.7, 0.6
    adv, ret = compute_gae(r, v, gamma, lam)
    # direct double loop over the definition
    deltas = [r[t] + (gamma * v[t + 1] if t + 1 < 12 else 0.0) - v[t] for t in range(12)]
    for t in range(12):
        want = sum((gamma * lam) ** (j - t) * deltas[j] for j in range(t, 12))
        assert adv[t] == pytest.approx(want, abs=1e-10)
    np.testing.assert_allclose(ret, adv + v, atol=1e-12)


def test_gae_zero_rewards_zero_values():
    adv, ret = compute_gae(np.zeros(5), np.zeros(5), 0.99, 0.95)
    np.testing.assert_array_equal(adv, np.zeros(5))
    np.testing.assert_array_equal(ret, np.zeros(5))


# -- PPO loss and gradients -------------------------------------------------

def loss_inputs(state, batch=6, seed=17):
    rng = generator(seed, "loss-inputs")
    cfg = state.cfg
    obs = rng.standard_normal((batch, cfg.obs_dim))
    mean, log_std, _, _ = __import__("hammersim.adversary", fromlist=["_forward"])._forward(state.weights, obs)
    actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    old_logp = gaussian_log_prob(actions, mean, log_std) + 0.1 * rng.standard_normal(batch)
    adv = rng.standard_normal(batch)
    returns = rng.standard_normal(batch)
    return obs, actions, old_logp, adv, returns


def test_loss_and_grads_agree_on_loss():
    state = agent_for_test(entropy_coef=0.01, value_coef=0.5)
    args = loss_inputs(state)
    plain = ppo_loss(state.weights, state.cfg, *args)
    fused, _ = ppo_loss_and_grads(state.weights, state.cfg, *args)
    assert fused == pytest.approx(plain, rel=1e-12)


def test_gradients_match_finite_differences():
    state = agent_for_test(entropy_coef=0.01, value_coef=0.5)
    args = loss_inputs(state)
    _, grads = ppo_loss_and_grads(state.weights, state.cfg, *args)
    rng = generator(23, "fd-coords")
    eps = 1e-6
    for key in WEIGHT_KEYS:
        flat = state.weights[key].ravel()
        n_checks = min(4, flat.size)
        for i in rng.choice(flat.size, size=n_checks, replace=False):
            w_up = {k: v.copy() for k, v in state.weights.items()}
            w_dn = {k: v.copy() for k, v in state.weights.items()}
            w_up[key].ravel()[i] += eps
            w_dn[key].ravel()[i] -= eps
            fd = (ppo_loss(w_up, state.cfg, *args) - ppo_loss(w_dn, state.cfg, *args)) / (2 * eps)
            got = grads[key].ravel()[i]
            assert got == pytest.approx(fd, rel=1e-4, abs=1e-7), f"{key}[{i}]"


def test_ppo_update_zero_advantage_is_noop():
    state = agent_for_test(entropy_coef=0.0, value_coef=0.0)
    rng = generator(29, "noop")
    t_len = 8
    obs = rng.standard_normal((t_len, 6))
    actions = rng.standard_normal((t_len, 3))
    logp = np.zeros(t_len)
    traj = Trajectory(obs, actions, logp, np.zeros(t_len), np.zeros(t_len))
    new_state, _ = ppo_update(traj, state, update_seed=1)
    for key in WEIGHT_KEYS:
        np.testing.assert_array_equal(new_state.weights[key], state.weights[key])


def test_ppo_update_improves_surrogate_direction():
    # positive advantage on one action: its log-prob must go up
    state = agent_for_test(entropy_coef=0.0, value_coef=0.0, learning_rate=0.01)
    obs = np.zeros((4, 6))
    mean, log_std, _ = policy_forward(obs[0], state)
    actions = np.tile(mean + 0.3, (4, 1))
    old_logp = gaussian_log_prob(actions, np.tile(mean, (4, 1)), np.tile(log_std, (4, 1)))
    traj = Trajectory(obs, actions, old_logp, np.ones(4), np.zeros(4))
    new_state, _ = ppo_update(traj, state, update_seed=2)
    new_mean, new_log_std, _ = policy_forward(obs[0], new_state)
    new_logp = gaussian_log_prob(actions[:1], new_mean[None, :], new_log_std[None, :])[0]
    assert new_logp > old_logp[0]


def test_ppo_update_is_deterministic():
    state = agent_for_test()
    rng = generator(31, "det")
    traj = Trajectory(rng.standard_normal((10, 6)), rng.standard_normal((10, 3)),
                      rng.standard_normal(10), rng.standard_normal(10),
                      rng.standard_normal(10))
    a, _ = ppo_update(traj, state, update_seed=5)
    b, _ = ppo_update(traj, state, update_seed=5)
    c, _ = ppo_update(traj, state, update_seed=6)
    for key in WEIGHT_KEYS:
        np.testing.assert_array_equal(a.weights[key], b.weights[key])
    assert any(not np.array_equal(a.weights[k], c.weights[k]) for k in WEIGHT_KEYS)


def test_grad_norm_clip_bounds_update():
    base = agent_for_test(entropy_coef=0.0, value_coef=0.0, max_grad_norm=1e-6)
    rng = generator(37, "clip")
    traj = Trajectory(rng.standard_normal((8, 6)), rng.standard_normal((8, 3)),
                      rng.standard_normal(8), rng.standard_normal(8), np.zeros(8))
    new_state, _ = ppo_update(traj, base, update_seed=3)
    # with a vanishing norm budget Adam still moves, but the raw gradient
    # scale cannot blow up the weights
    for key in WEIGHT_KEYS:
        drift = np.abs(new_state.weights[key] - base.weights[key]).max()
        assert drift < 0.1


# -- observation and checkpoints --------------------------------------------

def test_build_observation_concat():
    obs = build_observation(np.array([1.0, 2.0]), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(obs, [1.0, 2.0, 0.0, 1.0, 0.0])


def test_checkpoint_roundtrip(tmp_path):
    state = agent_for_test()
    path = tmp_path / "agent.ckpt"
    digest = bytes(range(32))
    save_checkpoint(path, state, digest)
    weights, stored = load_checkpoint(path, state.cfg)
    assert stored == digest
    for key in WEIGHT_KEYS:
        np.testing.assert_allclose(weights[key], state.weights[key], atol=1e-6)
        assert weights[key].shape == state.weights[key].shape


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(path, agent_for_test().cfg)
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.ckpt", agent_for_test(), b"short")
