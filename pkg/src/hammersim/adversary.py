"""Black-box perturbation agent: reward shaping and PPO policy updates.

The agent observes the clean input summary and the previous round's
updated-index mask, emits a low-dimensional latent action, and is
rewarded for making consecutive update index sets stable (low earth
mover's distance), concentrated inside a frozen target window, and
physically inconspicuous (a perceptibility penalty).

The policy is a two-hidden-layer tanh network with Gaussian action
heads (mean and log-std) and a scalar value head.  Updates use the
clipped surrogate objective with an entropy bonus and a clipped-ratio
advantage estimate smoothed by discounted temporal differences.  All
gradients are computed by hand in numpy and are finite-difference
checked in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .channel import stft
from .seeding import generator

__all__ = [
    "compute_emd",
    "target_focus",
    "TargetWindow",
    "select_target_window",
    "perceptibility_audio",
    "perceptibility_image",
    "RewardConfig",
    "RewardBreakdown",
    "compute_reward",
    "PolicyConfig",
    "AgentState",
    "init_policy",
    "policy_forward",
    "sample_action",
    "gaussian_log_prob",
    "Trajectory",
    "compute_gae",
    "ppo_loss",
    "ppo_loss_and_grads",
    "ppo_update",
    "build_observation",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def compute_emd(u_prev: Iterable[int], u_curr: Iterable[int], total_params: int) -> float:
    """Earth mover's distance between two index sets on [0, 1).

    Each set is treated as a uniform distribution over its indices scaled
    by total_params; the distance is the integral of the absolute CDF
    difference.  For equal-size sets this equals the mean absolute
    difference of the sorted matched indices over total_params.
    """
    a = np.array(sorted(set(int(i) for i in u_prev)), dtype=np.float64)
    b = np.array(sorted(set(int(i) for i in u_curr)), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("EMD needs two nonempty index sets")
    if total_params <= 0 or a[-1] >= total_params or b[-1] >= total_params:
        raise ValueError("indices out of range for total_params")
    a /= total_params
    b /= total_params
    support = np.concatenate([a, b])
    support.sort(kind="mergesort")
    deltas = np.diff(support)
    cdf_a = np.searchsorted(a, support[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


@dataclass(frozen=True)
class TargetWindow:
    """Half-open index interval [start, end) inside the parameter space."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"bad window [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def target_focus(u_curr: Iterable[int], window: TargetWindow) -> float:
    """Fraction of the round's indices inside the window; 0 on empty set."""
    u = [int(i) for i in u_curr]
    if not u:
        return 0.0
    inside = sum(1 for i in u if window.start <= i < window.end)
    return inside / len(u)


def select_target_window(
    index_sets: list[Iterable[int]],
    total_params: int,
    window_len: int,
    warmup_rounds: int = 10,
) -> TargetWindow:
    """Densest window of given length over the warmup rounds' indices.

    Counts how often every index appears in the first warmup_rounds sets
    and returns the window with the maximal total count, ties resolved to
    the smallest start.  Callers freeze the result for the rest of the
    run.
    """
    if window_len <= 0 or window_len > total_params:
        raise ValueError(f"window_len {window_len} out of range for M={total_params}")
    if len(index_sets) < warmup_rounds:
        raise ValueError(f"need {warmup_rounds} warmup rounds, have {len(index_sets)}")
    counts = np.zeros(total_params, dtype=np.int64)
    for u in index_sets[:warmup_rounds]:
        for i in u:
            if not 0 <= int(i) < total_params:
                raise ValueError(f"index {i} out of range")
            counts[int(i)] += 1
    # zero-prefixed cumsum: sums[s] covers counts[s .. s+window_len-1]
    cumulative = np.concatenate(([0], np.cumsum(counts)))
    sums = cumulative[window_len:] - cumulative[:-window_len]
    start = int(np.argmax(sums))
    return TargetWindow(start, start + window_len)


def perceptibility_audio(
    delta: np.ndarray,
    x_clean: np.ndarray,
    lambda1: float,
    lambda2: float,
    frame_len: int = 256,
    hop: int = 128,
) -> float:
    """Spectral distortion plus RMS energy of an audio perturbation."""
    delta = np.asarray(delta, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if delta.shape != x_clean.shape:
        raise ValueError("delta and x_clean shapes differ")
    spec_term = 0.0
    if lambda1 != 0.0:
        diff = stft(x_clean + delta, frame_len, hop) - stft(x_clean, frame_len, hop)
        spec_term = float(np.sqrt(np.sum(np.abs(diff) ** 2)))
    rms = float(np.sqrt(np.mean(delta**2)))
    return lambda1 * spec_term + lambda2 * rms


def perceptibility_image(delta: np.ndarray, lambda_image: float) -> float:
    """Squared-energy penalty for an image perturbation."""
    delta = np.asarray(delta, dtype=np.float64)
    return lambda_image * float(np.sum(delta**2))


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 0.8
    gamma: float = 0.6
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda_image: float = 0.8
    epsilon: float = 0.1
    stft_frame: int = 256
    stft_hop: int = 128

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class RewardBreakdown:
    stability: float
    focus: float
    stealth: float
    total: float


def compute_reward(
    u_prev: Iterable[int] | None,
    u_curr: Iterable[int],
    window: TargetWindow | None,
    delta: np.ndarray,
    x_clean: np.ndarray,
    cfg: RewardConfig,
    modality: str,
    total_params: int,
) -> RewardBreakdown:
    """total = alpha * stability + beta * focus - gamma * stealth.

    stability is 1 - EMD of consecutive index sets (0 when there is no
    previous round), focus is the window hit fraction (0 without a frozen
    window yet), stealth is the modality's perceptibility measure.
    """
    if modality not in ("audio", "image"):
        raise ValueError(f"unknown modality {modality!r}")
    stability = 0.0
    if u_prev is not None:
        stability = 1.0 - compute_emd(u_prev, u_curr, total_params)
    focus = 0.0 if window is None else target_focus(u_curr, window)
    if modality == "audio":
        stealth = perceptibility_audio(
            delta, x_clean, cfg.lambda1, cfg.lambda2, cfg.stft_frame, cfg.stft_hop
        )
    else:
        stealth = perceptibility_image(delta, cfg.lambda_image)
    total = cfg.alpha * stability + cfg.beta * focus - cfg.gamma * stealth
    return RewardBreakdown(stability, focus, stealth, total)


# ---------------------------------------------------------------------------
# Policy network and PPO update
# ---------------------------------------------------------------------------

WEIGHT_KEYS = ("w1", "b1", "w2", "b2", "wm", "bm", "ws", "bs", "wv", "bv")


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int
    action_dim: int
    hidden1: int = 64
    hidden2: int = 64
    learning_rate: float = 3e-3
    clip_ratio: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 25
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    log_std_init: float = -0.5
    max_grad_norm: float = 0.5  # <= 0 disables clipping

    def __post_init__(self) -> None:
        if self.obs_dim <= 0 or self.action_dim <= 0:
            raise ValueError("dimensions must be positive")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must be in (0, 1)")
        if not 0 <= self.discount <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("discount and gae_lambda must be in [0, 1]")


@dataclass
class AgentState:
    cfg: PolicyConfig
    weights: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0


def init_policy(cfg: PolicyConfig, seed: int) -> AgentState:
    """Scaled-normal weight init; log-std bias starts at log_std_init."""
    rng = generator(seed, "policy-init")

    def dense(n_in: int, n_out: int, scale: float = 1.0) -> np.ndarray:
        return rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out))

    weights = {
        "w1": dense(cfg.obs_dim, cfg.hidden1),
        "b1": np.zeros(cfg.hidden1),
        "w2": dense(cfg.hidden1, cfg.hidden2),
        "b2": np.zeros(cfg.hidden2),
        "wm": dense(cfg.hidden2, cfg.action_dim, scale=0.1),
        "bm": np.zeros(cfg.action_dim),
        "ws": np.zeros((cfg.hidden2, cfg.action_dim)),
        "bs": np.full(cfg.action_dim, cfg.log_std_init),
        "wv": dense(cfg.hidden2, 1, scale=0.1),
        "bv": np.zeros(1),
    }
    state = AgentState(cfg, weights)
    state.adam_m = {k: np.zeros_like(v) for k, v in weights.items()}
    state.adam_v = {k: np.zeros_like(v) for k, v in weights.items()}
    return state


def _forward(weights: dict[str, np.ndarray], obs: np.ndarray):
    z1 = obs @ weights["w1"] + weights["b1"]
    h1 = np.tanh(z1)
    z2 = h1 @ weights["w2"] + weights["b2"]
    h2 = np.tanh(z2)
    mean = h2 @ weights["wm"] + weights["bm"]
    log_std = h2 @ weights["ws"] + weights["bs"]
    value = (h2 @ weights["wv"] + weights["bv"])[:, 0]
    return mean, log_std, value, (obs, h1, h2)


def policy_forward(obs: np.ndarray, state: AgentState) -> tuple[np.ndarray, np.ndarray, float]:
    """(action mean, action log-std, state value) for one observation."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (state.cfg.obs_dim,):
        raise ValueError(f"obs shape {obs.shape} != ({state.cfg.obs_dim},)")
    mean, log_std, value, _ = _forward(state.weights, obs[None, :])
    return mean[0], log_std[0], float(value[0])


def gaussian_log_prob(action: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density, batched over the first axis."""
    var = np.exp(2.0 * log_std)
    return -0.5 * np.sum((action - mean) ** 2 / var + 2.0 * log_std + LOG_2PI, axis=-1)


def sample_action(
    state: AgentState, obs: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float, float]:
    """Draw an action; returns (action, log_prob, value)."""
    mean, log_std, value = policy_forward(obs, state)
    action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = float(gaussian_log_prob(action[None, :], mean[None, :], log_std[None, :])[0])
    return action, logp, value


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, action_dim)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)

    def __post_init__(self) -> None:
        t = self.obs.shape[0]
        if not (self.actions.shape[0] == self.log_probs.shape[0] == self.rewards.shape[0] == self.values.shape[0] == t):
            raise ValueError("trajectory field lengths differ")
        if t == 0:
            raise ValueError("empty trajectory")


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, discount: float, gae_lambda: float
) -> tuple[np.ndarray, np.ndarray]:
    """Advantages via discounted TD smoothing; episode bootstraps to zero."""
    t_len = rewards.shape[0]
    adv = np.zeros(t_len)
    running = 0.0
    for t in range(t_len - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < t_len else 0.0
        delta = rewards[t] + discount * next_value - values[t]
        running = delta + discount * gae_lambda * running
        adv[t] = running
    return adv, adv + values


def ppo_loss(
    weights: dict[str, np.ndarray],
    cfg: PolicyConfig,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
) -> float:
    """Clipped-surrogate PPO objective (to minimize)."""
    mean, log_std, value, _ = _forward(weights, obs)
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - old_log_probs)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * advantages
    surrogate = np.minimum(surr1, surr2)
    entropy = np.sum(log_std, axis=-1) + 0.5 * actions.shape[1] * (1.0 + LOG_2PI)
    value_err = (value - returns) ** 2
    return float(np.mean(-surrogate - cfg.entropy_coef * entropy + cfg.value_coef * value_err))


def ppo_loss_and_grads(
    weights: dict[str, np.ndarray],
    cfg: PolicyConfig,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Analytic gradients of ppo_loss with respect to every weight array."""
    batch = obs.shape[0]
    mean, log_std, value, (obs_c, h1, h2) = _forward(weights, obs)
    var = np.exp(2.0 * log_std)
    diff = actions - mean
    logp = -0.5 * np.sum(diff**2 / var + 2.0 * log_std + LOG_2PI, axis=-1)
    ratio = np.exp(logp - old_log_probs)
    surr1 = ratio * advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    surr2 = clipped * advantages
    surrogate = np.minimum(surr1, surr2)
    entropy = np.sum(log_std, axis=-1) + 0.5 * actions.shape[1] * (1.0 + LOG_2PI)
    value_err = value - returns
    loss = float(np.mean(-surrogate - cfg.entropy_coef * entropy + cfg.value_coef * value_err**2))

    # d loss / d ratio through min(surr1, surr2); at ties the unclipped
    # branch is taken, matching np.minimum's first argument.
    take_first = surr1 <= surr2
    in_band = (ratio > 1.0 - cfg.clip_ratio) & (ratio < 1.0 + cfg.clip_ratio)
    d_surr_d_ratio = np.where(take_first, advantages, advantages * in_band)
    d_ratio = -d_surr_d_ratio / batch
    d_logp = d_ratio * ratio

    d_mean = d_logp[:, None] * (diff / var)
    d_log_std = d_logp[:, None] * (diff**2 / var - 1.0)
    d_log_std -= cfg.entropy_coef / batch  # entropy bonus, d entropy / d log_std = 1
    d_value = 2.0 * cfg.value_coef * value_err / batch

    grads: dict[str, np.ndarray] = {}
    grads["wm"] = h2.T @ d_mean
    grads["bm"] = d_mean.sum(axis=0)
    grads["ws"] = h2.T @ d_log_std
    grads["bs"] = d_log_std.sum(axis=0)
    grads["wv"] = h2.T @ d_value[:, None]
    grads["bv"] = d_value.sum(axis=0, keepdims=True).reshape(1)
    d_h2 = d_mean @ weights["wm"].T + d_log_std @ weights["ws"].T + d_value[:, None] @ weights["wv"].T
    d_z2 = d_h2 * (1.0 - h2**2)
    grads["w2"] = h1.T @ d_z2
    grads["b2"] = d_z2.sum(axis=0)
    d_h1 = d_z2 @ weights["w2"].T
    d_z1 = d_h1 * (1.0 - h1**2)
    grads["w1"] = obs_c.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return loss, grads


def ppo_update(
    trajectory: Trajectory, state: AgentState, update_seed: int = 0
) -> tuple[AgentState, dict[str, float]]:
    """One PPO iteration over a single-episode trajectory.

    Runs cfg.epochs passes of shuffled minibatches with Adam, clipping
    each minibatch gradient to max_grad_norm.  With all advantages zero
    and entropy_coef zero the weights are unchanged.
    """
    cfg = state.cfg
    adv, returns = compute_gae(trajectory.rewards, trajectory.values, cfg.discount, cfg.gae_lambda)
    std = adv.std()
    if std > 1e-8:
        adv = (adv - adv.mean()) / std
    rng = generator(update_seed, "ppo-minibatch")
    t_len = trajectory.obs.shape[0]
    mb = min(cfg.minibatch_size, t_len)

    weights = {k: v.copy() for k, v in state.weights.items()}
    adam_m = {k: v.copy() for k, v in state.adam_m.items()}
    adam_v = {k: v.copy() for k, v in state.adam_v.items()}
    step = state.adam_step
    losses = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(t_len)
        for lo in range(0, t_len, mb):
            sel = perm[lo: lo + mb]
            loss, grads = ppo_loss_and_grads(
                weights, cfg, trajectory.obs[sel], trajectory.actions[sel],
                trajectory.log_probs[sel], adv[sel], returns[sel],
            )
            losses.append(loss)
            if cfg.max_grad_norm > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.max_grad_norm:
                    scale = cfg.max_grad_norm / norm
                    grads = {k: g * scale for k, g in grads.items()}
            step += 1
            for key in WEIGHT_KEYS:
                g = grads[key]
                adam_m[key] = 0.9 * adam_m[key] + 0.1 * g
                adam_v[key] = 0.999 * adam_v[key] + 0.001 * g**2
                m_hat = adam_m[key] / (1.0 - 0.9**step)
                v_hat = adam_v[key] / (1.0 - 0.999**step)
                weights[key] = weights[key] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
    new_state = AgentState(cfg, weights, adam_m, adam_v, step)
    stats = {
        "loss": float(np.mean(losses)),
        "adv_std": float(std),
        "return_mean": float(returns.mean()),
    }
    return new_state, stats


def build_observation(x_summary: np.ndarray, index_mask: np.ndarray) -> np.ndarray:
    """Concatenate the clean-input summary with the previous round's mask."""
    return np.concatenate([np.asarray(x_summary, dtype=np.float64).ravel(),
                           np.asarray(index_mask, dtype=np.float64).ravel()])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: AgentState, config_hash: bytes) -> None:
    """Binary blob: magic, version, config hash, flat float32 weights."""
    if len(config_hash) != 32:
        raise ValueError("config_hash must be 32 bytes")
    flat = np.concatenate([state.weights[k].ravel() for k in WEIGHT_KEYS]).astype("<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        f.write(config_hash)
        f.write(len(flat).to_bytes(8, "little"))
        f.write(flat.tobytes())


def load_checkpoint(path, cfg: PolicyConfig) -> tuple[dict[str, np.ndarray], bytes]:
    """Weights dict (reshaped per cfg) and the stored config hash."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version = int.from_bytes(blob[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config_hash = blob[8:40]
    count = int.from_bytes(blob[40:48], "little")
    flat = np.frombuffer(blob[48:], dtype="<f4")
    if flat.size != count:
        raise ValueError(f"checkpoint holds {flat.size} weights, header says {count}")
    shapes = {
        "w1": (cfg.obs_dim, cfg.hidden1),
        "b1": (cfg.hidden1,),
        "w2": (cfg.hidden1, cfg.hidden2),
        "b2": (cfg.hidden2,),
        "wm": (cfg.hidden2, cfg.action_dim),
        "bm": (cfg.action_dim,),
        "ws": (cfg.hidden2, cfg.action_dim),
        "bs": (cfg.action_dim,),
        "wv": (cfg.hidden2, 1),
        "bv": (1,),
    }
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if count != expected:
        raise ValueError(f"checkpoint weight count {count} does not match config ({expected})")
    weights = {}
    cursor = 0
    for key in WEIGHT_KEYS:
        size = int(np.prod(shapes[key]))
        weights[key] = flat[cursor: cursor + size].astype(np.float64).reshape(shapes[key])
        cursor += size
    return weights, config_hash
