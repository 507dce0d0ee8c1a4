"""Desk-scale learned-attack loop.

An episode is one federated run: every round the agent emits a latent
action, the channel turns it into an input perturbation shared by all
clients, and the reward scores the resulting sparse-update trace for
stability, focus on a frozen target window, and stealth.  Training runs
PPO once per episode; a random-action baseline uses the same environment
for comparison.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import adversary, metrics
from .adversary import (
    AgentState,
    RewardBreakdown,
    TargetWindow,
    Trajectory,
    build_observation,
    compute_reward,
    init_policy,
    sample_action,
    save_checkpoint,
    select_target_window,
)
from .channel import ChannelConfig, clip_linf, decode_latent
from .config import ConfigError, ExperimentConfig
from .federation import RoundRecord, init_federation, make_mlp_spec, run_round, write_round_records
from .seeding import generator

__all__ = ["AttackEnv", "IterationStats", "TrainResult", "train"]

LOG_HEADER = "iteration,mean_reward,rur,mean_stability,mean_focus,mean_stealth"


class AttackEnv:
    """Federated-learning environment seen by the adversary.

    Episodes restart the federation from the same seed, so the dynamics
    are identical across episodes and all variation comes from the
    agent's actions.
    """

    def __init__(self, exp: ExperimentConfig, seed: int):
        g = exp.get
        self.in_dim = g("federation", "in_dim")
        self.n_clients = g("federation", "n_clients")
        self.spec = make_mlp_spec(self.in_dim, g("federation", "hidden_dim"), g("federation", "out_dim"))
        self.total_params = self.spec.total_params
        self.seed = seed
        self.channel_cfg: ChannelConfig = exp.channel_config()
        self.reward_cfg = exp.reward_config()
        self.modality = self.channel_cfg.modality
        self.epsilon = g("adversary", "epsilon")
        self.latent_dim = g("adversary", "latent_dim")
        self.metadata_bytes_per_entry = g("metrics", "metadata_bytes_per_entry")
        self._init_kwargs = dict(
            in_dim=self.in_dim,
            hidden_dim=g("federation", "hidden_dim"),
            out_dim=g("federation", "out_dim"),
            shard_size=g("federation", "shard_size"),
            sparsity=g("federation", "sparsity"),
            learning_rate=g("federation", "learning_rate"),
        )
        self.fed = None
        self.window: TargetWindow | None = None
        self.u_prev: frozenset[int] | None = None
        self.x_summary: np.ndarray | None = None

    @property
    def obs_dim(self) -> int:
        return self.in_dim + self.total_params

    def reset(self) -> np.ndarray:
        self.fed = init_federation(self.spec, self.n_clients, self.seed, **self._init_kwargs)
        if self.x_summary is None:
            self.x_summary = np.mean(
                np.concatenate([x for x, _ in self.fed.shards], axis=0), axis=0
            )
        self.u_prev = None
        return build_observation(self.x_summary, np.zeros(self.total_params))

    def action_to_delta(self, z: np.ndarray) -> np.ndarray:
        return clip_linf(decode_latent(z, (self.in_dim,)), self.epsilon)

    def step(self, z: np.ndarray) -> tuple[np.ndarray, RewardBreakdown, RoundRecord]:
        """Apply one latent action for a full round.

        Returns (next observation, reward breakdown, round record).  The
        reward uses the currently frozen window; the caller freezes it
        after the warmup rounds of the first episode.
        """
        delta = self.action_to_delta(np.asarray(z, dtype=np.float64))
        perturbations = {c: delta for c in range(self.n_clients)}
        res = run_round(self.fed, perturbations, self.channel_cfg, self.metadata_bytes_per_entry)
        u = res.record.index_set()
        breakdown = compute_reward(
            self.u_prev, u, self.window, delta, self.x_summary,
            self.reward_cfg, self.modality, self.total_params,
        )
        self.u_prev = u
        obs = build_observation(self.x_summary, res.record.mask(self.total_params))
        return obs, breakdown, res.record


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_reward: float
    rur: float
    mean_stability: float
    mean_focus: float
    mean_stealth: float

    def csv_line(self) -> str:
        return (
            f"{self.iteration},{self.mean_reward:.6f},{self.rur:.6f},"
            f"{self.mean_stability:.6f},{self.mean_focus:.6f},{self.mean_stealth:.6f}"
        )


@dataclass
class TrainResult:
    mode: str  # "ppo" or "random"
    stats: list[IterationStats]
    window: TargetWindow
    records: list[RoundRecord]  # final episode, globally numbered rounds
    agent: AgentState | None
    log_path: str | None = None
    checkpoint_path: str | None = None
    records_path: str | None = None

    def final_fraction_rur(self, fraction: float = 0.1) -> float:
        n = max(1, int(round(len(self.stats) * fraction)))
        return float(np.mean([s.rur for s in self.stats[-n:]]))

    def mean_reward_slice(self, start_frac: float, end_frac: float) -> float:
        n = len(self.stats)
        lo = int(n * start_frac)
        hi = max(lo + 1, int(n * end_frac))
        return float(np.mean([s.mean_reward for s in self.stats[lo:hi]]))


def train(
    exp: ExperimentConfig,
    *,
    baseline: str | None = None,
    out_dir: str | None = None,
    seed: int | None = None,
    iterations: int | None = None,
) -> TrainResult:
    """Run the full training (or baseline) loop.

    baseline="random" replaces the policy with unit-Gaussian latent
    actions but keeps everything else identical, including the window
    selection from the first episode's warmup rounds.
    """
    if baseline not in (None, "random"):
        raise ConfigError(f"unknown baseline {baseline!r}")
    mode = "random" if baseline == "random" else "ppo"
    g = exp.get
    seed = g("run", "seed") if seed is None else seed
    iterations = g("run", "iterations") if iterations is None else iterations
    rounds = g("run", "rounds_per_episode")
    warmup = g("adversary", "warmup_rounds")
    if warmup > rounds:
        raise ConfigError("warmup_rounds exceeds rounds_per_episode")

    env = AttackEnv(exp, seed)
    window_len = g("adversary", "window_len")
    if window_len <= 0:
        # default target: the densest 2% stretch of the parameter space
        window_len = -(-env.total_params // 50)

    agent = None
    if mode == "ppo":
        agent = init_policy(exp.policy_config(env.obs_dim, env.latent_dim), seed)
    act_rng = generator(seed, "action-noise")
    base_rng = generator(seed, "baseline-actions")

    warm_sets: list[frozenset[int]] = []
    stats: list[IterationStats] = []
    final_records: list[RoundRecord] = []

    for it in range(iterations):
        obs = env.reset()
        obs_buf = np.empty((rounds, env.obs_dim))
        act_buf = np.empty((rounds, env.latent_dim))
        logp_buf = np.empty(rounds)
        val_buf = np.empty(rounds)
        rew_buf = np.empty(rounds)
        breakdowns: list[RewardBreakdown] = []
        episode_records: list[RoundRecord] = []

        for t in range(rounds):
            if mode == "random":
                z = base_rng.standard_normal(env.latent_dim)
                logp, value = 0.0, 0.0
            else:
                z, logp, value = sample_action(agent, obs, act_rng)
            obs_buf[t] = obs
            act_buf[t] = z
            logp_buf[t] = logp
            val_buf[t] = value
            obs, breakdown, record = env.step(z)
            rew_buf[t] = breakdown.total
            breakdowns.append(breakdown)
            episode_records.append(record)
            if env.window is None:
                warm_sets.append(record.index_set())
                if len(warm_sets) == warmup:
                    env.window = select_target_window(
                        warm_sets, env.total_params, window_len, warmup
                    )

        rur = metrics.compute_rur([r.index_set() for r in episode_records])
        stats.append(
            IterationStats(
                iteration=it,
                mean_reward=float(rew_buf.mean()),
                rur=rur,
                mean_stability=float(np.mean([b.stability for b in breakdowns])),
                mean_focus=float(np.mean([b.focus for b in breakdowns])),
                mean_stealth=float(np.mean([b.stealth for b in breakdowns])),
            )
        )
        if mode == "ppo":
            traj = Trajectory(obs_buf, act_buf, logp_buf, rew_buf, val_buf)
            agent, _ = adversary.ppo_update(traj, agent, update_seed=(seed << 20) ^ it)
        if it == iterations - 1:
            final_records = [
                RoundRecord(it * rounds + r.round_number, r.indices) for r in episode_records
            ]

    result = TrainResult(mode, stats, env.window, final_records, agent)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.log_path = os.path.join(out_dir, "training_log.csv")
        with open(result.log_path, "w", encoding="ascii") as f:
            f.write(f"# config_hash={exp.hash_hex}\n")
            f.write(f"# mode={mode}\n")
            f.write(LOG_HEADER + "\n")
            for row in stats:
                f.write(row.csv_line() + "\n")
        result.records_path = os.path.join(out_dir, g("run", "records_file"))
        write_round_records(
            result.records_path,
            final_records,
            {"config_hash": exp.hash_hex, "total_params": str(env.total_params)},
        )
        if agent is not None:
            result.checkpoint_path = os.path.join(out_dir, "agent.ckpt")
            save_checkpoint(result.checkpoint_path, agent, exp.hash_bytes)
    return result
