"""Experiment configuration: sectioned key/value files with a fixed schema.

Files use INI-style sections.  Every key has a declared type and default;
unknown sections or keys are rejected so that typos fail loudly.  The
effective (post-default, post-override) configuration has a canonical
text form whose SHA-256 ties every output file to the run that made it.
"""
from __future__ import annotations

import configparser
import hashlib
from fractions import Fraction
from typing import Any

from .adversary import PolicyConfig, RewardConfig
from .channel import ChannelConfig
from .dram import DramConfig, ThresholdTable, TrrConfig, builtin_thresholds, read_threshold_file
from .memlayout import DramMapping
from .metrics import BandwidthModel

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "SCHEMA"]


class ConfigError(ValueError):
    """Bad configuration file or values (CLI exit code 1)."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_decimal(text: str) -> str:
    """Validate a decimal literal kept verbatim for exact arithmetic."""
    Fraction(text.strip())
    return text.strip()


_PARSERS = {
    "int": lambda s: int(s, 0),
    "float": float,
    "str": lambda s: s.strip(),
    "bool": _parse_bool,
    "decimal": _parse_decimal,
}

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {
        "seed": ("int", 1),
        "iterations": ("int", 100),
        "rounds_per_episode": ("int", 100),
        "records_file": ("str", "records.txt"),
    },
    "federation": {
        "in_dim": ("int", 100),
        "hidden_dim": ("int", 96),
        "out_dim": ("int", 3),
        "n_clients": ("int", 5),
        "shard_size": ("int", 32),
        "sparsity": ("decimal", "0.01"),
        "learning_rate": ("float", 0.05),
    },
    "channel": {
        "modality": ("str", "audio"),
        "noise_std": ("float", 0.05),
        "source_rate_hz": ("int", 16000),
        "target_rate_hz": ("int", 16000),
        "blur_radius": ("int", 0),
        "texture_strength": ("float", 0.0),
        "gamma_value": ("float", 1.0),
        "rescale_factor": ("float", 1.0),
    },
    # PPO knobs here are the desk-scale profile: tight credit horizon and
    # no value/entropy terms, which the short quasi-stationary episodes
    # need; the PolicyConfig dataclass keeps the conventional defaults.
    "adversary": {
        "latent_dim": ("int", 10),
        "epsilon": ("float", 3.0),
        "alpha": ("float", 1.0),
        "beta": ("float", 0.8),
        "gamma": ("float", 0.6),
        "lambda1": ("float", 0.05),
        "lambda2": ("float", 0.25),
        "lambda_image": ("float", 0.8),
        "stft_frame": ("int", 32),
        "stft_hop": ("int", 16),
        "hidden1": ("int", 64),
        "hidden2": ("int", 64),
        "learning_rate": ("float", 0.001),
        "clip_ratio": ("float", 0.2),
        "discount": ("float", 0.5),
        "gae_lambda": ("float", 0.5),
        "epochs": ("int", 4),
        "minibatch_size": ("int", 25),
        "entropy_coef": ("float", 0.0),
        "value_coef": ("float", 0.0),
        "log_std_init": ("float", -0.5),
        "max_grad_norm": ("float", 0.5),
        "warmup_rounds": ("int", 10),
        "window_len": ("int", 0),
    },
    "memory": {
        "capacity_bytes": ("int", 0),
        "ingress_bytes": ("int", 1048576),
        "metadata_bytes": ("int", 64),
    },
    "dram": {
        "refresh_period_s": ("float", 0.064),
        "ref_commands": ("int", 8192),
        "trc_effective_ns": ("float", 49.0),
        "data_rate_mts": ("int", 2400),
        "bit_width": ("int", 64),
        "bank_count": ("int", 16),
        "rows_per_bank": ("int", 8192),
        "row_size_bytes": ("int", 8192),
        "bank_xor": ("bool", True),
        "trr_capacity": ("int", 4),
        "trr_neighbor_radius": ("int", 1),
        "vulnerable_probability": ("float", 0.95),
        "multiplier_low": ("float", 1.0),
        "multiplier_high": ("float", 1.0),
        "row_fill": ("int", 0x00),
    },
    "thresholds": {
        "source": ("str", "builtin"),
    },
    "metrics": {
        "metadata_bytes_per_entry": ("int", 0),
    },
}


class ExperimentConfig:
    """Validated configuration with typed accessors and a stable hash."""

    def __init__(self, values: dict[tuple[str, str], Any]):
        self._values = dict(values)

    def get(self, section: str, key: str) -> Any:
        try:
            return self._values[(section, key)]
        except KeyError:
            raise ConfigError(f"no config key [{section}] {key}") from None

    def override(self, section: str, key: str, value: Any) -> None:
        if (section, key) not in self._values:
            raise ConfigError(f"no config key [{section}] {key}")
        self._values[(section, key)] = value

    def normalized_text(self) -> str:
        """Canonical serialization: schema order, one key per line."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (kind, _) in keys.items():
                value = self._values[(section, key)]
                if kind == "bool":
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash_bytes(self) -> bytes:
        return hashlib.sha256(self.normalized_text().encode("ascii")).digest()

    @property
    def hash_hex(self) -> str:
        return self.hash_bytes.hex()

    # -- typed builders -------------------------------------------------
    def channel_config(self) -> ChannelConfig:
        g = self.get
        try:
            return ChannelConfig(
                modality=g("channel", "modality"),
                noise_std=g("channel", "noise_std"),
                source_rate_hz=g("channel", "source_rate_hz"),
                target_rate_hz=g("channel", "target_rate_hz"),
                blur_radius=g("channel", "blur_radius"),
                texture_strength=g("channel", "texture_strength"),
                gamma_value=g("channel", "gamma_value"),
                rescale_factor=g("channel", "rescale_factor"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [channel] settings: {exc}") from exc

    def reward_config(self) -> RewardConfig:
        g = self.get
        try:
            return RewardConfig(
                alpha=g("adversary", "alpha"),
                beta=g("adversary", "beta"),
                gamma=g("adversary", "gamma"),
                lambda1=g("adversary", "lambda1"),
                lambda2=g("adversary", "lambda2"),
                lambda_image=g("adversary", "lambda_image"),
                epsilon=g("adversary", "epsilon"),
                stft_frame=g("adversary", "stft_frame"),
                stft_hop=g("adversary", "stft_hop"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [adversary] settings: {exc}") from exc

    def policy_config(self, obs_dim: int, action_dim: int) -> PolicyConfig:
        g = self.get
        try:
            return PolicyConfig(
                obs_dim=obs_dim,
                action_dim=action_dim,
                hidden1=g("adversary", "hidden1"),
                hidden2=g("adversary", "hidden2"),
                learning_rate=g("adversary", "learning_rate"),
                clip_ratio=g("adversary", "clip_ratio"),
                discount=g("adversary", "discount"),
                gae_lambda=g("adversary", "gae_lambda"),
                epochs=g("adversary", "epochs"),
                minibatch_size=g("adversary", "minibatch_size"),
                entropy_coef=g("adversary", "entropy_coef"),
                value_coef=g("adversary", "value_coef"),
                log_std_init=g("adversary", "log_std_init"),
                max_grad_norm=g("adversary", "max_grad_norm"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [adversary] settings: {exc}") from exc

    def dram_config(self) -> DramConfig:
        g = self.get
        try:
            return DramConfig(
                refresh_period_s=g("dram", "refresh_period_s"),
                ref_commands=g("dram", "ref_commands"),
                trc_effective_s=g("dram", "trc_effective_ns") * 1e-9,
                data_rate_mts=g("dram", "data_rate_mts"),
                bit_width=g("dram", "bit_width"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [dram] settings: {exc}") from exc

    def dram_mapping(self) -> DramMapping:
        g = self.get
        try:
            return DramMapping(
                bank_count=g("dram", "bank_count"),
                rows_per_bank=g("dram", "rows_per_bank"),
                row_size_bytes=g("dram", "row_size_bytes"),
                bank_xor=g("dram", "bank_xor"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [dram] settings: {exc}") from exc

    def trr_config(self) -> TrrConfig:
        g = self.get
        try:
            return TrrConfig(
                capacity=g("dram", "trr_capacity"),
                neighbor_radius=g("dram", "trr_neighbor_radius"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [dram] settings: {exc}") from exc

    def bandwidth(self) -> BandwidthModel:
        g = self.get
        try:
            return BandwidthModel(g("dram", "data_rate_mts"), g("dram", "bit_width"))
        except ValueError as exc:
            raise ConfigError(f"bad [dram] settings: {exc}") from exc

    def threshold_table(self) -> ThresholdTable:
        source = self.get("thresholds", "source")
        if source == "builtin":
            return builtin_thresholds()
        try:
            return read_threshold_file(source)
        except OSError as exc:
            raise ConfigError(f"cannot read threshold file {source!r}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"bad threshold file {source!r}: {exc}") from exc


def load_config(path: str | None = None) -> ExperimentConfig:
    """Parse and validate a config file; None yields the defaults."""
    values: dict[tuple[str, str], Any] = {
        (section, key): default
        for section, keys in SCHEMA.items()
        for key, (_, default) in keys.items()
    }
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path!r}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                kind, _ = SCHEMA[section][key]
                try:
                    values[(section, key)] = _PARSERS[kind](raw)
                except (ValueError, ArithmeticError) as exc:
                    raise ConfigError(
                        f"{path}: bad value for [{section}] {key}: {raw!r} ({exc})"
                    ) from exc
    cfg = ExperimentConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    g = cfg.get
    if g("run", "iterations") <= 0 or g("run", "rounds_per_episode") <= 0:
        raise ConfigError("[run] iterations and rounds_per_episode must be positive")
    p = Fraction(g("federation", "sparsity"))
    if not 0 < p <= 1:
        raise ConfigError(f"[federation] sparsity must be in (0, 1], got {p}")
    if g("adversary", "latent_dim") <= 0:
        raise ConfigError("[adversary] latent_dim must be positive")
    if g("adversary", "warmup_rounds") <= 0:
        raise ConfigError("[adversary] warmup_rounds must be positive")
    if g("adversary", "warmup_rounds") > g("run", "rounds_per_episode"):
        raise ConfigError("[adversary] warmup_rounds exceeds rounds_per_episode")
    if not 0 <= g("dram", "vulnerable_probability") <= 1:
        raise ConfigError("[dram] vulnerable_probability must be in [0, 1]")
    if not 0 <= g("dram", "row_fill") <= 0xFF:
        raise ConfigError("[dram] row_fill must be a byte")
    # construct the typed views once so schema-level mistakes surface here
    cfg.channel_config()
    cfg.reward_config()
    cfg.dram_config()
    cfg.dram_mapping()
    cfg.trr_config()
    cfg.bandwidth()
