"""Run configuration: strict YAML schema with defaults.

Unknown keys are rejected with their full dotted path and every value is
type-checked, so a typo fails the run instead of silently training the
wrong thing. All randomness in a run flows from the single root seed (or
the seeds list) declared here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .training import PPOConfig


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration key."""


@dataclass
class RunConfig:
    family: str = "velocity"
    train_range: tuple[float, float] | None = None
    ood_range: tuple[float, float] | None = None
    horizon: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    head_hidden: int = 64
    init_log_std: float = 0.0
    value_scale: float = 100.0
    episodes_per_task: int = 2
    tasks_per_batch: int = 16
    total_timesteps: int = 500_000
    eval_interval: int = 32_768
    eval_tasks: int = 20
    eval_episodes: int = 6
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    stop_return: float | None = None
    out_dir: str = "runs/out"

    def to_dict(self) -> dict:
        return {
            "env": {
                "family": self.family,
                "train_range": list(self.train_range) if self.train_range else None,
                "ood_range": list(self.ood_range) if self.ood_range else None,
                "horizon": self.horizon,
            },
            "encoder": self.encoder.to_dict(),
            "ppo": self.ppo.to_dict(),
            "agent": {
                "head_hidden": self.head_hidden,
                "init_log_std": self.init_log_std,
                "value_scale": self.value_scale,
            },
            "train": {
                "episodes_per_task": self.episodes_per_task,
                "tasks_per_batch": self.tasks_per_batch,
                "total_timesteps": self.total_timesteps,
                "eval_interval": self.eval_interval,
                "eval_tasks": self.eval_tasks,
                "eval_episodes": self.eval_episodes,
                "seeds": list(self.seeds),
                "stop_return": self.stop_return,
            },
            "out_dir": self.out_dir,
        }


_SCHEMA = {
    "env": {
        "family": (str, True),
        "train_range": ("range", False),
        "ood_range": ("range", False),
        "horizon": (int, False),
    },
    "encoder": {
        "d": (int, False),
        "n_layers": (int, False),
        "n_heads": (int, False),
        "d_ff": (int, False),
        "seq_len": (int, False),
        "use_tfixup": (bool, False),
        "use_layer_norm": (bool, False),
    },
    "ppo": {
        "clip_eps": (float, False),
        "gamma": (float, False),
        "gae_lambda": (float, False),
        "epochs": (int, False),
        "minibatch_size": (int, False),
        "learning_rate": (float, False),
        "value_coef": (float, False),
        "entropy_coef": (float, False),
        "max_grad_norm": (float, False),
    },
    "agent": {
        "head_hidden": (int, False),
        "init_log_std": (float, False),
        "value_scale": (float, False),
    },
    "train": {
        "episodes_per_task": (int, False),
        "tasks_per_batch": (int, False),
        "total_timesteps": (int, True),
        "eval_interval": (int, False),
        "eval_tasks": (int, False),
        "eval_episodes": (int, False),
        "seeds": ("int_list", False),
        "stop_return": (float, False),
    },
    "out_dir": (str, False),
}


def _check_type(value, expected, path: str):
    if expected == "range":
        if (
            not isinstance(value, (list, tuple))
            or len(value) != 2
            or not all(isinstance(v, (int, float)) for v in value)
        ):
            raise ConfigError(f"{path}: expected [low, high], got {value!r}")
        return (float(value[0]), float(value[1]))
    if expected == "int_list":
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{path}: expected a list of ints, got {value!r}")
        return list(value)
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an int, got {value!r}")
        return value
    if not isinstance(value, expected):
        raise ConfigError(f"{path}: expected {expected.__name__}, got {value!r}")
    return value


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    values: dict[str, dict] = {}
    for section, spec in _SCHEMA.items():
        if not isinstance(spec, dict):
            continue
        block = raw.get(section, {})
        if block is None:
            block = {}
        if not isinstance(block, dict):
            raise ConfigError(f"{section}: expected a mapping")
        for key in block:
            if key not in spec:
                raise ConfigError(f"unknown key: {section}.{key}")
        parsed = {}
        for key, (typ, required) in spec.items():
            if key in block and block[key] is not None:
                parsed[key] = _check_type(block[key], typ, f"{section}.{key}")
            elif required:
                raise ConfigError(f"missing required key: {section}.{key}")
        values[section] = parsed
    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key: {key}")
    if "out_dir" in raw and raw["out_dir"] is not None:
        out_dir = _check_type(raw["out_dir"], str, "out_dir")
    else:
        out_dir = RunConfig.out_dir

    cfg = RunConfig(out_dir=out_dir)
    env = values["env"]
    cfg.family = env["family"]
    cfg.train_range = env.get("train_range")
    cfg.ood_range = env.get("ood_range")
    cfg.horizon = env.get("horizon", cfg.horizon)
    enc_defaults = EncoderConfig().to_dict()
    enc_defaults["use_layer_norm"] = None  # re-derive from use_tfixup unless set
    try:
        cfg.encoder = EncoderConfig(**{**enc_defaults, **values["encoder"]})
        cfg.ppo = PPOConfig(**{**PPOConfig().to_dict(), **values["ppo"]})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    agent = values["agent"]
    cfg.head_hidden = agent.get("head_hidden", cfg.head_hidden)
    cfg.init_log_std = agent.get("init_log_std", cfg.init_log_std)
    cfg.value_scale = agent.get("value_scale", cfg.value_scale)
    train = values["train"]
    for k in (
        "episodes_per_task",
        "tasks_per_batch",
        "total_timesteps",
        "eval_interval",
        "eval_tasks",
        "eval_episodes",
        "seeds",
        "stop_return",
    ):
        if k in train:
            setattr(cfg, k, train[k])
    if cfg.total_timesteps < 1:
        raise ConfigError("train.total_timesteps must be positive")
    if not cfg.seeds:
        raise ConfigError("train.seeds must not be empty")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if raw is None:
        raise ConfigError(f"{path}: empty config")
    try:
        return parse_config(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
