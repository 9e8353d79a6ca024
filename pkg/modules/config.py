"""Training configuration: dataclass defaults, presets and flat key=value files."""

import logging
import os
from dataclasses import dataclass, fields
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from dotenv import dotenv_values

from modules.errors import ConfigError

logger = logging.getLogger(__name__)

PRESETS_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "presets")

ALGORITHMS = ("trpo", "ppo", "acktr", "vpg")
OPTIMIZERS = ("sgd", "adam")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    # run
    algo: str = "ppo"
    env: str = "Reach2D-v0"
    seed: int = 0
    total_steps: int = 150_000
    horizon: int = 2048
    max_episode_steps: int = 512
    workers: int = 1
    remote: str = ""
    checkpoint_every: int = 10
    log_window: int = 100
    success_threshold: float = 0.05

    # environment
    arm: str = ""
    randomize_target: bool = False
    action_bound: float = 0.1
    orient_coef: float = 0.1
    collision_coef: float = 1.0

    # network
    hidden: str = "64,64"
    sharing: str = "disjoint"
    init_log_std: float = 0.0

    # returns and advantages
    gamma: float = 0.99
    lam: float = 0.95
    normalize_advantages: bool = True

    # gradient steps (PPO, VPG and every value fit); sgd is the fixed-step update, adam is opt-in
    optimizer: str = "sgd"
    lr: float = 3e-4
    vf_lr: float = 1e-3
    vf_iters: int = 5
    vf_coef: float = 0.5
    ent_coef: float = 0.0

    # TRPO
    max_kl: float = 0.01
    backtrack_coef: float = 0.8
    max_backtracks: int = 10
    cg_iters: int = 10
    cg_tol: float = 1e-10
    cg_damping: float = 0.1

    # PPO
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 256
    target_kl: float = 0.0

    # ACKTR
    kfac_max_kl: float = 0.002
    kfac_eta_max: float = 0.25
    kfac_decay: float = 0.99
    kfac_refresh: int = 10
    kfac_damping: float = 0.01
    kfac_fisher: str = "true"
    kfac_t_max: int = 20

    @property
    def hidden_sizes(self) -> Tuple[int, ...]:
        try:
            return tuple(int(h) for h in self.hidden.split(",") if h.strip())
        except ValueError as e:
            raise ConfigError(f"hidden must be comma-separated layer widths, got '{self.hidden}'") from e

    def validate(self) -> "TrainConfig":
        _choice("algo", self.algo, ALGORITHMS)
        _choice("optimizer", self.optimizer, OPTIMIZERS)
        _choice("sharing", self.sharing, ("disjoint", "shared"))
        _choice("kfac_fisher", self.kfac_fisher, ("true", "empirical"))
        _at_least("total_steps", self.total_steps, 0)
        _at_least("horizon", self.horizon, 1)
        _at_least("max_episode_steps", self.max_episode_steps, 1)
        _at_least("workers", self.workers, 1)
        _at_least("checkpoint_every", self.checkpoint_every, 1)
        _at_least("log_window", self.log_window, 1)
        _at_least("vf_iters", self.vf_iters, 0)
        _at_least("max_backtracks", self.max_backtracks, 0)
        _at_least("cg_iters", self.cg_iters, 1)
        _at_least("epochs", self.epochs, 1)
        _at_least("minibatch_size", self.minibatch_size, 1)
        _at_least("kfac_refresh", self.kfac_refresh, 1)
        _at_least("kfac_t_max", self.kfac_t_max, 1)
        if self.horizon % self.workers:
            raise ConfigError(f"horizon {self.horizon} must be divisible by workers {self.workers}")
        for name in ("gamma", "lam", "kfac_decay"):
            _in_range(name, getattr(self, name), 0.0, 1.0)
        _in_range("backtrack_coef", self.backtrack_coef, 0.0, 1.0, open_interval=True)
        for name in ("max_kl", "clip_eps", "cg_damping", "kfac_max_kl", "kfac_eta_max", "kfac_damping",
                     "action_bound", "success_threshold"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "vf_lr", "vf_coef", "ent_coef", "target_kl", "cg_tol", "orient_coef", "collision_coef"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.hidden_sizes and self.sharing == "shared":
            raise ConfigError("shared sharing mode needs at least one hidden layer")
        return self


def _choice(name: str, value: str, allowed: Iterable[str]):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {tuple(allowed)}, got '{value}'")


def _at_least(name: str, value: int, low: int):
    if value < low:
        raise ConfigError(f"{name} must be at least {low}, got {value}")


def _in_range(name: str, value: float, low: float, high: float, open_interval: bool = False):
    ok = low < value < high if open_interval else low <= value <= high
    if not ok:
        bounds = f"({low}, {high})" if open_interval else f"[{low}, {high}]"
        raise ConfigError(f"{name} must lie in {bounds}, got {value}")


def _coerce(name: str, kind: type, raw: Any) -> Any:
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{name}: cannot read '{raw}' as {kind.__name__}") from e
    return text


def apply_overrides(config: TrainConfig, values: Mapping[str, Any], source: str = "overrides") -> TrainConfig:
    """Set fields from a key=value mapping, coercing strings to the field types."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in values.items():
        if key not in kinds:
            raise ConfigError(f"{source}: unknown setting '{key}'")
        if raw is None:
            raise ConfigError(f"{source}: setting '{key}' has no value")
        setattr(config, key, _coerce(key, kinds[key], raw))
    return config


def load_config_file(file_path: str) -> Dict[str, Optional[str]]:
    if not os.path.exists(file_path):
        raise ConfigError(f"config file not found at {file_path}")
    logger.info(f"Loading settings from {file_path}...")
    return dict(dotenv_values(file_path))


def preset_path(name: str) -> str:
    return os.path.join(PRESETS_DIR, f"{name}.conf")


def load_preset(name: str) -> Dict[str, Optional[str]]:
    path = preset_path(name)
    if not os.path.exists(path):
        raise ConfigError(f"unknown preset '{name}'")
    return load_config_file(path)


def resolve_config(presets: Iterable[str] = (), config_file: Optional[str] = None,
                   overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """defaults < presets (in order) < config file < explicit overrides."""
    config = TrainConfig()
    for name in presets:
        apply_overrides(config, load_preset(name), f"preset {name}")
    if config_file:
        apply_overrides(config, load_config_file(config_file), config_file)
    if overrides:
        apply_overrides(config, overrides)
    return config.validate()


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(config: TrainConfig) -> str:
    lines = [f"{f.name}={_format(getattr(config, f.name))}" for f in sorted(fields(config), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def save_config(config: TrainConfig, file_path: str):
    with open(file_path, "w", encoding="utf-8") as f:
        f.write(to_text(config))


def load_config(file_path: str) -> TrainConfig:
    return apply_overrides(TrainConfig(), load_config_file(file_path), file_path).validate()
