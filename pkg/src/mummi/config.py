"""Run configuration: a JSON document with a schema version, strict keys and defaults for everything."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .envs import ENV_NAMES, ToyWorldConfig
from .losses import VARIANTS
from .mssm import ModelConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, keys: list[str] | None = None):
        self.keys = keys or []
        super().__init__(message)


@dataclass
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 32
    horizon: int = 15
    gamma: float = 0.99
    td_lambda: float = 0.95
    model_lr: float = 6e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    grad_clip: float = 100.0
    modality_weights: dict[str, float] = field(default_factory=dict)
    variant: str = "mummi"
    sequence_level: bool = False
    free_nats: float = 0.0
    missing_rate: float = 0.375
    steps: int = 100
    seed: int = 0
    seed_episodes: int = 5
    updates_per_step: int = 10
    buffer_capacity: int = 1000
    imagine_starts: int = 256
    expl_noise: float = 0.3
    expl_noise_final: float = 0.0
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_episodes: int = 10
    eval_with_cem: bool = False
    cem_candidates: int = 100
    cem_iterations: int = 5
    cem_elites: int = 10
    cem_horizon: int = 12

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("train.gamma must lie in (0, 1]", ["train.gamma"])
        if not 0.0 <= self.td_lambda <= 1.0:
            raise ConfigError("train.td_lambda must lie in [0, 1]", ["train.td_lambda"])
        if self.horizon < 1:
            raise ConfigError("train.horizon must be >= 1", ["train.horizon"])
        if self.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}", ["train.variant"])
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigError("train.missing_rate must lie in [0, 1]", ["train.missing_rate"])
        if any(w < 0 for w in self.modality_weights.values()):
            raise ConfigError("train.modality_weights must be >= 0", ["train.modality_weights"])
        if self.cem_candidates <= self.cem_elites or self.cem_elites < 2:
            raise ConfigError("need cem_candidates > cem_elites >= 2", ["train.cem_candidates", "train.cem_elites"])
        for name in ("batch_size", "seq_len", "steps", "updates_per_step", "buffer_capacity", "imagine_starts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1", [f"train.{name}"])


@dataclass
class ModelSection:
    h_dim: int = 64
    c_dim: int = 16
    f_dim: int = 32
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "elu"
    std_min: float = 1e-3
    prior_expert: bool = False


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    env: str = "toy2d"
    env_options: dict = field(default_factory=dict)
    out: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}", ["schema_version"])
        if self.env not in ENV_NAMES:
            raise ConfigError(f"env must be one of {ENV_NAMES}", ["env"])
        self.train.validate()
        self.env_config()

    def env_config(self) -> ToyWorldConfig:
        try:
            return ToyWorldConfig(modality_set=self.env, **self.env_options)
        except TypeError as exc:
            raise ConfigError(f"bad env_options: {exc}", [f"env_options.{k}" for k in self.env_options]) from None

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            modalities=self.env_config().modality_specs(tuple(m.encoder_hidden)),
            action_dim=2, h_dim=m.h_dim, c_dim=m.c_dim, f_dim=m.f_dim, embed_dim=m.f_dim,
            hidden=tuple(m.hidden), activation=m.activation, std_min=m.std_min,
            prior_expert=m.prior_expert, init_seed=self.train.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(f"{prefix}{k}" for k in data if k not in known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data)
    cfg.validate()
    return cfg


def load(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Load a config file (or defaults when ``path`` is None) and apply dotted-key overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return from_dict(data)
