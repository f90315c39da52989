"""Experiment configuration: typed defaults, TOML/JSON loading, validation.

Files may specify any subset of fields; unknown keys and type mismatches are
rejected with the full dotted field path. The cost section's memory
coefficients and c_a default to values derived from the model and training
dimensions (see fedquad.experiment.derive_cost_model).
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEVICE_CLASSES = ("strong", "moderate", "weak")


@dataclass
class ModelConfig:
    layers: int = 6
    hidden: int = 32
    rank: int = 4
    classes: int = 3
    alpha: float | None = None  # None -> 2 * rank
    base_scale: float = 2.6
    depth_taper: float = 0.7
    quant_block: int = 32
    quant_rounding: str = "stochastic"


@dataclass
class WorkloadConfig:
    train_samples: int = 6000
    test_samples: int = 1200
    sigma: float = 0.3
    noise: float = 0.05
    dirichlet_alpha: float = 10.0
    min_center_distance: float = 1.2


@dataclass
class DeviceClassConfig:
    count: int
    depth_range: list[int]
    modes: list[float]


@dataclass
class FleetConfig:
    strong: DeviceClassConfig = field(
        default_factory=lambda: DeviceClassConfig(3, [5, 6], [3.2, 2.9, 2.6])
    )
    moderate: DeviceClassConfig = field(
        default_factory=lambda: DeviceClassConfig(3, [3, 4], [1.1, 0.9, 0.75])
    )
    weak: DeviceClassConfig = field(
        default_factory=lambda: DeviceClassConfig(6, [1, 2], [0.5, 0.42, 0.34])
    )


@dataclass
class CostConfig:
    c_base: float = 2.5
    c_d: float = 5.0
    c_a: float | None = None  # None -> 0.36 * (c_base + c_d * L) / (L - 1)
    m_f_mb: float | None = None  # None -> analytic from model dims
    m_o_mb: float | None = None
    m_q_mb: float | None = None


@dataclass
class RewardConfig:
    c: float = 1.0
    floor_fraction: float = 0.1
    theta: float | None = None


@dataclass
class TrainingConfig:
    lr: float = 0.001
    batch_size: int = 32
    local_epochs: int = 1
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    cosine_lr: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 42
    rounds: int = 50
    policy: str = "acs"
    fixed_depth: int = 3  # used by uniform_fixed only
    target_accuracy: float = 0.85
    early_stop_patience: int = 3  # sustained evals at/above target
    aggregation: str = "uniform"
    model: ModelConfig = field(default_factory=ModelConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    fleet: FleetConfig = field(default_factory=FleetConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)


class ConfigError(ValueError):
    """Bad configuration file content, with the offending field path."""


_OPTIONAL_FLOATS = {
    "model.alpha",
    "cost.c_a",
    "cost.m_f_mb",
    "cost.m_o_mb",
    "cost.m_q_mb",
    "reward.theta",
}


def _coerce(value, target_type, path: str):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type")


def _merge_into(obj, data: dict, prefix: str = ""):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"{path}: unknown field")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table/object")
            _merge_into(current, value, prefix=f"{path}.")
            continue
        if isinstance(current, list):
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{path}: expected a non-empty list")
            if key == "depth_range":
                items = [_coerce(v, int, f"{path}[{i}]") for i, v in enumerate(value)]
                if len(items) != 2 or items[0] > items[1] or items[0] < 1:
                    raise ConfigError(f"{path}: expected [lo, hi] with 1 <= lo <= hi")
            else:
                items = [_coerce(v, float, f"{path}[{i}]") for i, v in enumerate(value)]
            setattr(obj, key, items)
            continue
        if value is None:
            if path not in _OPTIONAL_FLOATS:
                raise ConfigError(f"{path}: null is not allowed here")
            setattr(obj, key, None)
            continue
        if path in _OPTIONAL_FLOATS:
            setattr(obj, key, _coerce(value, float, path))
            continue
        setattr(obj, key, _coerce(value, type(current), path))


def _validate(cfg: ExperimentConfig):
    if cfg.rounds < 1:
        raise ConfigError("rounds: must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed: must be non-negative")
    if cfg.aggregation not in ("uniform", "samples"):
        raise ConfigError("aggregation: must be 'uniform' or 'samples'")
    if cfg.model.quant_rounding not in ("nearest", "stochastic"):
        raise ConfigError("model.quant_rounding: must be 'nearest' or 'stochastic'")
    if not 1 <= cfg.fixed_depth <= cfg.model.layers:
        raise ConfigError("fixed_depth: must lie in 1..model.layers")
    if cfg.model.rank > cfg.model.hidden // 2:
        raise ConfigError("model.rank: must be at most hidden/2")
    for name in DEVICE_CLASSES:
        klass: DeviceClassConfig = getattr(cfg.fleet, name)
        path = f"fleet.{name}"
        if klass.count < 0:
            raise ConfigError(f"{path}.count: must be >= 0")
        if len(klass.depth_range) != 2 or not 1 <= klass.depth_range[0] <= klass.depth_range[1]:
            raise ConfigError(f"{path}.depth_range: expected [lo, hi] with 1 <= lo <= hi")
        if klass.depth_range[1] > cfg.model.layers:
            raise ConfigError(f"{path}.depth_range: hi exceeds model.layers")
        if not klass.modes or min(klass.modes) <= 0:
            raise ConfigError(f"{path}.modes: must be positive throughputs")
    if sum(getattr(cfg.fleet, name).count for name in DEVICE_CLASSES) < 1:
        raise ConfigError("fleet: at least one device is required")
    if not 0 <= cfg.workload.noise <= 1:
        raise ConfigError("workload.noise: must be a probability")
    if cfg.workload.dirichlet_alpha <= 0:
        raise ConfigError("workload.dirichlet_alpha: must be positive")


def default_config() -> ExperimentConfig:
    cfg = ExperimentConfig()
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read TOML (.toml) or JSON (.json) into a validated ExperimentConfig."""
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix.lower() == ".json":
        try:
            data = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    elif p.suffix.lower() == ".toml":
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
    else:
        raise ConfigError(f"unsupported config extension {p.suffix!r} (use .toml or .json)")
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be a table/object")
    cfg = ExperimentConfig()
    _merge_into(cfg, data)
    _validate(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
