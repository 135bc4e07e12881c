"""Experiment configuration: dataclass sections, YAML files and layered overrides.

Precedence, lowest first: dataclass defaults, the YAML file, `VLREWARD_` environment variables
(`__` separates nesting levels, e.g. `VLREWARD_TRAIN__EPOCHS=2`), then command-line flags and
`--set section.key=value` assignments. Override values are parsed as YAML scalars.
"""
import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from .encoders import EncoderConfig
from .evalbench import BenchmarkConfig
from .exceptions import ConfigError, UsageError
from .objectives import OBJECTIVE_TAGS
from .synthworld import RolloutConfig, SuiteConfig
from .training import TrainConfig

ENV_PREFIX = "VLREWARD_"
BASELINE = "baseline"
MODEL_TAGS = (BASELINE,) + OBJECTIVE_TAGS


@dataclass
class DataConfig:
    cap: int = 50000
    r_val: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.cap < 1:
            raise ConfigError(f"cap must be positive, got {self.cap}")
        if not 0 < self.r_val < 1:
            raise ConfigError(f"r_val must lie in (0, 1), got {self.r_val}")


SECTIONS = {
    "suite": SuiteConfig,
    "rollouts": RolloutConfig,
    "encoder": EncoderConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "benchmark": BenchmarkConfig,
}


@dataclass
class ExperimentConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    rollouts: RolloutConfig = field(default_factory=RolloutConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # per-objective TrainConfig fields applied on top of `train`
    overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    objectives: List[str] = field(default_factory=lambda: list(MODEL_TAGS))
    output_dir: str = "experiment"
    jobs: int = 1

    def __post_init__(self):
        self.objectives = list(self.objectives)
        unknown = [tag for tag in list(self.objectives) + list(self.overrides) if tag not in MODEL_TAGS]
        if unknown:
            raise UsageError(f"Unknown objectives {unknown}, expected tags from {MODEL_TAGS}")
        if len(set(self.objectives)) != len(self.objectives):
            raise ConfigError("objectives must not repeat")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        if self.encoder.obs_dim != self.suite.obs_dim:
            raise ConfigError(
                f"encoder.obs_dim ({self.encoder.obs_dim}) must match suite.obs_dim ({self.suite.obs_dim})"
            )
        valid = {f.name for f in fields(TrainConfig)} - {"objective"}
        for tag, override in self.overrides.items():
            bad = sorted(set(override) - valid)
            if bad:
                raise ConfigError(f"overrides.{tag} has unknown train keys {bad}")

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def train_config_for(self, tag: str) -> TrainConfig:
        if tag not in OBJECTIVE_TAGS:
            raise UsageError(f"Unknown objective {tag!r}, expected one of {OBJECTIVE_TAGS}")
        values = asdict(self.train)
        override = copy.deepcopy(self.overrides.get(tag, {}))
        values["objective_config"].update(override.pop("objective_config", {}))
        values.update(override)
        values["objective"] = tag
        values["objective_config"]["objective"] = tag
        return TrainConfig(**values)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        _check_keys(data, {f.name for f in fields(cls)}, "")
        kwargs = {}
        for name, value in data.items():
            section = SECTIONS.get(name)
            if section is None:
                kwargs[name] = value
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"section {name!r} must be a mapping")
            _check_keys(value, {f.name for f in fields(section)}, f"{name}.")
            try:
                kwargs[name] = section(**value)
            except TypeError as err:
                raise ConfigError(f"section {name!r}: {err}") from err
        return cls(**kwargs)


def _plain(value):
    """Tuples to lists so the YAML dump stays free of Python tags."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_keys(data: Mapping[str, Any], known: set, prefix: str) -> None:
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def apply_override(data: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    """Set `value` at the nested key `path` of a plain config dict, refusing unknown keys.

    Entries under `overrides` may be created, every other key must already exist.
    """
    node = data
    for n, key in enumerate(path[:-1]):
        if key not in node:
            if path[0] != "overrides":
                raise ConfigError(f"unknown config key {'.'.join(path[: n + 1])}")
            node[key] = {}
        node = node[key]
        if not isinstance(node, dict):
            raise ConfigError(f"config key {'.'.join(path[: n + 1])} is not a section")
    if path[-1] not in node and path[0] != "overrides":
        raise ConfigError(f"unknown config key {'.'.join(path)}")
    node[path[-1]] = value


def _scalar(raw: str) -> Any:
    value = yaml.safe_load(raw) if raw.strip() else None
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot (1e-4) as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_assignment(text: str) -> tuple:
    if "=" not in text:
        raise UsageError(f"expected key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip().split("."), _scalar(raw)


def env_overrides(environ: Mapping[str, str]) -> List[tuple]:
    assignments = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            path = name[len(ENV_PREFIX) :].lower().split("__")
            assignments.append((path, _scalar(environ[name])))
    return assignments


def _merge(base: Dict[str, Any], update: Mapping[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        if key not in base and not prefix.startswith("overrides"):
            raise ConfigError(f"unknown config key {prefix}{key}")
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value, f"{prefix}{key}.")
        else:
            base[key] = copy.deepcopy(value)


def load_config(
    path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
    assignments: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    jobs: Optional[int] = None,
) -> ExperimentConfig:
    data = ExperimentConfig().to_dict()
    if path is not None:
        with open(path, "r") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path} does not hold a mapping")
        _merge(data, loaded)

    for key_path, value in env_overrides(os.environ if environ is None else environ):
        apply_override(data, key_path, value)
    if seed is not None:
        for section in ("suite", "encoder", "data", "train", "benchmark"):
            data[section]["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    if jobs is not None:
        data["jobs"] = jobs
    for text in assignments:
        apply_override(data, *parse_assignment(text))
    return ExperimentConfig.from_dict(data)


def save_config(path: Union[str, Path], cfg: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
    return path
