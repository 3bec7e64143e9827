"""Experiment configuration: one YAML file with a section per stage.

Every section is optional; missing keys take their defaults. Unknown keys and
invalid values raise ConfigError naming the offending key as ``section.key``.
See README.md for a complete annotated example.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .matching import DEFAULT_THRESHOLDS, MatchConfig
from .signals import DEFAULT_RATE, SENSOR_SIGMA, TRACK_SIGMA
from .simulator import ScenarioConfig
from .training import TrainConfig

ESTIMATORS = ("oracle", "logistic", "nn")


@dataclass
class PreprocessConfig:
    rate: float = DEFAULT_RATE
    track_sigma: float = TRACK_SIGMA
    sensor_sigma: float = SENSOR_SIGMA

    def __post_init__(self):
        for key in ("rate", "track_sigma", "sensor_sigma"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive", key)


@dataclass
class ScoringConfig:
    estimator: str = "nn"
    stride: int = 1
    W: int | None = None  # required by the oracle estimator; otherwise taken from the checkpoint

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {', '.join(ESTIMATORS)}", "estimator")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigError("stride must be a positive integer", "stride")
        if self.W is not None and (int(self.W) != self.W or self.W < 1):
            raise ConfigError("W must be a positive integer", "W")


@dataclass
class MatchingConfig:
    R_csdr: float | None = None  # None: adopted pair for the model's W
    P_acpt: float | None = None
    N_min: int = 1
    # if set, N_min = ceil(N_min_windows * W): evidence measured in window lengths,
    # since windows at stride 1 overlap by W - 1 samples
    N_min_windows: float | None = None

    def resolve(self, W: int) -> MatchConfig:
        R, P = self.R_csdr, self.P_acpt
        if R is None or P is None:
            if W not in DEFAULT_THRESHOLDS:
                raise ConfigError(f"no adopted thresholds for W={W}; set R_csdr and P_acpt", "matching.R_csdr")
            R0, P0 = DEFAULT_THRESHOLDS[W]
            R = R0 if R is None else R
            P = P0 if P is None else P
        n = self.N_min if self.N_min_windows is None else max(1, math.ceil(self.N_min_windows * W))
        return MatchConfig(R, P, n)

    def __post_init__(self):
        MatchConfig(0.1 if self.R_csdr is None else self.R_csdr,
                    0.7 if self.P_acpt is None else self.P_acpt, self.N_min)
        if self.N_min_windows is not None and not self.N_min_windows >= 0:
            raise ConfigError("N_min_windows must be non-negative", "N_min_windows")


@dataclass
class Config:
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "scenario": ScenarioConfig,
    "preprocess": PreprocessConfig,
    "training": TrainConfig,
    "scoring": ScoringConfig,
    "matching": MatchingConfig,
}


def _build(section: str, cls, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section} must be a mapping", section)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
    try:
        return cls(**values)
    except ConfigError as exc:
        key = exc.key if exc.key and exc.key.startswith(section + ".") else f"{section}.{exc.key}"
        raise ConfigError(f"{key}: {exc}", key) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section}: {exc}", section) from exc


def from_dict(raw: dict | None, seed: int | None = None) -> Config:
    raw = dict(raw or {})
    for key in raw:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(f"unknown top-level key {key}", key)
    base_seed = raw.get("seed", 0) if seed is None else seed
    if isinstance(base_seed, bool) or not isinstance(base_seed, int) or base_seed < 0:
        raise ConfigError("seed must be a non-negative integer", "seed")
    parts = {}
    for name, cls in SECTIONS.items():
        values = dict(raw.get(name) or {})
        if name in ("scenario", "training") and ("seed" not in values or seed is not None):
            values["seed"] = base_seed
        parts[name] = _build(name, cls, values)
    return Config(seed=base_seed, **parts)


def load(path, seed: int | None = None) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found", "config")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})", "config") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping", "config")
    return from_dict(raw, seed)


def dump(config: Config) -> str:
    data = config.to_dict()
    data["scenario"]["arena"] = list(data["scenario"]["arena"])
    return yaml.safe_dump(data, sort_keys=False)
