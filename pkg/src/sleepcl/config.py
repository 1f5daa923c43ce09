"""Experiment configuration: defaults, YAML file + CLI override resolution, fingerprints.

Precedence is CLI > file > profile defaults. Two profiles exist: ``full``
(the CIFAR-100 setting) and ``desk`` (small grayscale benchmark that runs on
a laptop CPU in minutes).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .models import ModelConfig, preset

DATA_ENV = "SLEEPCL_DATA"
DEFAULT_P_VALUES = [0.0, 0.25, 0.5, 0.75, 0.9]


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    variant: str = "cifar100"  # cifar100 | cifar10 | idx
    path: Optional[str] = None
    channels: int = 3
    tasks: int = 10
    classes_per_task: int = 10
    shuffle_classes: bool = False
    class_seed: int = 0
    eval_limit: Optional[int] = None  # test examples per class set at each evaluation


@dataclass
class ModelSection:
    preset: str = "full"
    hidden: Optional[int] = None
    latent: Optional[int] = None
    conv_channels: Optional[list] = None
    extractor_path: Optional[str] = None


@dataclass
class TrainSection:
    iterations: int = 10000
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    temperature: float = 2.0
    kl_weight: Optional[float] = None  # None -> 1 / feature_length
    eval_every: int = 250
    replay_mode: str = "continuous"  # continuous | pooled
    pool_size: int = 10000
    snapshot_before_downscale: bool = True
    reset_optimizer: bool = True
    hist_bins: int = 64
    precision: str = "float32"


@dataclass
class SweepSection:
    p: list = field(default_factory=lambda: list(DEFAULT_P_VALUES))
    rem: list = field(default_factory=lambda: [True, False])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    jobs: int = 1


@dataclass
class OutputSection:
    dir: str = "out"


@dataclass
class ExperimentConfig:
    profile: str = "full"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    def model_config(self) -> ModelConfig:
        over = {}
        if self.model.hidden is not None:
            over["hidden"] = self.model.hidden
        if self.model.latent is not None:
            over["latent"] = self.model.latent
        if self.model.conv_channels is not None:
            over["conv_channels"] = tuple(self.model.conv_channels)
        base = preset(self.model.preset, **over)
        return dataclasses.replace(base, num_classes=self.num_classes())

    def num_classes(self) -> int:
        return 10 if self.data.variant in ("cifar10", "idx") else 100

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        return fingerprint(self)


_PROFILE_OVERRIDES = {
    "full": {},
    "desk": {
        "data": {"variant": "idx", "channels": 1, "tasks": 5, "classes_per_task": 2},
        "model": {"preset": "desk"},
        "train": {"iterations": 1500, "batch_size": 32, "lr": 1e-3, "eval_every": 50},
        "sweep": {"p": [0.0, 0.5, 0.75], "rem": [True, False], "seeds": [0, 1, 2, 3, 4]},
    },
}

_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
             "sweep": SweepSection, "output": OutputSection}


def defaults(profile: str = "full") -> dict:
    if profile not in _PROFILE_OVERRIDES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(_PROFILE_OVERRIDES)}")
    base = dataclasses.asdict(ExperimentConfig(profile=profile))
    _merge(base, copy.deepcopy(_PROFILE_OVERRIDES[profile]), "")
    return base


def _merge(dst: dict, src: dict, where: str) -> None:
    for k, v in src.items():
        key = f"{where}{k}"
        if k not in dst:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(dst[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"'{key}' is a section; expected a mapping, got {v!r}")
            _merge(dst[k], v, key + ".")
        else:
            dst[k] = v


def _coerce(value: Any, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key)
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"'{key}' expects true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' expects an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' expects a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' expects a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            value = [value]
        return list(value)
    return value


_LIST_ITEM_TYPES = {"sweep.p": float, "sweep.rem": bool, "sweep.seeds": int, "model.conv_channels": int}


def from_dict(d: dict) -> ExperimentConfig:
    kwargs = {"profile": d.get("profile", "full")}
    for name, cls in _SECTIONS.items():
        sec = d.get(name, {})
        hints = typing.get_type_hints(cls)
        vals = {}
        for f in dataclasses.fields(cls):
            key = f"{name}.{f.name}"
            v = _coerce(sec.get(f.name), hints[f.name], key)
            if isinstance(v, list) and key in _LIST_ITEM_TYPES:
                v = [_coerce(x, _LIST_ITEM_TYPES[key], key) for x in v]
            vals[f.name] = v
        kwargs[name] = cls(**vals)
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.data.variant not in ("cifar100", "cifar10", "idx"):
        raise ConfigError(f"data.variant must be cifar100, cifar10 or idx, got {cfg.data.variant!r}")
    if cfg.train.replay_mode not in ("continuous", "pooled"):
        raise ConfigError(f"train.replay_mode must be continuous or pooled, got {cfg.train.replay_mode!r}")
    if cfg.train.precision not in ("float32", "float64"):
        raise ConfigError("train.precision must be float32 or float64")
    for p in cfg.sweep.p:
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"downscale fraction {p} outside [0, 1)")
    for name in ("iterations", "batch_size", "eval_every", "hist_bins"):
        if getattr(cfg.train, name) < 1:
            raise ConfigError(f"train.{name} must be positive")
    if not cfg.sweep.seeds or not cfg.sweep.rem or not cfg.sweep.p:
        raise ConfigError("sweep.p, sweep.rem and sweep.seeds must be non-empty")
    try:
        mc = cfg.model_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.data.tasks * cfg.data.classes_per_task > mc.num_classes:
        raise ConfigError("data.tasks x data.classes_per_task exceeds the dataset's class count")
    if cfg.train.kl_weight is None:
        cfg.train.kl_weight = 1.0 / mc.feature_length


def parse_overrides(args: list[str]) -> dict:
    """Turn ``["--train.lr", "0.01", "--downscale", "0.75"]`` into a nested dict."""
    out: dict = {}
    it = iter(args)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            try:
                raw = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for --{key}") from None
        value = yaml.safe_load(raw)
        if key == "downscale":
            key = "sweep.p"
        elif key in ("rem", "seeds", "seed"):
            key = "sweep.seeds" if key.startswith("seed") else "sweep.rem"
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def resolve_config(path=None, overrides: Optional[dict] = None, require_data: bool = False) -> ExperimentConfig:
    """Build a fully resolved config from an optional YAML file and CLI overrides."""
    file_dict: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            file_dict = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse ({exc})") from None
        if not isinstance(file_dict, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    overrides = overrides or {}
    profile = overrides.get("profile", file_dict.get("profile", "full"))
    merged = defaults(profile)
    _merge(merged, file_dict, "")
    _merge(merged, overrides, "")
    merged["profile"] = profile
    if merged["data"]["path"] is None and os.environ.get(DATA_ENV):
        merged["data"]["path"] = os.environ[DATA_ENV]
    cfg = from_dict(merged)
    if require_data:
        if not cfg.data.path:
            raise ConfigError(f"no dataset path: set data.path or ${DATA_ENV}")
    return cfg


_FINGERPRINT_EXCLUDE = {("output", "dir"), ("sweep", "jobs")}


def fingerprint(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for sec, key in _FINGERPRINT_EXCLUDE:
        d[sec].pop(key, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
