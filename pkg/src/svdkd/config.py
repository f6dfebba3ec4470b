"""Experiment configuration: a versioned, JSON-serialisable description of one run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .data import AugmentConfig, DatasetError, dataset_root, load_cifar, subset_labels, synthetic_splits
from .training import TrainConfig

CONFIG_VERSION = 1
DATASET_KINDS = ("synthetic", "cifar")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 10
    per_class_train: int = 100
    per_class_test: int = 50
    seed: int = 0
    root: str = ""

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.classes < 2 or self.per_class_train < 1 or self.per_class_test < 1:
            raise ConfigError("dataset needs classes >= 2 and at least one sample per class per split")


@dataclass
class ExperimentConfig:
    """Everything that determines a run once the seed is fixed."""

    version: int = CONFIG_VERSION
    run_id: str = "run"
    out_dir: str = "runs"
    teacher_model: str = "tiny-vgg-T"
    student_model: str = "tiny-vgg-S"
    teacher_epochs: int = 15
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    def validate(self) -> None:
        from .models import PRESETS

        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} is not supported (expected {CONFIG_VERSION})")
        for name in (self.teacher_model, self.student_model):
            if name not in PRESETS:
                raise ConfigError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}")
        if self.teacher_epochs < 0:
            raise ConfigError("teacher_epochs must be >= 0")
        if not self.run_id or "/" in self.run_id:
            raise ConfigError(f"run_id must be a non-empty name without '/', got {self.run_id!r}")
        self.dataset.validate()
        try:
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def desk_preset() -> ExperimentConfig:
    """Scaled-down synthetic setting that runs a full comparison in minutes on one CPU."""
    train = TrainConfig(epochs=15, batch_size=64, lr_drop_every=9, beta=1.0)
    return ExperimentConfig(train=train)


def full_preset() -> ExperimentConfig:
    """Full-scale setting (CIFAR-100, 200 epochs); far beyond desk scale."""
    return ExperimentConfig(teacher_epochs=200, dataset=DatasetConfig(kind="cifar", classes=100))


PRESETS = {"desk": desk_preset, "full": full_preset}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where + key + ".")
        else:
            out[key] = val
    return out


def from_dict(d: Dict[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    base = base or desk_preset()
    merged = _merge(base.to_dict(), d)
    try:
        cfg = ExperimentConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None
    cfg.validate()
    return cfg


def load_config(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not valid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return from_dict(d, base)


def field_paths(obj=None, prefix: str = ""):
    """Yield ``(dotted_path, default_value)`` for every leaf config field."""
    obj = ExperimentConfig() if obj is None else obj
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            yield from field_paths(val, prefix + f.name + ".")
        else:
            yield prefix + f.name, val


def set_path(d: dict, path: str, value) -> None:
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_datasets(cfg: ExperimentConfig):
    """Train/test splits for ``cfg``; the label subset is applied to the training split."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train, test = synthetic_splits(ds.classes, ds.per_class_train, ds.per_class_test, ds.seed)
    else:
        root = ds.root or dataset_root()
        if not root:
            raise DatasetError("dataset.kind=cifar needs dataset.root or SVDKD_DATA_ROOT")
        train, test = load_cifar(root)
    if cfg.train.label_fraction < 1.0:
        train = subset_labels(train, cfg.train.label_fraction, ds.seed)
    return train, test


__all__ = [
    "AugmentConfig", "CONFIG_VERSION", "ConfigError", "DatasetConfig", "ExperimentConfig", "PRESETS",
    "desk_preset", "field_paths", "from_dict", "load_config", "load_datasets", "full_preset", "set_path",
]
