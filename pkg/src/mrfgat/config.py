"""
Experiment files: ``KEY=value`` text mapping onto the model, training and
augmentation dataclasses.

Keys are field names in upper case (``NEIGHBORS=8,16,24,32``); augmentation
fields carry an ``AUGMENT_`` prefix and ``AUGMENT=false`` disables
augmentation altogether. ``POINTS`` and ``FRACTION`` drive cache preparation.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Dict, List, Optional

from dotenv import dotenv_values

from .dataset import DEFAULT_POINTS, AugmentConfig
from .errors import ValidationError
from .model import MRFGATConfig
from .training import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_ints(value: str) -> tuple:
    return tuple(int(part) for part in value.split(",") if part.strip())


def _parse_optional_str(value: str) -> Optional[str]:
    return value or None


_MODEL_KEYS: Dict[str, Callable[[str], Any]] = {
    "neighbors": _parse_ints,
    "channels": _parse_ints,
    "shared_mlp": _parse_ints,
    "global_width": int,
    "head": _parse_ints,
    "num_classes": int,
    "leaky_slope": float,
    "keep_prob": float,
    "attention_batch_norm": _parse_bool,
    "edge_branch": _parse_bool,
    "share_transform": _parse_bool,
}

_TRAIN_KEYS: Dict[str, Callable[[str], Any]] = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "lr_decay": float,
    "lr_decay_every": int,
    "seed": int,
    "eval_every": int,
    "checkpoint_dir": _parse_optional_str,
    "log_path": _parse_optional_str,
    "workers": int,
    "knn": str,
}

_AUGMENT_KEYS: Dict[str, Callable[[str], Any]] = {
    "rotate": _parse_bool,
    "scale_low": float,
    "scale_high": float,
    "jitter_sigma": float,
    "jitter_clip": float,
}


@dataclass
class ExperimentConfig:
    model: MRFGATConfig = field(default_factory=MRFGATConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    points: int = DEFAULT_POINTS
    fraction: Optional[float] = None
    source: Optional[str] = None


def packaged_configs() -> List[str]:
    directory = resources.files("mrfgat") / "configs"
    return sorted(
        entry.name[: -len(".cfg")] for entry in directory.iterdir() if entry.name.endswith(".cfg")
    )


def resolve_config_path(name_or_path: str) -> str:
    """A bare name selects a packaged experiment; anything else is a file path."""
    if os.path.sep not in name_or_path and not name_or_path.endswith(".cfg"):
        packaged = resources.files("mrfgat") / "configs" / f"{name_or_path}.cfg"
        if packaged.is_file():
            return str(packaged)
        raise ValidationError(
            f"unknown experiment {name_or_path!r}; packaged experiments: {', '.join(packaged_configs())}"
        )
    if not os.path.isfile(name_or_path):
        raise ValidationError(f"experiment file not found: {name_or_path}")
    return name_or_path


def _convert(key: str, value: Optional[str], parser: Callable[[str], Any]) -> Any:
    try:
        return parser(value or "")
    except ValueError as error:
        raise ValidationError(f"{key}: {error}") from error


def parse_experiment(values: Dict[str, Optional[str]], source: Optional[str] = None) -> ExperimentConfig:
    """Build an experiment from already-read ``KEY -> value`` pairs."""
    model: Dict[str, Any] = {}
    train: Dict[str, Any] = {}
    augment: Dict[str, Any] = {}
    augment_enabled = True
    points = DEFAULT_POINTS
    fraction = None
    for raw_key, value in values.items():
        key = raw_key.strip().lower()
        if key == "points":
            points = _convert(raw_key, value, int)
        elif key == "fraction":
            fraction = _convert(raw_key, value, float)
        elif key == "augment":
            augment_enabled = _convert(raw_key, value, _parse_bool)
        elif key.startswith("augment_") and key[len("augment_"):] in _AUGMENT_KEYS:
            name = key[len("augment_"):]
            augment[name] = _convert(raw_key, value, _AUGMENT_KEYS[name])
        elif key in _MODEL_KEYS:
            model[key] = _convert(raw_key, value, _MODEL_KEYS[key])
        elif key in _TRAIN_KEYS:
            train[key] = _convert(raw_key, value, _TRAIN_KEYS[key])
        else:
            where = f" in {source}" if source else ""
            raise ValidationError(f"unknown experiment key {raw_key!r}{where}")
    train["augment"] = AugmentConfig(**augment) if augment_enabled else None
    return ExperimentConfig(
        model=MRFGATConfig(**model),
        train=TrainConfig(**train),
        points=points,
        fraction=fraction,
        source=source,
    )


def load_experiment(name_or_path: Optional[str]) -> ExperimentConfig:
    """Load an experiment by packaged name or path; ``None`` gives the defaults."""
    if name_or_path is None:
        return ExperimentConfig()
    path = resolve_config_path(name_or_path)
    return parse_experiment(dotenv_values(path), source=path)


def with_overrides(config: Any, **overrides: Any) -> Any:
    """A copy of a config dataclass with the non-``None`` overrides applied."""
    changes = {key: value for key, value in overrides.items() if value is not None}
    return dataclasses.replace(config, **changes) if changes else config
