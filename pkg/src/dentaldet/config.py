"""Run configuration: one section per pipeline stage, loaded from JSON with ``key=value`` overrides.

Keys are dotted (``loss.w_bbox``, ``post.iou_thr`` ...). Files may be nested
(``{"loss": {"w_bbox": 7.5}}``) or flat (``{"loss.w_bbox": 7.5}``). Unknown
keys are rejected. ``DENTALDET_CONFIG`` names a default config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .augment import AugmentConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .network import ModelConfig
from .postprocess import PostConfig
from .training.assign import AssignerConfig
from .training.loop import TrainConfig
from .training.loss import LossWeights

ENV_VAR = "DENTALDET_CONFIG"


@dataclass(frozen=True)
class PrepConfig:
    merge_iou: float = 0.9
    pseudo_conf_min: float = 0.5
    pseudo_iou_max: float = 0.5


SECTIONS = {
    "model": ModelConfig,
    "loss": LossWeights,
    "assigner": AssignerConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "prep": PrepConfig,
    "post": PostConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    assigner: AssignerConfig = AssignerConfig()
    augment: AugmentConfig = AugmentConfig()
    train: TrainConfig = TrainConfig()
    prep: PrepConfig = PrepConfig()
    post: PostConfig = PostConfig()
    eval: EvalConfig = EvalConfig()

    def to_flat(self) -> Dict[str, Any]:
        out = {}
        for section in SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out

    def update(self, values: Dict[str, Any]) -> "RunConfig":
        grouped: Dict[str, Dict[str, Any]] = {}
        for key, value in _flatten(values).items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            allowed = {f.name for f in fields(SECTIONS[section])}
            if name not in allowed:
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(section, {})[name] = value
        changes = {}
        for section, vals in grouped.items():
            try:
                changes[section] = replace(getattr(self, section), **vals)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {section} settings {vals}: {exc}") from exc
        return replace(self, **changes)


def _flatten(values: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in values.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and "." not in key:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, _, raw = text.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the config file (``path`` or ``$DENTALDET_CONFIG``), then overrides."""
    cfg = RunConfig()
    path = path or os.environ.get(ENV_VAR)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = cfg.update(data)
    extra = dict(parse_override(o) for o in overrides)
    return cfg.update(extra) if extra else cfg
