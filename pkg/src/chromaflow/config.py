"""Run configuration: one JSON document with every field defaulted.

Sections: ``data``, ``model``, ``train``, ``infer``, ``eval``, ``flow``.
Unknown sections or keys raise :class:`~chromaflow.errors.ConfigError`.
The ``CHROMAFLOW_SEED`` environment variable overrides both the data and the
training seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError
from .flow import FlowConfig
from .pipeline import InferConfig, ModelConfig, TrainConfig

SEED_ENV = "CHROMAFLOW_SEED"


@dataclass
class DataConfig:
    clips: int = 200
    seed: int = 7
    height: int = 64
    width: int = 64
    frames: int = 8
    texture_noise: float = 0.05


@dataclass
class EvalConfig:
    split: str = "test"
    diversity_threshold: float = 1e-3


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
            "infer": InferConfig, "eval": EvalConfig, "flow": FlowConfig}


def _coerce(cls, name: str, raw: Mapping[str, Any]):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key} must be a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be true or false")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{name}.{key} must be a string")
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    @classmethod
    def from_dict(cls, doc: Optional[Mapping[str, Any]]) -> "RunConfig":
        doc = dict(doc or {})
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        cfg = cls(**{name: _coerce(SECTIONS[name], name, doc.get(name, {})) for name in SECTIONS})
        return cfg.validate()

    def validate(self) -> "RunConfig":
        try:
            self.train.validate()
            self.infer.validate()
            self.flow.validate()
            self.train.diversity(self.model.d)
            self.train.confidence()
            self.train.knn()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.clips < 1 or self.data.frames < 1:
            raise ConfigError("data.clips and data.frames must be >= 1")
        if self.data.height % 4 or self.data.width % 4:
            raise ConfigError("data.height and data.width must be divisible by 4")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def override(self, section: str, **values) -> "RunConfig":
        """Apply non-None flag values on top of one section."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        doc = self.to_dict()
        doc[section].update(values)
        return RunConfig.from_dict(doc)

    def apply_env(self, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        return self.override("data", seed=seed).override("train", seed=seed)


def load_config(path=None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the JSON file (if any), then ``CHROMAFLOW_SEED``."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(doc).apply_env(environ)
