"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from .alphabet import Alphabet
from .augment import AugmentationConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


# config-file spelling -> attribute name (``lambda`` is a Python keyword)
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


@dataclass
class RunConfig:
    preset: str = "toy"
    num_control_points: int = 10
    alphabet: str = "digits"
    lam: float = 0.1
    batch_size: int = 32
    total_steps: int = 2000
    seed: int = 0
    train_dir: str = ""
    test_dir: str = ""
    out_dir: str = "run"
    eval_every: int = 500
    eval_batch_size: int = 100
    checkpoint_every: int = 0
    max_label_len: int = 5
    m_max: int = 0
    precision: str = "float32"
    branches: str = "dual"
    use_rectifier: bool = True
    use_attention: bool = True
    augment_rotation: bool = True
    augment_elastic: bool = True
    augment_color: bool = True
    rotate_tall: bool = True
    prefetch: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.preset not in ("toy", "full"):
            raise ConfigError(f"preset must be 'toy' or 'full', got {self.preset!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.branches not in ("dual", "ctc", "attn"):
            raise ConfigError(f"branches must be dual, ctc or attn, got {self.branches!r}")
        for name in ("batch_size", "total_steps", "max_label_len", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_control_points < 4 or self.num_control_points % 2:
            raise ConfigError("num_control_points must be even and >= 4")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be a finite non-negative number, got {self.lam}")
        if self.m_max and self.m_max < self.max_label_len + 1:
            raise ConfigError("m_max must leave room for the end symbol")

    # derived views --------------------------------------------------------
    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def effective_lambda(self) -> float:
        """Weight on the CTC loss; a CTC-only model trains on the CTC loss alone."""
        return {"dual": self.lam, "attn": 0.0, "ctc": 1.0}[self.branches]

    def make_alphabet(self) -> Alphabet:
        return Alphabet.from_spec(self.alphabet)

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.preset, num_control_points=self.num_control_points,
                                  max_label_len=self.max_label_len, max_decode_steps=self.m_max,
                                  use_rectifier=self.use_rectifier, branches=self.branches,
                                  use_attention=self.use_attention)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(rotation=self.augment_rotation, elastic=self.augment_elastic,
                                  color=self.augment_color, rotate_tall=self.rotate_tall)

    # (de)serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {_REVERSE.get(f.name, f.name): getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in values.items():
            name = _ALIASES.get(key, key)
            if name not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(key, raw, kinds[name])
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            values[key] = value
        values.update(overrides or {})
        return cls.from_dict(values)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), overrides)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(key: str, raw, kind: str):
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw
