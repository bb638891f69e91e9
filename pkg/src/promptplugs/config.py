"""Run configuration: one JSON document describing a reproducible run.

A :class:`RunConfig` carries everything a command-line run needs — the
model shape, optimizer settings for pretraining and plugin training, data
sizes, seeds, the aspect list and plugin family, and the output directory.
Parsing is strict: unknown keys anywhere in the document are rejected, so a
typo in a config file fails loudly instead of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .fileio import canonical_json, config_hash
from .model import ModelConfig
from .plugins import KEY_DROP
from .taskgen import CANONICAL_ORDER

# Steps per aspect for plugin training.  Budgets differ because the task
# difficulty differs: rewriting every content token takes far more steps
# than prepending one marker.
DEFAULT_ASPECT_STEPS = {"shift": 10000, "mark": 2000, "order": 8000,
                        "keyword": 4000}


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one run; serializes to a single JSON document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    data_seed: int = 42
    family: str = "gated"
    aspects: tuple[str, ...] = tuple(CANONICAL_ORDER)
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    plugin_steps: dict = field(default_factory=lambda: dict(DEFAULT_ASPECT_STEPS))
    plugin_lr: float = 3e-3
    plugin_batch: int = 16
    key_drop: float = KEY_DROP
    joint_steps: int = 2000
    n_train: int = 4000
    n_heldout: int = 500
    n_eval: int = 300
    core_min: int = 3
    core_max: int = 6
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in ("prompt", "prefix", "gated"):
            raise ConfigError(f"unknown family {self.family!r}")
        unknown = [a for a in self.aspects if a not in CANONICAL_ORDER]
        if unknown:
            raise ConfigError(f"unknown aspects {unknown}")
        if len(set(self.aspects)) != len(self.aspects):
            raise ConfigError("duplicate aspects")
        for name, v in (("pretrain_steps", self.pretrain_steps),
                        ("pretrain_batch", self.pretrain_batch),
                        ("plugin_batch", self.plugin_batch),
                        ("joint_steps", self.joint_steps),
                        ("n_train", self.n_train), ("n_heldout", self.n_heldout),
                        ("n_eval", self.n_eval)):
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.plugin_steps, dict):
            raise ConfigError("plugin_steps must map aspect names to step counts")
        for a, s in self.plugin_steps.items():
            if a not in CANONICAL_ORDER:
                raise ConfigError(f"plugin_steps has unknown aspect {a!r}")
            if not isinstance(s, int) or isinstance(s, bool) or s <= 0:
                raise ConfigError(f"plugin_steps[{a!r}] must be a positive integer")
        missing = [a for a in self.aspects if a not in self.plugin_steps]
        if missing:
            raise ConfigError(f"plugin_steps missing aspects {missing}")
        for name, v in (("pretrain_lr", self.pretrain_lr),
                        ("plugin_lr", self.plugin_lr)):
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        kd = self.key_drop
        if not isinstance(kd, (int, float)) or isinstance(kd, bool) or not (0.0 <= kd < 1.0):
            raise ConfigError(f"key_drop must lie in [0, 1), got {kd!r}")
        if not (1 <= self.core_min <= self.core_max):
            raise ConfigError("need 1 <= core_min <= core_max")
        if not isinstance(self.out_dir, str) or not self.out_dir:
            raise ConfigError("out_dir must be a non-empty string")

    def steps_for(self, aspect: str) -> int:
        return self.plugin_steps[aspect]

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "seed": self.seed,
            "data_seed": self.data_seed,
            "family": self.family,
            "aspects": list(self.aspects),
            "pretrain_steps": self.pretrain_steps,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_batch": self.pretrain_batch,
            "plugin_steps": dict(sorted(self.plugin_steps.items())),
            "plugin_lr": self.plugin_lr,
            "plugin_batch": self.plugin_batch,
            "key_drop": self.key_drop,
            "joint_steps": self.joint_steps,
            "n_train": self.n_train,
            "n_heldout": self.n_heldout,
            "n_eval": self.n_eval,
            "core_min": self.core_min,
            "core_max": self.core_max,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        kwargs = dict(raw)
        if "model" in kwargs:
            try:
                kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad model config: {exc}") from exc
        if "aspects" in kwargs:
            if not isinstance(kwargs["aspects"], list):
                raise ConfigError("aspects must be a JSON array")
            kwargs["aspects"] = tuple(kwargs["aspects"])
        for key in ("seed", "data_seed"):
            if key in kwargs and (not isinstance(kwargs[key], int)
                                  or isinstance(kwargs[key], bool)):
                raise ConfigError(f"{key} must be an integer")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)
