"""Run configuration: one flat JSON document with every tunable setting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .model import EmbeddingConfig, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    data_path: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    # embedding
    d_f: int = 24
    d_a: int = 80
    steps_per_day: int = 288
    days_per_week: int = 7
    # model
    layers: int = 3
    heads: int = 4
    T: int = 12
    T_out: int = 12
    ff_width: int = 256
    activation: str = "relu"
    dropout: float = 0.0
    variant: str = "exact"
    landmark_strategy: str = "stcs"
    n_landmarks: int = 72
    n_clusters: int = 6
    sampling_iterations: int = 8
    pinv_iterations: int = 6
    # optimization
    lr: float = 0.001
    weight_decay: float = 0.0003
    batch_size: int = 16
    eval_batch_size: int = 64
    epochs: int = 30
    max_steps: int | None = None
    split: tuple[float, ...] = (0.7, 0.1, 0.2)

    def model_config(self, n_nodes: int) -> ModelConfig:
        emb = EmbeddingConfig(self.d_f, self.d_a, self.steps_per_day, self.days_per_week)
        try:
            return ModelConfig(
                n_nodes=n_nodes,
                T=self.T,
                T_out=self.T_out,
                layers=self.layers,
                heads=self.heads,
                ff_width=self.ff_width,
                activation=self.activation,
                dropout=self.dropout,
                variant=self.variant,
                landmark_strategy=self.landmark_strategy,
                n_landmarks=self.n_landmarks,
                n_clusters=self.n_clusters,
                sampling_iterations=self.sampling_iterations,
                pinv_iterations=self.pinv_iterations,
                embedding=emb,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            split=tuple(self.split),
            eval_batch_size=self.eval_batch_size,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        defaults = cls()
        values = {}
        for name, value in raw.items():
            values[name] = _coerce(name, value, getattr(defaults, name))
        cfg = cls(**values)
        cfg._validate()
        return cfg

    def _validate(self) -> None:
        positive = ("d_f", "d_a", "layers", "heads", "T", "T_out", "ff_width", "batch_size",
                    "eval_batch_size", "n_landmarks", "n_clusters", "sampling_iterations",
                    "pinv_iterations")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.variant not in ("exact", "nystrom"):
            raise ConfigError(f"variant must be 'exact' or 'nystrom', got {self.variant!r}")
        if self.landmark_strategy not in ("segment-means", "stcs"):
            raise ConfigError(f"landmark_strategy must be 'segment-means' or 'stcs'")
        if (3 * self.d_f + self.d_a) % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_h = 3*d_f + d_a")
        if not 0.0 <= self.dropout <= 0.5:
            raise ConfigError(f"dropout must lie in [0, 0.5], got {self.dropout}")

    def require(self, name: str) -> Any:
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"config field {name!r} is required")
        return value


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name in ("data_path", "max_steps") and value is None:
        return None
    if name == "split":
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError("split must be a list of numbers")
        return tuple(float(v) for v in value)
    if name == "max_steps" or isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw)
