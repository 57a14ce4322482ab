"""Validated configuration documents.

Configs are single JSON documents; unknown keys are errors so typos never
silently fall back to defaults.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .criteria import CRITERIA, DATA_FREE
from .errors import ConfigError

CriterionName = Literal[CRITERIA]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class PruneConfig(_Strict):
    criterion: CriterionName = "taylor"
    combine_lambda: float = Field(0.5, ge=0.0, le=1.0)
    mi_bins: int = Field(10, ge=2)
    obd_probes: int = Field(1, ge=1)
    obd_ema: float = Field(0.99, ge=0.0, lt=1.0)
    obd_warmup_batches: int = Field(0, ge=0)
    normalization: Literal["none", "l1", "l2", "minmax"] = "l2"
    flops_lambda: float = Field(0.0, ge=0.0)
    flops_unit: float = Field(1e6, gt=0.0)
    updates_between_prunes: int = Field(30, ge=0)
    lr: float = Field(1e-4, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(32, ge=1)
    target_maps: Optional[int] = Field(None, ge=1)
    target_flops: Optional[float] = Field(None, gt=0.0)
    max_iterations: Optional[int] = Field(None, ge=0)
    accuracy_floor: Optional[float] = Field(None, ge=0.0, le=1.0)
    prune_layers: Optional[list[int]] = None
    seed: int = Field(0, ge=0, lt=2 ** 64)  # replaced by the experiment seed when run from the CLI

    @model_validator(mode="after")
    def _check(self):
        stops = [n for n in ("target_maps", "target_flops", "max_iterations", "accuracy_floor")
                 if getattr(self, n) is not None]
        if len(stops) != 1:
            raise ValueError(f"exactly one stop rule must be set, got {stops or 'none'}")
        if self.updates_between_prunes == 0 and self.criterion not in DATA_FREE:
            raise ValueError(
                f"criterion {self.criterion!r} needs data: updates_between_prunes must be > 0"
            )
        return self

    @property
    def stop_rule(self):
        for n in ("target_maps", "target_flops", "max_iterations", "accuracy_floor"):
            if getattr(self, n) is not None:
                return n, getattr(self, n)


class ModelConfig(_Strict):
    channels: list[int] = Field(default_factory=lambda: [8, 16], min_length=1)
    kernel: int = 3


class DataConfig(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    classes: int = Field(8, ge=1)
    per_class: int = Field(60, ge=1)
    test_per_class: int = Field(30, ge=1)
    hw: int = 16
    noise: float = Field(0.1, ge=0.0)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx source needs train_images and train_labels")
        if self.source == "synthetic" and self.hw < 8:
            raise ValueError("synthetic hw must be >= 8")
        return self


class TrainConfig(_Strict):
    updates: int = Field(3000, ge=0)
    lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(32, ge=1)
    log_every: int = Field(100, ge=1)


class CorrelateConfig(_Strict):
    criteria: list[CriterionName] = Field(
        default_factory=lambda: ["weight", "activation_mean", "activation_std", "apoz", "taylor",
                                 "obd", "mutual_info", "random"]
    )
    random_draws: int = Field(32, ge=1)
    obd_batches: int = Field(200, ge=1)
    obd_probes: int = Field(10, ge=1)
    mi_bins: int = Field(10, ge=2)
    combination_grid: list[float] = Field(default_factory=list)
    batch_size: int = Field(32, ge=1)


class BaselineConfig(_Strict):
    layer: Optional[int] = None  # default: last conv layer
    gammas: list[float] = Field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 100.0])
    threshold: float = Field(1e-5, gt=0.0)
    updates: int = Field(300, ge=0)


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2 ** 64)  # fans out to every random stream
    model_path: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    prune: PruneConfig = Field(default_factory=lambda: PruneConfig(max_iterations=10))
    correlate: CorrelateConfig = Field(default_factory=CorrelateConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    oracle_split: Literal["train", "test"] = "train"


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(doc, cls=ExperimentConfig):
    try:
        return cls.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc)
