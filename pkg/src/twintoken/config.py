"""Experiment configuration: one JSON document covering dataset, model,
optimizer, objective and refinement choices, with cross-field validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .data import ShiftSpec, SyntheticTaskSpec
from .errors import ConfigurationError
from .model import ModelConfig

REFINEMENT_METHODS = ("kmeans", "knn")
REPRESENTATIONS = ("source_oriented", "target_oriented")
TRANSFER_METHODS = ("contrastive", "mmd", "mstn", "none")
CLASSIFIER_MODES = ("separate", "shared")
OBJECTIVE_MODES = ("separate", "shared")
LR_SCHEDULES = ("constant", "inv_decay")


def default_task() -> SyntheticTaskSpec:
    """The standard benchmark task: four bar-orientation classes with a
    calibrated style shift (partial inversion plus photometric jitter)."""
    return SyntheticTaskSpec(shift=ShiftSpec(
        invert=0.65, noise=0.08, brightness=0.1, contrast=1.2, rotation=0.15))


@dataclass
class RunConfig:
    dataset: SyntheticTaskSpec = field(default_factory=default_task)
    dataset_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    base_lr: float = 0.005
    classifier_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_schedule: str = "constant"
    batch_size: int = 32

    lam: float = 1.0
    tau: float = 0.1

    refinement_method: str = "kmeans"
    refinement_representation: str = "source_oriented"
    kmeans_rounds: int = 2
    knn_k: int = 5

    transfer_method: str = "contrastive"
    use_source_transfer: bool = True
    use_target_transfer: bool = True

    mask_enabled: bool = True
    classifier_mode: str = "separate"
    objective_mode: str = "separate"

    stage1_epochs: int = 20
    stage2_epochs: int = 30
    seed: int = 0
    out_dir: str | None = None

    def validate(self):
        if self.dataset_path is None:
            self.dataset.validate()
        self.model.validate()
        if self.dataset_path is None and self.dataset.num_classes != self.model.num_classes:
            raise ConfigurationError(
                f"dataset num_classes {self.dataset.num_classes} != model num_classes {self.model.num_classes}"
            )
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if self.classifier_lr_multiplier <= 0:
            raise ConfigurationError("classifier_lr_multiplier must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lam < 0:
            raise ConfigurationError(f"lam must be nonnegative, got {self.lam}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.refinement_method not in REFINEMENT_METHODS:
            raise ConfigurationError(f"refinement_method must be one of {REFINEMENT_METHODS}")
        if self.refinement_representation not in REPRESENTATIONS:
            raise ConfigurationError(f"refinement_representation must be one of {REPRESENTATIONS}")
        if self.kmeans_rounds < 1:
            raise ConfigurationError("kmeans_rounds must be >= 1")
        if self.knn_k < 1:
            raise ConfigurationError("knn_k must be >= 1")
        if self.transfer_method not in TRANSFER_METHODS:
            raise ConfigurationError(f"transfer_method must be one of {TRANSFER_METHODS}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ConfigurationError(f"classifier_mode must be one of {CLASSIFIER_MODES}")
        if self.objective_mode not in OBJECTIVE_MODES:
            raise ConfigurationError(f"objective_mode must be one of {OBJECTIVE_MODES}")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigurationError("stage epochs must be >= 1")

    # -- (de)serialization ----------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if "dataset" in d and isinstance(d["dataset"], dict):
            ds = dict(d["dataset"])
            shift = ds.pop("shift", {})
            if isinstance(shift, dict):
                shift = ShiftSpec(**shift)
            try:
                d["dataset"] = SyntheticTaskSpec(shift=shift, **ds)
            except TypeError as exc:
                raise ConfigurationError(f"dataset: {exc}") from exc
        if "model" in d and isinstance(d["model"], dict):
            try:
                d["model"] = ModelConfig(**d["model"])
            except TypeError as exc:
                raise ConfigurationError(f"model: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"{path}: cannot read config ({exc})") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: malformed JSON ({exc})") from exc
        return cls.from_dict(data)
