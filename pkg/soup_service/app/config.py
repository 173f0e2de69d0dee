"""Configuration module for the sparse soup service.

This module provides:
- Process settings (`Settings`) loaded from environment variables or `.env`,
  exposed as the global `settings` instance
- The experiment configuration schema (`ExperimentConfig`); unknown keys are
  rejected everywhere
- `load_config` for TOML files and `config_hash` for provenance
"""

from __future__ import annotations

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings

from .data import CORRUPTION_KINDS, CorruptionKind
from .errors import ConfigError
from .schedules import LrPiece, OriginalCurve, RetrainVariant

Method = Literal[
    "sms", "imp", "imp_mx", "imp_mphases", "imp_reprune", "oneshot", "bimp", "gmp", "dpf"
]
ReplicaAxis = Literal["seed", "weight_decay", "retrain_epochs", "initial_lr"]

DST_METHODS = ("bimp", "gmp", "dpf")


class Settings(BaseSettings):
    """Process configuration loaded from environment variables."""

    threads: int = 4
    log_level: str = "INFO"
    default_out_dir: str = "runs"

    class Config:  # pylint: disable=too-few-public-methods
        """Internal Pydantic configuration for loading environment variables."""

        env_file = ".env"
        env_prefix = "SPARSESOUP_"


# Global settings instance used throughout the service
settings = Settings()


class DatasetConfig(BaseModel):
    """Where the samples come from and how they are split and corrupted."""

    model_config = ConfigDict(extra="forbid")

    source: Literal["blobs", "csv"] = "blobs"
    path: Optional[Path] = None
    data_seed: int = Field(default=0, ge=0)
    num_classes: int = Field(default=10, ge=2)
    dim: int = Field(default=2, ge=1)
    n_per_class: int = Field(default=200, ge=2)
    spread: float = Field(default=1.0, ge=0.0)
    subgroup_skew: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    corruption_kinds: List[CorruptionKind] = Field(default_factory=lambda: list(CORRUPTION_KINDS))
    severities: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    corruption_scale: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetConfig":
        if self.source == "csv" and self.path is None:
            raise ValueError("dataset.path is required when source = 'csv'")
        if any(not 1 <= level <= 5 for level in self.severities):
            raise ValueError("severities must lie in 1..5")
        return self


class ArchConfig(BaseModel):
    """Hidden widths; input and output sizes come from the dataset."""

    model_config = ConfigDict(extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    batchnorm: bool = True
    prune_classifier: bool = True

    @model_validator(mode="after")
    def _check_widths(self) -> "ArchConfig":
        if any(width < 1 for width in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        return self


class PretrainConfig(BaseModel):
    """Dense training; for pruning-during-training methods this is the whole budget."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=64, ge=1)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    peak_lr: float = Field(default=0.1, gt=0.0)
    final_lr: float = Field(default=0.001, ge=0.0)
    shape: Literal["linear", "piecewise", "constant"] = "linear"
    pieces: List[LrPiece] = Field(default_factory=list)
    warmup_epochs: int = Field(default=0, ge=0)

    def original_curve(self) -> OriginalCurve:
        return OriginalCurve(
            epochs=max(1, self.epochs),
            peak_lr=self.peak_lr,
            final_lr=self.final_lr,
            shape=self.shape,
            pieces=self.pieces,
            warmup_epochs=self.warmup_epochs,
        )


class PruningConfig(BaseModel):
    """Prune-retrain phases and how the replicas of each phase differ."""

    model_config = ConfigDict(extra="forbid")

    target_sparsity: float = Field(default=0.9, gt=0.0, lt=1.0)
    phases: int = Field(default=3, ge=1)
    retrain_epochs: int = Field(default=5, ge=1)
    schedule: RetrainVariant = "ALLR"
    initial_lr: Optional[float] = Field(default=None, gt=0.0)
    weight_decay: Optional[float] = Field(default=None, ge=0.0)
    m: int = Field(default=3, ge=1)
    m_per_phase: Optional[List[int]] = None
    merge: Literal["uniform", "greedy"] = "uniform"
    pruning: Literal["unstructured_global", "structured_row"] = "unstructured_global"
    vary: ReplicaAxis = "seed"
    weight_decay_grid: List[float] = Field(default_factory=lambda: [1e-4, 5e-5, 1e-5])
    retrain_epochs_grid: List[int] = Field(default_factory=lambda: [3, 5, 8])
    initial_lr_grid: List[float] = Field(default_factory=lambda: [0.1, 0.05, 0.01])

    @model_validator(mode="after")
    def _check_replicas(self) -> "PruningConfig":
        if self.m_per_phase is not None:
            if len(self.m_per_phase) != self.phases:
                raise ValueError("m_per_phase needs one entry per phase")
            if any(count < 1 for count in self.m_per_phase):
                raise ValueError("every m_per_phase entry must be >= 1")
        grids = {
            "weight_decay": self.weight_decay_grid,
            "retrain_epochs": self.retrain_epochs_grid,
            "initial_lr": self.initial_lr_grid,
        }
        if self.vary in grids and not grids[self.vary]:
            raise ValueError(f"{self.vary}_grid must not be empty when varying {self.vary}")
        if any(value < 1 for value in self.retrain_epochs_grid):
            raise ValueError("retrain_epochs_grid entries must be >= 1")
        if any(value < 0 for value in self.weight_decay_grid):
            raise ValueError("weight_decay_grid entries must be >= 0")
        if any(value <= 0 for value in self.initial_lr_grid):
            raise ValueError("initial_lr_grid entries must be > 0")
        return self

    def m_for_phase(self, phase_index: int) -> int:
        if self.m_per_phase is not None:
            return self.m_per_phase[phase_index]
        return self.m


class DstConfig(BaseModel):
    """Pruning during training (BIMP, GMP, DPF)."""

    model_config = ConfigDict(extra="forbid")

    num_prune_events: int = Field(default=9, ge=1)
    prune_end_fraction: float = Field(default=0.75, ge=0.0, le=1.0)
    bimp_pretrain_epochs: int = Field(default=10, ge=0)
    sms_enabled: bool = False
    sms_start_epoch: int = Field(default=0, ge=0)


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["sparsity", "epochs", "hparams"] = "sparsity"
    sparsities: List[float] = Field(default_factory=lambda: [0.5, 0.7, 0.8, 0.9, 0.95])
    epoch_budgets: List[int] = Field(default_factory=lambda: [1, 2, 5])
    axes: List[ReplicaAxis] = Field(
        default_factory=lambda: ["seed", "weight_decay", "retrain_epochs", "initial_lr"]
    )

    @model_validator(mode="after")
    def _check_grid(self) -> "SweepConfig":
        if any(not 0.0 < level < 1.0 for level in self.sparsities):
            raise ValueError("sweep sparsities must lie in (0, 1)")
        if any(budget < 1 for budget in self.epoch_budgets):
            raise ValueError("epoch budgets must be >= 1")
        return self


class ExperimentConfig(BaseModel):
    """Top-level experiment description read from a TOML file."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    method: Method = "sms"
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    out_dir: Optional[Path] = None
    parallel: int = Field(default=1, ge=1)
    bn_batch_size: int = Field(default=128, ge=1)
    save_checkpoints: bool = True
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    pruning: PruningConfig = Field(default_factory=PruningConfig)
    dst: DstConfig = Field(default_factory=DstConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _check_method(self) -> "ExperimentConfig":
        if any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be non-negative")
        if self.method in DST_METHODS and self.pretrain.epochs < 1:
            raise ValueError(f"method {self.method} needs pretrain.epochs >= 1 as its budget")
        if self.method == "bimp":
            cycle_epochs = self.pretrain.epochs - self.dst.bimp_pretrain_epochs
            if cycle_epochs < self.pruning.phases:
                raise ValueError("bimp needs at least one epoch per cycle after its dense segment")
        if self.method == "imp_reprune" and self.pruning.m < 2:
            raise ValueError("imp_reprune needs m >= 2")
        if self.method not in DST_METHODS and self._retrains_at_final_lr():
            if self.pretrain.original_curve().eta_T <= 0.0:
                raise ValueError(
                    f"schedule {self.pruning.schedule} retrains at the final learning rate, "
                    "so the original curve must end above 0"
                )
        return self

    def _retrains_at_final_lr(self) -> bool:
        # FT runs at eta_T throughout; ALLR falls back to eta_T when pruning costs no accuracy
        if self.pruning.schedule == "FT":
            return True
        return self.pruning.schedule == "ALLR" and self.pruning.initial_lr is None


def load_config(path: Path) -> ExperimentConfig:
    """Read and validate an experiment TOML file; every failure is a ConfigError."""
    path = Path(path)
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return parse_config(raw, source=str(path))


def parse_config(raw: dict, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def config_hash(config: ExperimentConfig) -> str:
    """sha256 over the canonical JSON form of the validated config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
