"""Deterministic synthetic datasets, splits, corruptions and batching.

This module provides:
- Gaussian-blob classification data with optional minority subgroups
- Stratified train/validation (and test) splits
- Severity-graded input corruptions for out-of-distribution evaluation
- Seed derivation and batch iteration shared by the training loop
- CSV import of external feature tables
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.datasets import make_blobs
from sklearn.model_selection import StratifiedShuffleSplit

from .errors import ConfigError, SplitError

logger = logging.getLogger(__name__)

CorruptionKind = Literal["gaussian_noise", "uniform_noise", "feature_dropout", "affine_shift"]

CORRUPTION_KINDS: Tuple[str, ...] = (
    "gaussian_noise",
    "uniform_noise",
    "feature_dropout",
    "affine_shift",
)

# severity 1..5 -> magnitude; noise/shift levels are multiples of the feature
# standard deviation, dropout levels are drop probabilities
SEVERITY_LEVELS: Dict[str, Tuple[float, ...]] = {
    "gaussian_noise": (0.08, 0.16, 0.28, 0.4, 0.6),
    "uniform_noise": (0.1, 0.2, 0.35, 0.5, 0.75),
    "feature_dropout": (0.05, 0.1, 0.2, 0.3, 0.45),
    "affine_shift": (0.1, 0.2, 0.3, 0.45, 0.6),
}


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one reproducible 64-bit seed."""
    sequence = np.random.SeedSequence([int(key) for key in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _sklearn_state(seed: int) -> int:
    # scikit-learn only accepts 32-bit seeds
    return int(np.random.SeedSequence(int(seed)).generate_state(1)[0])


@dataclass
class Dataset:
    """Feature matrix, class labels and optional subgroup labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    seed: int = 0
    subgroup: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigError(f"dataset '{self.name}' needs a non-empty [n, d] input matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(f"dataset '{self.name}' has mismatched label count")
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigError(f"dataset '{self.name}' contains non-finite inputs")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"dataset '{self.name}' has labels outside [0, {self.num_classes})")
        if self.subgroup is not None:
            self.subgroup = np.asarray(self.subgroup, dtype=np.int64)
            if self.subgroup.shape != self.labels.shape:
                raise ConfigError(f"dataset '{self.name}' has mismatched subgroup count")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def num_subgroups(self) -> int:
        return 0 if self.subgroup is None else int(self.subgroup.max()) + 1

    def take(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(
            inputs=self.inputs[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            name=name or self.name,
            seed=self.seed,
            subgroup=None if self.subgroup is None else self.subgroup[indices],
        )


@dataclass
class Batch:
    indices: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray


class CorruptionSpec(BaseModel):
    """Corruption family member; `scale` multiplies the severity magnitude."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: CorruptionKind
    severity: int = Field(ge=1, le=5)
    scale: float = Field(default=1.0, ge=0.0)


# ---------------------------------------------------------------
# Generation and import
# ---------------------------------------------------------------
def gen_blobs(  # pylint: disable=too-many-arguments
    num_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed: int,
    subgroup_skew: Optional[float] = None,
    subgroup_shift: float = 1.5,
    center_box: Tuple[float, float] = (-5.0, 5.0),
    name: str = "blobs",
) -> Dataset:
    """Gaussian clusters, one per class, with class centres drawn from `seed`.

    With `subgroup_skew=p`, round(p * n_per_class) samples of every class form
    the minority subgroup 1; they are displaced by a class-specific offset of
    norm about `subgroup_shift * sqrt(dim)` so they are harder to classify.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least two classes, got {num_classes}")
    if dim < 1 or n_per_class < 1:
        raise ConfigError("dim and n_per_class must be >= 1")
    if spread < 0:
        raise ConfigError(f"spread must be >= 0, got {spread}")

    inputs, labels = make_blobs(
        n_samples=[n_per_class] * num_classes,
        n_features=dim,
        cluster_std=spread,
        center_box=center_box,
        shuffle=False,
        random_state=_sklearn_state(seed),
    )

    rng = np.random.default_rng(derive_seed(seed, 1))
    subgroup = None
    if subgroup_skew is not None:
        if not 0.0 <= subgroup_skew < 1.0:
            raise ConfigError(f"subgroup_skew must be in [0, 1), got {subgroup_skew}")
        subgroup = np.zeros(labels.shape[0], dtype=np.int64)
        minority_count = int(round(subgroup_skew * n_per_class))
        for class_index in range(num_classes):
            members = np.flatnonzero(labels == class_index)
            chosen = rng.choice(members, size=minority_count, replace=False)
            offset = rng.normal(0.0, subgroup_shift, size=dim)
            inputs[chosen] += offset
            subgroup[chosen] = 1

    order = rng.permutation(labels.shape[0])
    logger.debug("generated %d blob samples (%d classes, dim %d)", labels.shape[0], num_classes, dim)
    return Dataset(
        inputs=inputs[order],
        labels=labels[order],
        num_classes=num_classes,
        name=name,
        seed=int(seed),
        subgroup=None if subgroup is None else subgroup[order],
    )


def load_csv(path: Path, name: Optional[str] = None, seed: int = 0) -> Dataset:
    """Read a table whose header holds the feature columns, `label` and optionally `subgroup`."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or "label" not in reader.fieldnames:
            raise ConfigError(f"{path}: CSV header must contain a 'label' column")
        feature_columns = [c for c in reader.fieldnames if c not in ("label", "subgroup")]
        has_subgroup = "subgroup" in reader.fieldnames
        rows = list(reader)
    if not rows or not feature_columns:
        raise ConfigError(f"{path}: CSV needs at least one feature column and one row")

    try:
        inputs = np.array([[float(row[c]) for c in feature_columns] for row in rows])
        labels = np.array([int(row["label"]) for row in rows])
        subgroup = np.array([int(row["subgroup"]) for row in rows]) if has_subgroup else None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed value ({exc})") from exc
    return Dataset(
        inputs=inputs,
        labels=labels,
        num_classes=int(labels.max()) + 1,
        name=name or path.stem,
        seed=seed,
        subgroup=subgroup,
    )


# ---------------------------------------------------------------
# Splits
# ---------------------------------------------------------------
def split_train_val(data: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified, deterministic partition into (train, validation)."""
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val_fraction must be in (0, 1), got {val_fraction}")
    class_counts = np.bincount(data.labels, minlength=data.num_classes)
    sparse_classes = [int(c) for c in np.flatnonzero((class_counts > 0) & (class_counts < 2))]
    if sparse_classes:
        raise SplitError(f"classes {sparse_classes} have fewer than 2 samples")

    splitter = StratifiedShuffleSplit(
        n_splits=1, test_size=val_fraction, random_state=_sklearn_state(seed)
    )
    try:
        train_index, val_index = next(splitter.split(np.zeros(data.size), data.labels))
    except ValueError as exc:
        raise SplitError(str(exc)) from exc
    return (
        data.take(np.sort(train_index), name=f"{data.name}-train"),
        data.take(np.sort(val_index), name=f"{data.name}-val"),
    )


def split_train_test_val(
    data: Dataset, test_fraction: float, val_fraction: float, seed: int
) -> Tuple[Dataset, Dataset, Dataset]:
    """Hold out a test set, then carve the validation set out of the rest."""
    remainder, test = split_train_val(data, test_fraction, derive_seed(seed, 0))
    train, val = split_train_val(remainder, val_fraction, derive_seed(seed, 1))
    return (
        replace(train, name=f"{data.name}-train"),
        replace(val, name=f"{data.name}-val"),
        replace(test, name=f"{data.name}-test"),
    )


# ---------------------------------------------------------------
# Corruptions and batching
# ---------------------------------------------------------------
def corrupt(data: Dataset, spec: CorruptionSpec) -> Dataset:
    """Perturb the inputs with a severity-scaled corruption; labels are untouched."""
    level = SEVERITY_LEVELS[spec.kind][spec.severity - 1] * spec.scale
    rng = np.random.default_rng(
        derive_seed(data.seed, CORRUPTION_KINDS.index(spec.kind), spec.severity)
    )
    inputs = data.inputs.astype(np.float64)
    feature_std = inputs.std(axis=0)
    feature_std = np.where(feature_std > 0, feature_std, 1.0)

    if spec.kind == "gaussian_noise":
        corrupted = inputs + rng.normal(size=inputs.shape) * (level * feature_std)
    elif spec.kind == "uniform_noise":
        corrupted = inputs + rng.uniform(-1.0, 1.0, size=inputs.shape) * (level * feature_std)
    elif spec.kind == "feature_dropout":
        corrupted = inputs * (rng.random(inputs.shape) >= level)
    else:
        direction = rng.choice([-1.0, 1.0], size=inputs.shape[1])
        corrupted = inputs * (1.0 + level) + direction * (level * feature_std)

    return Dataset(
        inputs=corrupted,
        labels=data.labels.copy(),
        num_classes=data.num_classes,
        name=f"{data.name}-{spec.kind}-s{spec.severity}",
        seed=data.seed,
        subgroup=None if data.subgroup is None else data.subgroup.copy(),
    )


def batches(data: Dataset, batch_size: int, seed: int, fixed_order: bool) -> List[Batch]:
    """Split `data` into batches; the last partial batch is kept.

    `fixed_order=True` yields the canonical index order regardless of `seed`,
    otherwise the order is a permutation drawn from `seed`.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if fixed_order:
        order = np.arange(data.size)
    else:
        order = np.random.default_rng(seed).permutation(data.size)
    return [
        Batch(indices=chunk, inputs=data.inputs[chunk], labels=data.labels[chunk])
        for chunk in (order[start : start + batch_size] for start in range(0, data.size, batch_size))
    ]
