"""Pruning masks, per-phase sparsity arithmetic and the gradual pruning ramp.

Masks store `True` for kept coordinates. Only dense weight matrices are ever
pruned; biases and batch-norm parameters stay dense.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, ScheduleError, ShapeMismatchError, SparsityError
from .nn_core import ModelState

logger = logging.getLogger(__name__)

# absorbs binary representation error of decimal sparsities such as 0.95 * 4800
COUNT_TOLERANCE = 1e-9


def pruned_count(sparsity: float, total: int) -> int:
    """Number of coordinates a sparsity of `sparsity` prunes out of `total`."""
    return min(total, max(0, math.floor(sparsity * total + COUNT_TOLERANCE)))


@dataclass
class Mask:
    """Boolean keep-pattern for every prunable weight tensor."""

    tensors: Dict[str, np.ndarray]

    @classmethod
    def full(cls, model: ModelState) -> "Mask":
        return cls({name: np.ones(w.shape, dtype=bool) for name, w in model.prunable_weights().items()})

    @classmethod
    def from_zeros(cls, model: ModelState) -> "Mask":
        """Mask whose pruned set is exactly the stored zeros of the model."""
        return cls({name: w != 0 for name, w in model.prunable_weights().items()})

    @property
    def kept(self) -> int:
        return int(sum(int(keep.sum()) for keep in self.tensors.values()))

    @property
    def total(self) -> int:
        return int(sum(keep.size for keep in self.tensors.values()))

    @property
    def pruned(self) -> int:
        return self.total - self.kept

    @property
    def sparsity(self) -> float:
        return self.pruned / self.total if self.total else 0.0

    def pruned_set(self) -> Dict[str, np.ndarray]:
        """Flat indices of the pruned coordinates of every tensor."""
        return {name: np.flatnonzero(~keep) for name, keep in self.tensors.items()}

    def copy(self) -> "Mask":
        return Mask({name: keep.copy() for name, keep in self.tensors.items()})

    def equals(self, other: "Mask") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(keep, other.tensors[name]) for name, keep in self.tensors.items()
        )

    def is_superset_of(self, other: "Mask") -> bool:
        """True when every coordinate pruned by `other` is pruned here as well."""
        return all(
            not np.any(keep & ~other.tensors[name]) for name, keep in self.tensors.items()
        )

    def check_congruent(self, model: ModelState) -> None:
        weights = model.prunable_weights()
        if weights.keys() != self.tensors.keys():
            raise ShapeMismatchError(
                f"mask tensors {sorted(self.tensors)} do not match model {sorted(weights)}"
            )
        for name, weight in weights.items():
            if weight.shape != self.tensors[name].shape:
                raise ShapeMismatchError(
                    f"mask shape {self.tensors[name].shape} != weight shape {weight.shape} for {name}"
                )


class SparsityPlan(BaseModel):
    """Target sparsity reached after `phases` prune-retrain cycles."""

    model_config = ConfigDict(extra="forbid")

    target_sparsity: float = Field(gt=0.0, lt=1.0)
    phases: int = Field(ge=1)
    cumulative: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _fill_cumulative(self) -> "SparsityPlan":
        if not self.cumulative:
            self.cumulative = phase_sparsities(self.target_sparsity, self.phases)
        elif len(self.cumulative) != self.phases:
            raise ValueError("cumulative must list one sparsity per phase")
        return self


def phase_sparsities(target: float, phases: int) -> List[float]:
    """Cumulative sparsity after each phase: s_k = 1 - (1 - target)^(k/K)."""
    if not 0.0 < target < 1.0:
        raise SparsityError(f"target sparsity must be in (0, 1), got {target}")
    if phases < 1:
        raise SparsityError(f"need at least one phase, got {phases}")
    levels = [1.0 - (1.0 - target) ** (k / phases) for k in range(1, phases + 1)]
    levels[-1] = target
    return levels


def magnitude_mask(
    model: ModelState, cumulative_sparsity: float, prev_mask: Optional[Mask] = None
) -> Mask:
    """Global magnitude mask pruning floor(s * total) weights.

    All prunable tensors are ranked jointly by |w|; coordinates already pruned
    by `prev_mask` are ranked first so the pruned set only grows. Equal
    magnitudes resolve by (tensor order, flat index).
    """
    weights = model.prunable_weights()
    previous = prev_mask if prev_mask is not None else Mask.full(model)
    previous.check_congruent(model)
    if not 0.0 <= cumulative_sparsity <= 1.0:
        raise SparsityError(f"sparsity must be in [0, 1], got {cumulative_sparsity}")

    total = previous.total
    count = pruned_count(cumulative_sparsity, total)
    if count < previous.pruned:
        raise SparsityError(
            f"requested sparsity {cumulative_sparsity:.6f} is below the mask's {previous.sparsity:.6f}"
        )

    scores = np.concatenate([np.abs(w).astype(np.float64).ravel() for w in weights.values()])
    already_pruned = np.concatenate([~keep.ravel() for keep in previous.tensors.values()])
    scores[already_pruned] = -np.inf
    order = np.argsort(scores, kind="stable")
    keep_flat = np.ones(total, dtype=bool)
    keep_flat[order[:count]] = False

    tensors: Dict[str, np.ndarray] = {}
    offset = 0
    for name, weight in weights.items():
        tensors[name] = keep_flat[offset : offset + weight.size].reshape(weight.shape)
        offset += weight.size
    logger.debug("magnitude mask: pruned %d of %d weights", count, total)
    return Mask(tensors)


def filter_mask(
    model: ModelState, sparsity: float, prev_mask: Optional[Mask] = None
) -> Mask:
    """Structured mask removing floor(s * rows) output rows of smallest L2 norm per layer.

    Rows already pruned by `prev_mask` are ranked first; ties resolve towards
    the lower row index.
    """
    if not 0.0 <= sparsity < 1.0:
        raise SparsityError(f"structured sparsity must be in [0, 1), got {sparsity}")
    if prev_mask is not None:
        prev_mask.check_congruent(model)

    tensors: Dict[str, np.ndarray] = {}
    for name, weight in model.prunable_weights().items():
        rows = weight.shape[0]
        norms = np.sqrt(np.square(weight.astype(np.float64)).sum(axis=1))
        keep = np.ones(weight.shape, dtype=bool)
        if prev_mask is not None:
            keep &= prev_mask.tensors[name]
            norms[~prev_mask.tensors[name].any(axis=1)] = -np.inf
        pruned_rows = np.argsort(norms, kind="stable")[: pruned_count(sparsity, rows)]
        keep[pruned_rows, :] = False
        tensors[name] = keep
    return Mask(tensors)


def apply_mask(model: ModelState, mask: Mask) -> ModelState:
    """Copy of `model` with every masked coordinate set to exactly 0.0."""
    mask.check_congruent(model)
    masked = model.copy()
    for name, weight in masked.prunable_weights().items():
        weight[~mask.tensors[name]] = 0.0
    return masked


def sparsity_of(target: Union[Mask, ModelState]) -> float:
    """Masked fraction of a mask, or fraction of exact zeros among prunable weights."""
    if isinstance(target, Mask):
        return target.sparsity
    weights = list(target.prunable_weights().values())
    total = sum(w.size for w in weights)
    if total == 0:
        return 0.0
    zeros = sum(int(np.count_nonzero(w == 0)) for w in weights)
    return zeros / total


def gmp_target_at(step: int, total_steps: int, s_final: float, num_prune_events: int) -> float:
    """Cubic gradual-pruning target after the events that happened up to `step`.

    Events are spread uniformly over `total_steps`; after the j-th of n events
    the target is s_final * (1 - (1 - j/n)^3).
    """
    if num_prune_events < 1:
        raise ConfigError(f"num_prune_events must be >= 1, got {num_prune_events}")
    if not 0 <= step <= total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        events_done = num_prune_events
    else:
        events_done = (step * num_prune_events) // total_steps
    return s_final * (1.0 - (1.0 - events_done / num_prune_events) ** 3)


def gmp_event_steps(total_steps: int, num_prune_events: int) -> List[int]:
    """Distinct global steps at which prune events fire: ceil(j * H / n), j = 1..n."""
    if num_prune_events < 1:
        raise ConfigError(f"num_prune_events must be >= 1, got {num_prune_events}")
    steps = {
        -(-(j * total_steps) // num_prune_events) for j in range(1, num_prune_events + 1)
    }
    return sorted(steps)
