"""Learning-rate schedules for pretraining and for retraining after pruning.

`OriginalCurve` is the schedule the dense network is trained with; the six
retraining variants of `RetrainSchedule` transpose it onto a retraining
budget of `retrain_epochs` epochs. Every schedule answers
`lr_at(step, steps_per_epoch)`, resolved per step.
"""

from __future__ import annotations

import math
from typing import List, Literal, Optional, Protocol

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ScheduleError

WARMUP_FRACTION = 0.05

RetrainVariant = Literal["FT", "LRW", "SLR", "CLR", "LLR", "ALLR"]


class LearningRateSchedule(Protocol):  # pylint: disable=too-few-public-methods
    def lr_at(self, step: int, steps_per_epoch: int) -> float: ...


class LrPiece(BaseModel):
    """Constant `lr` up to and including the 1-based epoch `last_epoch`."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    last_epoch: int = Field(ge=1)
    lr: float = Field(ge=0.0)


class OriginalCurve(BaseModel):
    """The original training schedule (eta_t) over `epochs` = T epochs."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(ge=1)
    peak_lr: float = Field(gt=0.0)
    final_lr: float = Field(default=0.0, ge=0.0)
    shape: Literal["linear", "piecewise", "constant"] = "linear"
    pieces: List[LrPiece] = Field(default_factory=list)
    warmup_epochs: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_pieces(self) -> "OriginalCurve":
        if self.shape == "piecewise":
            if not self.pieces:
                raise ValueError("piecewise curve needs at least one piece")
            ends = [piece.last_epoch for piece in self.pieces]
            if ends != sorted(ends) or len(set(ends)) != len(ends):
                raise ValueError("pieces must have strictly increasing last_epoch")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")
        return self

    @property
    def eta_1(self) -> float:
        return self.peak_lr

    @property
    def eta_T(self) -> float:
        if self.shape == "linear":
            return self.final_lr
        return self.lr_at_epoch(self.epochs - 1)

    def lr_at_epoch(self, epoch: float) -> float:
        """Learning rate at 0-based (fractional) epoch `epoch`."""
        epoch = max(0.0, epoch)
        if epoch < self.warmup_epochs:
            return self.peak_lr * (math.floor(epoch) + 1) / self.warmup_epochs
        if self.shape == "constant":
            return self.peak_lr
        if self.shape == "linear":
            progress = min(1.0, epoch / self.epochs)
            return self.peak_lr + (self.final_lr - self.peak_lr) * progress
        one_based = math.floor(epoch) + 1
        for piece in self.pieces:
            if one_based <= piece.last_epoch:
                return piece.lr
        return self.pieces[-1].lr

    def lr_at(self, step: int, steps_per_epoch: int) -> float:
        if not 0 <= step < self.epochs * steps_per_epoch:
            raise ScheduleError(f"step {step} outside the {self.epochs}-epoch original schedule")
        return self.lr_at_epoch(step / steps_per_epoch)


class RetrainSchedule(BaseModel):
    """Retraining schedule `variant` over `retrain_epochs` = T_rt epochs.

    `initial_lr` overrides the starting value of LLR/ALLR and the peak of
    SLR/CLR. `allr_drop` is the relative validation-accuracy drop caused by
    the preceding pruning step; ALLR treats a missing value as 1.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: RetrainVariant
    original_curve: OriginalCurve
    retrain_epochs: int = Field(ge=1)
    allr_drop: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    initial_lr: Optional[float] = Field(default=None, gt=0.0)

    @property
    def eta_1(self) -> float:
        return self.original_curve.eta_1

    @property
    def eta_T(self) -> float:
        return self.original_curve.eta_T

    @property
    def total_epochs(self) -> int:
        return self.original_curve.epochs

    def with_budget(self, retrain_epochs: int) -> "RetrainSchedule":
        return self.model_copy(update={"retrain_epochs": retrain_epochs})

    def with_drop(self, drop: float) -> "RetrainSchedule":
        return self.model_copy(update={"allr_drop": min(1.0, max(0.0, drop))})

    def start_lr(self) -> float:
        """Initial value of the linear variants (peak for the warm-up variants)."""
        if self.initial_lr is not None:
            return self.initial_lr
        if self.variant == "ALLR":
            drop = 1.0 if self.allr_drop is None else self.allr_drop
            return allr_init(self.eta_1, self.eta_T, self.total_epochs, self.retrain_epochs, drop)
        return self.eta_1

    def lr_at(self, step: int, steps_per_epoch: int) -> float:
        total_steps = self.retrain_epochs * steps_per_epoch
        if not 0 <= step < total_steps:
            raise ScheduleError(f"step {step} outside the retraining budget of {total_steps} steps")

        if self.variant == "FT":
            return self.eta_T
        if self.variant == "LRW":
            rewound_epoch = max(0, self.total_epochs - self.retrain_epochs) + step // steps_per_epoch
            return self.original_curve.lr_at_epoch(rewound_epoch)
        if self.variant in ("LLR", "ALLR"):
            return self.start_lr() * (1.0 - step / total_steps)

        peak = self.start_lr()
        warmup_steps = math.floor(WARMUP_FRACTION * total_steps)
        if step < warmup_steps:
            return peak * step / warmup_steps
        progress = (step - warmup_steps) / (total_steps - warmup_steps)
        if self.variant == "CLR":
            return peak * 0.5 * (1.0 + math.cos(math.pi * progress))
        # SLR: the original curve squeezed into the budget, rescaled to the peak
        compressed = self.original_curve.lr_at_epoch(progress * self.total_epochs)
        return compressed * (peak / self.eta_1)


def allr_init(  # pylint: disable=invalid-name
    eta_1: float, eta_T: float, T: int, T_rt: int, drop: float
) -> float:
    """Adaptive initial learning rate of ALLR.

    Scales eta_1 by the pruning-induced relative accuracy drop and by the share
    of a 10%-of-T retraining budget that is available, clamped to [eta_T, eta_1].
    """
    if not 0.0 <= drop <= 1.0:
        raise ScheduleError(f"drop must be in [0, 1], got {drop}")
    budget_share = min(1.0, T_rt / (0.1 * T))
    return min(eta_1, max(eta_T, eta_1 * drop * budget_share))


def accuracy_drop(accuracy_before: float, accuracy_after: float) -> float:
    """Relative degradation (before - after) / before, clamped to [0, 1]."""
    if accuracy_before <= 0.0:
        return 0.0
    return min(1.0, max(0.0, (accuracy_before - accuracy_after) / accuracy_before))
