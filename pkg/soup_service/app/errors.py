"""Exception hierarchy for the sparse soup engine.

Every failure the engine can report derives from `SparseSoupError` so the CLI
can map it onto an exit code with `exit_code_for`.
"""

from typing import Optional


class SparseSoupError(Exception):
    """Base class for all engine errors."""


class ConfigError(SparseSoupError):
    """Invalid experiment configuration, CLI arguments or architecture."""


class NumericError(SparseSoupError):
    """Non-finite values encountered in a forward pass."""

    def __init__(self, layer_name: str, message: str = "non-finite activations"):
        super().__init__(f"{message} in layer '{layer_name}'")
        self.layer_name = layer_name


class ShapeMismatchError(SparseSoupError):
    """A mask or tensor does not match the model it is applied to."""


class ArchitectureMismatchError(SparseSoupError):
    """Models that must share an architecture do not."""


class SparsityError(SparseSoupError):
    """Requested sparsity is out of range or below the current sparsity."""


class DegenerateModelError(SparseSoupError):
    """The sparse model has no remaining weights to compute with."""


class SplitError(SparseSoupError):
    """A dataset cannot be split as requested."""


class ScheduleError(SparseSoupError):
    """A learning-rate schedule was queried outside its range."""


class StaleStatisticsError(SparseSoupError):
    """Batch-norm statistics must be recomputed before evaluation."""


class CheckpointError(SparseSoupError):
    """A checkpoint file is corrupt, truncated or inconsistent."""


class SubgroupError(SparseSoupError):
    """Subgroup metrics requested on data without (or with empty) subgroups."""


class MaskInvariantError(SparseSoupError):
    """Replica masks diverged inside a phase or a soup lost its zero set."""


class ReplicaError(SparseSoupError):
    """A replica failed while retraining; the phase is aborted."""

    def __init__(self, phase: int, replica: int, cause: Exception):
        super().__init__(f"replica {replica} of phase {phase} failed: {cause}")
        self.phase = phase
        self.replica = replica
        self.cause = cause


def exit_code_for(exc: Optional[BaseException]) -> int:
    """Map an exception (or None for success) to the CLI exit code."""
    if exc is None:
        return 0
    if isinstance(exc, ConfigError):
        return 1
    return 2
