"""End-to-end pruning methods built on the engine.

This module provides:
- Dense pretraining and data preparation for an experiment
- The prune-retrain-merge phase loop shared by SMS, One Shot and every IMP
  baseline (standard, m-times-longer retraining, m-times-more phases)
- IMP-RePrune: independent IMP runs averaged once and pruned back
- Pruning during training (BIMP, GMP, DPF) with optional replica forking
- `run_experiment`, the single entry point used by the CLI and the sweeps

Replicas of one phase retrain concurrently; results are always gathered in
replica order so merged models do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import ArchConfig, DatasetConfig, ExperimentConfig, PruningConfig, config_hash, settings
from .data import Dataset, derive_seed, gen_blobs, load_csv, split_train_test_val
from .errors import ConfigError, MaskInvariantError, ReplicaError, SubgroupError
from .merging import (
    MergeReport,
    greedy_soup,
    linear_combine,
    pairwise_l2,
    recompute_bn,
    reprune_to,
    uniform_soup,
)
from .nn_core import (
    ArchSpec,
    ModelState,
    OptimizerState,
    count_flops,
    evaluate,
    init_model,
    train,
)
from .pruning import (
    Mask,
    SparsityPlan,
    apply_mask,
    filter_mask,
    gmp_event_steps,
    gmp_target_at,
    magnitude_mask,
    sparsity_of,
)
from .schedules import OriginalCurve, RetrainSchedule, accuracy_drop
from .services.checkpoint_store import CheckpointMeta, save_checkpoint
from .services.metrics import ensemble_accuracy, ood_accuracy, subgroup_recall

logger = logging.getLogger(__name__)

# keys mixed into the base seed so every random stream of a run is distinct
INIT_SEED_TAG = 1
TRAIN_SEED_TAG = 2
REPLICA_SEED_TAG = 3
REPRUNE_SEED_TAG = 4

ImpVariant = Literal["standard", "m_times", "m_phases"]
DstMethod = Literal["bimp", "gmp", "dpf"]

T = TypeVar("T")


# ---------------------------------------------------------------
# Plans and records
# ---------------------------------------------------------------
class ReplicaSpec(BaseModel):
    """Hyperparameters of one replica retrained inside a phase."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(ge=0)
    weight_decay: float = Field(ge=0.0)
    retrain_epochs: int = Field(ge=1)
    schedule: RetrainSchedule
    initial_lr: Optional[float] = Field(default=None, gt=0.0)

    def resolved_schedule(self, drop: float) -> RetrainSchedule:
        """Schedule over this replica's budget, given the measured pruning drop."""
        schedule = self.schedule.with_budget(self.retrain_epochs).with_drop(drop)
        if self.initial_lr is not None:
            schedule = schedule.model_copy(update={"initial_lr": self.initial_lr})
        return schedule


class PhasePlan(BaseModel):
    """Sparsity plan plus the replicas of every phase (m may differ per phase)."""

    model_config = ConfigDict(extra="forbid")

    plan: SparsityPlan
    replicas: List[List[ReplicaSpec]]
    merge: Literal["uniform", "greedy"] = "uniform"
    pruning: Literal["unstructured_global", "structured_row"] = "unstructured_global"

    @model_validator(mode="after")
    def _check_replicas(self) -> "PhasePlan":
        if len(self.replicas) != self.plan.phases:
            raise ValueError("need one replica list per phase")
        if any(not phase for phase in self.replicas):
            raise ValueError("every phase needs at least one replica")
        return self

    def m(self, phase_index: int) -> int:
        return len(self.replicas[phase_index])


class PhaseRecord(BaseModel):
    """Metrics of one prune-retrain-merge phase (or one training segment)."""

    model_config = ConfigDict(extra="forbid")

    phase: int
    sparsity: float
    target_sparsity: float
    m: int
    candidate_val_accs: List[float]
    candidate_test_accs: List[float]
    mean_candidate_test: float
    best_candidate_test: float
    soup_val_acc: float
    soup_test_acc: float
    ensemble_test_acc: Optional[float] = None
    speedup: float
    ood_acc: Optional[float] = None
    subgroup_recalls: Optional[Dict[int, float]] = None
    balanced_accuracy: Optional[float] = None
    l2_mean: Optional[float] = None
    l2_max: Optional[float] = None
    accuracy_drop: Optional[float] = None
    selected: List[int] = Field(default_factory=list)
    masks_identical: bool = True
    post_merge_sparsity: float = 0.0
    retrain_epochs: int = 0
    masked_updates: Optional[int] = None
    checkpoint: Optional[str] = None


class RunRecord(BaseModel):
    """Everything a run measured, one `PhaseRecord` per phase."""

    model_config = ConfigDict(extra="forbid")

    method: str
    seed: int
    config_hash: str = ""
    phases: List[PhaseRecord] = Field(default_factory=list)
    final_sparsity: float = 0.0
    total_retrain_epochs: int = 0
    pretrain_test_acc: Optional[float] = None
    pre_reprune_sparsity: Optional[float] = None


@dataclass
class DataSplits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class RunContext:  # pylint: disable=too-many-instance-attributes
    """Data, training constants and output locations shared by one run."""

    data: DataSplits
    base_seed: int
    original_curve: OriginalCurve
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    parallel: int = 1
    bn_batch_size: int = 128
    corruption_kinds: Tuple[str, ...] = ()
    severities: Tuple[int, ...] = (1, 2, 3, 4, 5)
    corruption_scale: float = 1.0
    method: str = "sms"
    config_hash: str = ""
    checkpoint_dir: Optional[Path] = None


def derive_replica_seed(base_seed: int, phase_index: int, replica_index: int) -> int:
    """Seed of replica `replica_index` in phase `phase_index` (both 0-based)."""
    return derive_seed(base_seed, REPLICA_SEED_TAG, phase_index, replica_index)


# ---------------------------------------------------------------
# Setup
# ---------------------------------------------------------------
def prepare_data(dataset: DatasetConfig) -> DataSplits:
    """Generate (or read) the dataset and split it into train/val/test."""
    if dataset.source == "csv":
        full = load_csv(dataset.path, seed=dataset.data_seed)
    else:
        full = gen_blobs(
            num_classes=dataset.num_classes,
            dim=dataset.dim,
            n_per_class=dataset.n_per_class,
            spread=dataset.spread,
            seed=dataset.data_seed,
            subgroup_skew=dataset.subgroup_skew,
        )
    train_data, val_data, test_data = split_train_test_val(
        full, dataset.test_fraction, dataset.val_fraction, dataset.data_seed
    )
    logger.info(
        "dataset %s: %d train / %d val / %d test samples",
        full.name,
        train_data.size,
        val_data.size,
        test_data.size,
    )
    return DataSplits(train=train_data, val=val_data, test=test_data)


def arch_for(arch: ArchConfig, data: Dataset) -> ArchSpec:
    return ArchSpec(
        sizes=[data.dim, *arch.hidden, data.num_classes],
        batchnorm=arch.batchnorm,
        prune_classifier=arch.prune_classifier,
    )


def build_context(
    config: ExperimentConfig,
    seed: int,
    data: Optional[DataSplits] = None,
    out_dir: Optional[Path] = None,
    parallel: Optional[int] = None,
) -> RunContext:
    """Bundle everything the methods below need for one seed of `config`."""
    checkpoint_dir = None
    if config.save_checkpoints and out_dir is not None:
        checkpoint_dir = Path(out_dir) / "checkpoints"
    return RunContext(
        data=data if data is not None else prepare_data(config.dataset),
        base_seed=seed,
        original_curve=config.pretrain.original_curve(),
        batch_size=config.pretrain.batch_size,
        momentum=config.pretrain.momentum,
        weight_decay=(
            config.pruning.weight_decay
            if config.pruning.weight_decay is not None
            else config.pretrain.weight_decay
        ),
        parallel=parallel if parallel is not None else config.parallel,
        bn_batch_size=config.bn_batch_size,
        corruption_kinds=tuple(config.dataset.corruption_kinds),
        severities=tuple(config.dataset.severities),
        corruption_scale=config.dataset.corruption_scale,
        method=config.method,
        config_hash=config_hash(config),
        checkpoint_dir=checkpoint_dir,
    )


def _grid_point(pruning: PruningConfig, axis: str, index: int, epoch_multiplier: int) -> dict:
    if axis == "weight_decay":
        grid = pruning.weight_decay_grid
        return {"weight_decay": grid[index % len(grid)]}
    if axis == "retrain_epochs":
        grid = pruning.retrain_epochs_grid
        return {"retrain_epochs": grid[index % len(grid)] * epoch_multiplier}
    grid = pruning.initial_lr_grid
    return {"initial_lr": grid[index % len(grid)]}


def build_phase_plan(  # pylint: disable=too-many-arguments,too-many-locals
    pruning: PruningConfig,
    original_curve: OriginalCurve,
    base_seed: int,
    weight_decay: float,
    m: Optional[int] = None,
    phases: Optional[int] = None,
    epoch_multiplier: int = 1,
    seed_only: bool = False,
) -> PhasePlan:
    """Expand the pruning config into explicit replica specs per phase.

    Parameters
    ----------
    pruning : PruningConfig
        Target sparsity, phase count, retraining budget and replica axis.
    original_curve : OriginalCurve
        The pretraining schedule the retraining variants are derived from.
    base_seed : int
        Run seed; replica seeds are derived from it.
    weight_decay : float
        Retraining weight decay unless the weight-decay axis is varied.
    m, phases : int, optional
        Override the replica count (all phases) and the number of phases.
    epoch_multiplier : int
        Stretch every retraining budget (IMP with m-times-longer retraining).
    seed_only : bool
        Ignore `pruning.vary` and use baseline hyperparameters.
    """
    phase_count = phases if phases is not None else pruning.phases
    axis = "seed" if seed_only else pruning.vary
    base_epochs = pruning.retrain_epochs * epoch_multiplier
    template = RetrainSchedule(
        variant=pruning.schedule,
        original_curve=original_curve,
        retrain_epochs=base_epochs,
        initial_lr=pruning.initial_lr,
    )

    replicas: List[List[ReplicaSpec]] = []
    for phase_index in range(phase_count):
        if m is not None:
            count = m
        elif phases is not None:
            count = pruning.m
        else:
            count = pruning.m_for_phase(phase_index)
        shared_seed = derive_replica_seed(base_seed, phase_index, 0)
        phase_replicas = []
        for replica_index in range(count):
            spec = {
                "seed": shared_seed,
                "weight_decay": weight_decay,
                "retrain_epochs": base_epochs,
                "schedule": template,
                "initial_lr": pruning.initial_lr,
            }
            if axis == "seed":
                spec["seed"] = derive_replica_seed(base_seed, phase_index, replica_index)
            elif replica_index > 0:
                # replica 0 keeps the baseline values; the others walk the grid
                spec.update(_grid_point(pruning, axis, replica_index - 1, epoch_multiplier))
            phase_replicas.append(ReplicaSpec(**spec))
        replicas.append(phase_replicas)

    return PhasePlan(
        plan=SparsityPlan(target_sparsity=pruning.target_sparsity, phases=phase_count),
        replicas=replicas,
        merge=pruning.merge,
        pruning=pruning.pruning,
    )


# ---------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------
def _run_parallel(tasks: Sequence[Callable[[], T]], parallel: int, phase: int) -> List[T]:
    """Run replica tasks on at most min(parallel, settings.threads) threads, in order."""
    workers = max(1, min(parallel, settings.threads, len(tasks)))
    if workers == 1:
        results = []
        for index, task in enumerate(tasks):
            try:
                results.append(task())
            except Exception as exc:  # pylint: disable=broad-exception-caught
                raise ReplicaError(phase, index, exc) from exc
        return results

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task) for task in tasks]
        results = []
        for index, future in enumerate(futures):
            try:
                results.append(future.result())
            except Exception as exc:  # pylint: disable=broad-exception-caught
                raise ReplicaError(phase, index, exc) from exc
        return results


def _validation_accuracy(model: ModelState, context: RunContext) -> float:
    refreshed = recompute_bn(model, context.data.train, context.bn_batch_size)
    return evaluate(refreshed, context.data.val).accuracy


def _prune(model: ModelState, mask: Mask, sparsity: float, pruning: str) -> Mask:
    if pruning == "structured_row":
        return filter_mask(model, sparsity, mask)
    return magnitude_mask(model, sparsity, mask)


def _check_masked_zero(model: ModelState, mask: Mask, what: str) -> None:
    for name, weight in model.prunable_weights().items():
        if np.any(weight[~mask.tensors[name]] != 0):
            raise MaskInvariantError(f"{what}: {name} is non-zero at masked coordinates")


def _retrain_replica(
    parent: ModelState, mask: Mask, spec: ReplicaSpec, drop: float, context: RunContext
) -> ModelState:
    model = parent.copy()
    opt = OptimizerState.for_model(
        model, weight_decay=spec.weight_decay, momentum_coeff=context.momentum
    )
    return train(
        model,
        mask,
        opt,
        context.data.train,
        spec.resolved_schedule(drop),
        spec.retrain_epochs,
        context.batch_size,
        spec.seed,
    )


def _merge(
    candidates: Sequence[ModelState], method: str, context: RunContext
) -> Tuple[ModelState, MergeReport, List[int]]:
    if method == "greedy":
        soup, recipe, report = greedy_soup(
            candidates, context.data.val, context.data.train, context.bn_batch_size
        )
        return soup, report, recipe.selected
    soup, report = uniform_soup(
        candidates, context.data.train, context.data.val, context.bn_batch_size
    )
    return soup, report, list(range(len(candidates)))


def _phase_record(  # pylint: disable=too-many-arguments,too-many-locals
    phase: int,
    candidates: Sequence[ModelState],
    soup: ModelState,
    mask: Mask,
    target: float,
    report: MergeReport,
    context: RunContext,
    selected: Optional[List[int]] = None,
    drop: Optional[float] = None,
) -> PhaseRecord:
    """Evaluate candidates and soup (BN already fresh on `soup`) for one phase."""
    data = context.data
    refreshed = [recompute_bn(model, data.train, context.bn_batch_size) for model in candidates]
    val_accs = report.val_accuracies or [evaluate(model, data.val).accuracy for model in refreshed]
    test_accs = [evaluate(model, data.test).accuracy for model in refreshed]

    record = PhaseRecord(
        phase=phase,
        sparsity=mask.sparsity,
        target_sparsity=target,
        m=len(candidates),
        candidate_val_accs=val_accs,
        candidate_test_accs=test_accs,
        mean_candidate_test=float(np.mean(test_accs)),
        best_candidate_test=float(max(test_accs)),
        soup_val_acc=evaluate(soup, data.val).accuracy,
        soup_test_acc=evaluate(soup, data.test).accuracy,
        ensemble_test_acc=ensemble_accuracy(refreshed, data.test),
        speedup=float(count_flops(soup, mask).speedup),
        accuracy_drop=drop,
        selected=selected if selected is not None else list(range(len(candidates))),
        masks_identical=report.masks_identical,
        post_merge_sparsity=report.post_merge_sparsity,
    )
    if context.corruption_kinds:
        record.ood_acc = ood_accuracy(
            soup,
            data.test,
            context.corruption_kinds,
            context.severities,
            context.corruption_scale,
        )
    if data.test.subgroup is not None:
        try:
            groups = subgroup_recall(soup, data.test)
            record.subgroup_recalls = groups.subgroup_recalls
            record.balanced_accuracy = groups.balanced_accuracy
        except SubgroupError as exc:
            logger.warning("phase %d: subgroup recall skipped (%s)", phase, exc)
    if len(candidates) >= 2:
        distances = pairwise_l2(candidates)
        record.l2_mean, record.l2_max = distances.mean, distances.max
    if context.checkpoint_dir is not None:
        path = context.checkpoint_dir / f"{context.method}_seed{context.base_seed}_phase{phase}.ckpt"
        meta = CheckpointMeta(
            config_hash=context.config_hash,
            method=context.method,
            phase=phase,
            seed=context.base_seed,
        )
        record.checkpoint = str(save_checkpoint(soup, mask, meta, path))
    return record


def _finish(record: RunRecord, model: ModelState) -> RunRecord:
    record.final_sparsity = sparsity_of(model)
    record.total_retrain_epochs = sum(phase.retrain_epochs for phase in record.phases)
    return record


# ---------------------------------------------------------------
# Pretraining and the prune-retrain-merge loop
# ---------------------------------------------------------------
def pretrain(config: ExperimentConfig, data: DataSplits, seed: int) -> ModelState:
    """Dense training of a fresh model for `config.pretrain.epochs` epochs."""
    model = init_model(arch_for(config.arch, data.train), derive_seed(seed, INIT_SEED_TAG))
    opt = OptimizerState.for_model(
        model,
        weight_decay=config.pretrain.weight_decay,
        momentum_coeff=config.pretrain.momentum,
    )
    logger.info("pretraining for %d epochs (seed %d)", config.pretrain.epochs, seed)
    return train(
        model,
        None,
        opt,
        data.train,
        config.pretrain.original_curve(),
        config.pretrain.epochs,
        config.pretrain.batch_size,
        derive_seed(seed, TRAIN_SEED_TAG),
    )


def prune_and_retrain(
    parent: ModelState,
    mask: Mask,
    phase_plan: PhasePlan,
    phase_index: int,
    context: RunContext,
) -> Tuple[Mask, List[ModelState], float]:
    """Prune `parent` to the phase's sparsity and retrain its replicas.

    Returns the phase mask, the retrained candidates in replica order and the
    relative validation-accuracy drop caused by pruning (both accuracies are
    measured with recomputed BN statistics).
    """
    phase = phase_index + 1
    target = phase_plan.plan.cumulative[phase_index]
    accuracy_before = _validation_accuracy(parent, context)
    mask = _prune(parent, mask, target, phase_plan.pruning)
    pruned = apply_mask(parent, mask)
    drop = accuracy_drop(accuracy_before, _validation_accuracy(pruned, context))

    specs = phase_plan.replicas[phase_index]
    logger.info(
        "phase %d/%d: sparsity %.4f, accuracy drop %.4f, retraining %d replica(s)",
        phase,
        phase_plan.plan.phases,
        mask.sparsity,
        drop,
        len(specs),
    )
    tasks = [partial(_retrain_replica, pruned, mask, spec, drop, context) for spec in specs]
    candidates = _run_parallel(tasks, context.parallel, phase)
    for replica_index, candidate in enumerate(candidates):
        _check_masked_zero(candidate, mask, f"phase {phase} replica {replica_index}")
    return mask, candidates, drop


def _run_phases(
    parent: ModelState,
    mask: Mask,
    phase_plan: PhasePlan,
    context: RunContext,
    record: RunRecord,
) -> Tuple[ModelState, Mask]:
    for phase_index, target in enumerate(phase_plan.plan.cumulative):
        phase = phase_index + 1
        specs = phase_plan.replicas[phase_index]
        mask, candidates, drop = prune_and_retrain(parent, mask, phase_plan, phase_index, context)

        soup, report, selected = _merge(candidates, phase_plan.merge, context)
        _check_masked_zero(soup, mask, f"phase {phase} soup")

        phase_record = _phase_record(
            phase, candidates, soup, mask, target, report, context, selected, drop
        )
        phase_record.retrain_epochs = sum(spec.retrain_epochs for spec in specs)
        record.phases.append(phase_record)
        logger.info(
            "phase %d: soup test acc %.4f (mean candidate %.4f, best %.4f)",
            phase,
            phase_record.soup_test_acc,
            phase_record.mean_candidate_test,
            phase_record.best_candidate_test,
        )
        parent = soup
    return parent, mask


def sms_run(
    pretrained: ModelState,
    phase_plan: PhasePlan,
    context: RunContext,
    method: str = "sms",
) -> Tuple[ModelState, RunRecord]:
    """Sparse model soups: every phase prunes the previous soup, retrains m
    replicas under one shared mask and merges them into the next soup."""
    record = RunRecord(method=method, seed=context.base_seed, config_hash=context.config_hash)
    model, _ = _run_phases(pretrained, Mask.from_zeros(pretrained), phase_plan, context, record)
    return model, _finish(record, model)


def imp_run(
    pretrained: ModelState,
    pruning: PruningConfig,
    variant: ImpVariant,
    context: RunContext,
) -> Tuple[ModelState, RunRecord]:
    """Iterative magnitude pruning with a single model per phase.

    `m_times` retrains m times as long per phase; `m_phases` uses m times as
    many phases with the gentler per-phase sparsities.
    """
    multiplier = pruning.m if variant == "m_times" else 1
    phases = pruning.m * pruning.phases if variant == "m_phases" else pruning.phases
    phase_plan = build_phase_plan(
        pruning,
        context.original_curve,
        context.base_seed,
        context.weight_decay,
        m=1,
        phases=phases,
        epoch_multiplier=multiplier,
        seed_only=True,
    )
    method = {"standard": "imp", "m_times": "imp_mx", "m_phases": "imp_mphases"}[variant]
    return sms_run(pretrained, phase_plan, context, method=method)


def imp_reprune_run(
    pretrained: ModelState, pruning: PruningConfig, m: int, context: RunContext
) -> Tuple[ModelState, RunRecord]:
    """Average m independent IMP runs after their last phase, then prune back."""
    if m < 2:
        raise ConfigError(f"imp_reprune needs m >= 2, got {m}")
    tasks = []
    for run_index in range(m):
        run_context = replace(
            context,
            base_seed=derive_seed(context.base_seed, REPRUNE_SEED_TAG, run_index),
            checkpoint_dir=None,
            parallel=1,
        )
        tasks.append(partial(imp_run, pretrained, pruning, "standard", run_context))
    runs = _run_parallel(tasks, context.parallel, pruning.phases)
    finals = [model for model, _ in runs]

    averaged = linear_combine(finals, [1.0 / m] * m)
    pre_reprune = sparsity_of(averaged)
    repruned, mask = reprune_to(averaged, pruning.target_sparsity)
    soup = recompute_bn(repruned, context.data.train, context.bn_batch_size)
    logger.info(
        "imp_reprune: averaged sparsity %.4f, repruned to %.4f", pre_reprune, mask.sparsity
    )

    report = MergeReport(
        pre_merge_sparsities=[sparsity_of(model) for model in finals],
        post_merge_sparsity=pre_reprune,
        masks_identical=all(
            Mask.from_zeros(model).equals(Mask.from_zeros(finals[0])) for model in finals
        ),
    )
    record = RunRecord(
        method="imp_reprune",
        seed=context.base_seed,
        config_hash=context.config_hash,
        pre_reprune_sparsity=pre_reprune,
    )
    phase_record = _phase_record(
        pruning.phases, finals, soup, mask, pruning.target_sparsity, report, context
    )
    phase_record.retrain_epochs = sum(run.total_retrain_epochs for _, run in runs)
    record.phases.append(phase_record)
    return soup, _finish(record, soup)


# ---------------------------------------------------------------
# Pruning during training
# ---------------------------------------------------------------
def _average_optimizers(states: Sequence[OptimizerState]) -> OptimizerState:
    averaged = states[0].copy()
    for name, buffer in averaged.momentum_buffers.items():
        total = np.zeros(buffer.shape, dtype=np.float64)
        for state in states:
            total += state.momentum_buffers[name]
        averaged.momentum_buffers[name] = (total / len(states)).astype(buffer.dtype)
    return averaged


def _masked_view(model: ModelState, mask: Mask, context: RunContext) -> ModelState:
    return recompute_bn(apply_mask(model, mask), context.data.train, context.bn_batch_size)


@dataclass
class _SegmentTrainer:  # pylint: disable=too-many-instance-attributes
    """Trains the step windows between prune events on the original curve."""

    context: RunContext
    total_epochs: int
    error_feedback: bool
    training_seed: int
    m: int
    fork_from_step: Optional[int]

    def run(
        self,
        model: ModelState,
        mask: Mask,
        opt: OptimizerState,
        step_window: Tuple[int, int],
        segment_index: int,
    ) -> Tuple[ModelState, OptimizerState, List[ModelState]]:
        forked = (
            self.fork_from_step is not None and self.m > 1 and step_window[0] >= self.fork_from_step
        )
        if not forked:
            self._train(model, mask, opt, step_window, self.training_seed)
            return model, opt, [model]

        def _replica(replica_index: int) -> Tuple[ModelState, OptimizerState]:
            replica, replica_opt = model.copy(), opt.copy()
            seed = derive_replica_seed(self.context.base_seed, segment_index, replica_index)
            self._train(replica, mask, replica_opt, step_window, seed)
            return replica, replica_opt

        results = _run_parallel(
            [partial(_replica, index) for index in range(self.m)],
            self.context.parallel,
            segment_index + 1,
        )
        replicas = [replica for replica, _ in results]
        merged = linear_combine(replicas, [1.0 / self.m] * self.m)
        # BN statistics come from the masked network the replicas trained through
        refreshed = _masked_view(merged, mask, self.context)
        for name, buffer in refreshed.buffers().items():
            merged.buffers()[name][...] = buffer
        merged.bn_stale = False
        return merged, _average_optimizers([state for _, state in results]), replicas

    def _train(
        self,
        model: ModelState,
        mask: Mask,
        opt: OptimizerState,
        step_window: Tuple[int, int],
        seed: int,
    ) -> None:
        train(
            model,
            mask,
            opt,
            self.context.data.train,
            self.context.original_curve,
            self.total_epochs,
            self.context.batch_size,
            seed,
            step_range=step_window,
            error_feedback=self.error_feedback,
        )


def _masked_changes(model: ModelState, mask: Mask, snapshot: Dict[str, np.ndarray]) -> int:
    return int(
        sum(
            np.count_nonzero(weight[~mask.tensors[name]] != snapshot[name][~mask.tensors[name]])
            for name, weight in model.prunable_weights().items()
        )
    )


def _bimp_run(
    model: ModelState,
    config: ExperimentConfig,
    sms_enabled: bool,
    m: int,
    context: RunContext,
    record: RunRecord,
) -> ModelState:
    dense_epochs = config.dst.bimp_pretrain_epochs
    cycles = config.pruning.phases
    cycle_epochs = (config.pretrain.epochs - dense_epochs) // cycles
    if cycle_epochs < 1:
        raise ConfigError("bimp needs at least one epoch per cycle after its dense segment")

    opt = OptimizerState.for_model(
        model, weight_decay=config.pretrain.weight_decay, momentum_coeff=context.momentum
    )
    train(
        model,
        None,
        opt,
        context.data.train,
        context.original_curve,
        dense_epochs,
        context.batch_size,
        derive_seed(context.base_seed, TRAIN_SEED_TAG),
    )
    per_phase = [
        m if sms_enabled and dense_epochs + index * cycle_epochs >= config.dst.sms_start_epoch else 1
        for index in range(cycles)
    ]
    pruning = config.pruning.model_copy(
        update={"retrain_epochs": cycle_epochs, "m_per_phase": per_phase, "vary": "seed"}
    )
    phase_plan = build_phase_plan(
        pruning, context.original_curve, context.base_seed, config.pretrain.weight_decay
    )
    model, _ = _run_phases(model, Mask.full(model), phase_plan, context, record)
    return model


def _gradual_run(  # pylint: disable=too-many-arguments,too-many-locals
    model: ModelState,
    config: ExperimentConfig,
    method: DstMethod,
    sms_enabled: bool,
    m: int,
    context: RunContext,
    record: RunRecord,
) -> ModelState:
    total_epochs = config.pretrain.epochs
    steps_per_epoch = math.ceil(context.data.train.size / context.batch_size)
    total_steps = total_epochs * steps_per_epoch
    horizon = math.floor(config.dst.prune_end_fraction * total_steps)
    events = gmp_event_steps(horizon, config.dst.num_prune_events)
    s_final = config.pruning.target_sparsity
    is_dpf = method == "dpf"

    trainer = _SegmentTrainer(
        context=context,
        total_epochs=total_epochs,
        error_feedback=is_dpf,
        training_seed=derive_seed(context.base_seed, TRAIN_SEED_TAG),
        m=m,
        fork_from_step=config.dst.sms_start_epoch * steps_per_epoch if sms_enabled else None,
    )
    opt = OptimizerState.for_model(
        model, weight_decay=config.pretrain.weight_decay, momentum_coeff=context.momentum
    )
    mask = Mask.full(model)
    target = 0.0
    snapshot = {name: weight.copy() for name, weight in model.prunable_weights().items()}
    cursor = 0
    pending_record = True
    for boundary in sorted(set(events) | {total_steps}):
        if boundary > cursor:
            model, opt, candidates = trainer.run(
                model, mask, opt, (cursor, boundary), len(record.phases)
            )
            soup = _masked_view(model, mask, context)
            views = [apply_mask(candidate, mask) for candidate in candidates]
            report = MergeReport(
                pre_merge_sparsities=[sparsity_of(view) for view in views],
                post_merge_sparsity=sparsity_of(soup),
                masks_identical=True,
            )
            phase_record = _phase_record(
                len(record.phases) + 1, views, soup, mask, target, report, context
            )
            phase_record.retrain_epochs = len(candidates) * math.ceil(
                (boundary - cursor) / steps_per_epoch
            )
            if is_dpf:
                phase_record.masked_updates = _masked_changes(model, mask, snapshot)
            record.phases.append(phase_record)
            cursor = boundary
            pending_record = False
        if boundary in events:
            target = gmp_target_at(boundary, horizon, s_final, config.dst.num_prune_events)
            if is_dpf:
                # the mask is re-derived from the dense magnitudes and may regrow
                mask = magnitude_mask(model, target)
                snapshot = {name: weight.copy() for name, weight in model.prunable_weights().items()}
            else:
                mask = magnitude_mask(model, target, mask)
                model = apply_mask(model, mask)
            logger.info("%s: prune event at step %d, sparsity %.4f", method, boundary, mask.sparsity)
            pending_record = True

    final = _masked_view(model, mask, context)
    if pending_record:
        report = MergeReport(
            pre_merge_sparsities=[sparsity_of(final)],
            post_merge_sparsity=sparsity_of(final),
            masks_identical=True,
        )
        record.phases.append(
            _phase_record(len(record.phases) + 1, [final], final, mask, target, report, context)
        )
    if is_dpf and context.checkpoint_dir is not None:
        dense_path = context.checkpoint_dir / f"{context.method}_seed{context.base_seed}_dense.ckpt"
        meta = CheckpointMeta(
            config_hash=context.config_hash,
            method=context.method,
            phase=len(record.phases),
            seed=context.base_seed,
            extra={"dense_copy": True},
        )
        save_checkpoint(model, None, meta, dense_path)
    return final


def dst_run(
    config: ExperimentConfig,
    method: DstMethod,
    sms_enabled: bool,
    m: int,
    context: RunContext,
) -> Tuple[ModelState, RunRecord]:
    """Prune during training from a fresh initialisation within the pretraining budget.

    `bimp` trains densely for `dst.bimp_pretrain_epochs` and runs IMP cycles
    on the rest of the budget; `gmp` tightens a monotone mask at uniformly
    spaced events; `dpf` trains a dense copy with gradients of the masked
    network and re-derives the mask at every event. With `sms_enabled`, m
    seed-varied replicas are forked and merged between events once
    `dst.sms_start_epoch` is reached.
    """
    model = init_model(
        arch_for(config.arch, context.data.train), derive_seed(context.base_seed, INIT_SEED_TAG)
    )
    record = RunRecord(
        method=f"{method}+sms" if sms_enabled else method,
        seed=context.base_seed,
        config_hash=context.config_hash,
    )
    if method == "bimp":
        final = _bimp_run(model, config, sms_enabled, m, context, record)
    else:
        final = _gradual_run(model, config, method, sms_enabled, m, context, record)
    return final, _finish(record, final)


# ---------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------
def run_experiment(
    config: ExperimentConfig,
    seed: int,
    out_dir: Optional[Path] = None,
    parallel: Optional[int] = None,
    data: Optional[DataSplits] = None,
    pretrained: Optional[ModelState] = None,
) -> Tuple[ModelState, RunRecord]:
    """Run `config.method` for one seed and return the final model and its record."""
    context = build_context(config, seed, data=data, out_dir=out_dir, parallel=parallel)
    method = config.method
    logger.info("running %s with seed %d", method, seed)

    if method in ("bimp", "gmp", "dpf"):
        return dst_run(config, method, config.dst.sms_enabled, config.pruning.m, context)

    if pretrained is None:
        pretrained = pretrain(config, context.data, seed)
    pretrain_acc = evaluate(
        recompute_bn(pretrained, context.data.train, context.bn_batch_size), context.data.test
    ).accuracy

    if method == "sms":
        phase_plan = build_phase_plan(
            config.pruning, context.original_curve, seed, context.weight_decay
        )
        model, record = sms_run(pretrained, phase_plan, context)
    elif method == "oneshot":
        phase_plan = build_phase_plan(
            config.pruning, context.original_curve, seed, context.weight_decay, phases=1
        )
        model, record = sms_run(pretrained, phase_plan, context, method="oneshot")
    elif method == "imp_reprune":
        model, record = imp_reprune_run(pretrained, config.pruning, config.pruning.m, context)
    else:
        variant = {"imp": "standard", "imp_mx": "m_times", "imp_mphases": "m_phases"}[method]
        model, record = imp_run(pretrained, config.pruning, variant, context)

    record.pretrain_test_acc = pretrain_acc
    return model, record
