"""Experiment grids comparing soups with their ingredients.

This module provides:
- Sparsity sweep: one-shot soups across target sparsities (soup vs best vs mean candidate)
- Epochs sweep: soup of m candidates retrained k epochs vs one model retrained m*k epochs
- Hyperparameter sweep: every candidate pair per varied axis (best individual vs pair soup)
"""

from __future__ import annotations

import itertools
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..config import ExperimentConfig
from ..merging import recompute_bn, uniform_soup
from ..nn_core import ModelState, evaluate
from ..orchestrator import (
    DataSplits,
    build_context,
    build_phase_plan,
    prepare_data,
    pretrain,
    prune_and_retrain,
    run_experiment,
)
from ..pruning import Mask
from .reporting import write_rows

logger = logging.getLogger(__name__)

SWEEP_COLUMNS: List[str] = [
    "sweep",
    "axis",
    "value",
    "seed",
    "pair",
    "soup_acc",
    "best_acc",
    "mean_acc",
    "reference_acc",
]


def _one_shot(config: ExperimentConfig, method: str, **pruning_updates) -> ExperimentConfig:
    pruning = config.pruning.model_copy(
        update={"phases": 1, "m_per_phase": None, **pruning_updates}
    )
    return config.model_copy(update={"method": method, "pruning": pruning})


def _row(sweep: str, axis: str, value, seed: int, **metrics) -> Dict[str, str]:
    row = {column: "" for column in SWEEP_COLUMNS}
    row.update({"sweep": sweep, "axis": axis, "value": str(value), "seed": str(seed)})
    for key, metric in metrics.items():
        row[key] = f"{metric:.10g}" if isinstance(metric, float) else str(metric)
    return row


def sparsity_sweep(
    config: ExperimentConfig,
    seed: int,
    data: DataSplits,
    pretrained: ModelState,
    parallel: Optional[int] = None,
) -> List[Dict[str, str]]:
    rows = []
    for sparsity in config.sweep.sparsities:
        _, record = run_experiment(
            _one_shot(config, "oneshot", target_sparsity=sparsity),
            seed,
            parallel=parallel,
            data=data,
            pretrained=pretrained,
        )
        phase = record.phases[-1]
        rows.append(
            _row(
                "sparsity",
                "target_sparsity",
                sparsity,
                seed,
                soup_acc=phase.soup_test_acc,
                best_acc=phase.best_candidate_test,
                mean_acc=phase.mean_candidate_test,
            )
        )
        logger.info("sparsity %.3f: soup %.4f", sparsity, phase.soup_test_acc)
    return rows


def epochs_sweep(
    config: ExperimentConfig,
    seed: int,
    data: DataSplits,
    pretrained: ModelState,
    parallel: Optional[int] = None,
) -> List[Dict[str, str]]:
    """Soup of m k-epoch candidates against a single model given the same m*k epochs."""
    rows = []
    for budget in config.sweep.epoch_budgets:
        _, soup_record = run_experiment(
            _one_shot(config, "oneshot", retrain_epochs=budget),
            seed,
            parallel=parallel,
            data=data,
            pretrained=pretrained,
        )
        _, prolonged_record = run_experiment(
            _one_shot(config, "imp_mx", retrain_epochs=budget),
            seed,
            parallel=parallel,
            data=data,
            pretrained=pretrained,
        )
        phase = soup_record.phases[-1]
        rows.append(
            _row(
                "epochs",
                "retrain_epochs",
                budget,
                seed,
                soup_acc=phase.soup_test_acc,
                best_acc=phase.best_candidate_test,
                mean_acc=phase.mean_candidate_test,
                reference_acc=prolonged_record.phases[-1].soup_test_acc,
            )
        )
    return rows


def hparam_sweep(
    config: ExperimentConfig,
    seed: int,
    data: DataSplits,
    pretrained: ModelState,
    parallel: Optional[int] = None,
) -> List[Dict[str, str]]:
    """One row per candidate pair and axis: max individual accuracy vs pair soup."""
    context = build_context(config, seed, data=data, parallel=parallel)
    rows = []
    for axis in config.sweep.axes:
        pruning = config.pruning.model_copy(update={"vary": axis, "m_per_phase": None})
        phase_plan = build_phase_plan(
            pruning, context.original_curve, seed, context.weight_decay, phases=1
        )
        _, candidates, _ = prune_and_retrain(
            pretrained, Mask.from_zeros(pretrained), phase_plan, 0, context
        )
        accuracies = [
            evaluate(recompute_bn(model, data.train, context.bn_batch_size), data.test).accuracy
            for model in candidates
        ]
        for left, right in itertools.combinations(range(len(candidates)), 2):
            soup, _ = uniform_soup(
                [candidates[left], candidates[right]], data.train, batch_size=context.bn_batch_size
            )
            rows.append(
                _row(
                    "hparams",
                    axis,
                    len(candidates),
                    seed,
                    pair=f"{left}-{right}",
                    soup_acc=evaluate(soup, data.test).accuracy,
                    best_acc=max(accuracies[left], accuracies[right]),
                    mean_acc=float(np.mean([accuracies[left], accuracies[right]])),
                )
            )
    return rows


SWEEPS = {"sparsity": sparsity_sweep, "epochs": epochs_sweep, "hparams": hparam_sweep}


def run_sweep(
    config: ExperimentConfig,
    seed: int,
    out_dir: Path,
    parallel: Optional[int] = None,
) -> Path:
    """Pretrain once, run the configured grid and write `sweep_<kind>.csv`."""
    data = prepare_data(config.dataset)
    pretrained = pretrain(config, data, seed)
    kind = config.sweep.kind
    logger.info("running %s sweep for seed %d", kind, seed)
    rows = SWEEPS[kind](config, seed, data, pretrained, parallel)
    return write_rows(Path(out_dir) / f"sweep_{kind}_seed{seed}.csv", rows, SWEEP_COLUMNS)
