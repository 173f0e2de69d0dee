"""Model soups: linear combinations of sparse models and their bookkeeping.

This module provides:
- `linear_combine` for arbitrary coefficient vectors
- UniformSoup / GreedySoup construction with merge reports
- Batch-norm statistics recomputation over a fixed-order pass of the data
- Re-pruning of densified averages and pairwise parameter distances
"""

from __future__ import annotations

import itertools
import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import Dataset, batches
from .errors import ArchitectureMismatchError, ConfigError, SparsityError
from .nn_core import ModelState, evaluate, forward
from .pruning import Mask, apply_mask, magnitude_mask, pruned_count, sparsity_of

logger = logging.getLogger(__name__)

DEFAULT_BN_BATCH_SIZE = 128

_TENSOR_FIELDS = ("weight", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")


class SoupRecipe(BaseModel):
    """How a soup was built; `selected` holds 0-based candidate indices."""

    model_config = ConfigDict(extra="forbid")

    method: Literal["uniform", "greedy", "custom"]
    lambdas: List[float]
    selected: List[int]


class MergeReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pre_merge_sparsities: List[float]
    post_merge_sparsity: float
    masks_identical: bool
    val_accuracies: List[float] = Field(default_factory=list)
    soup_val_accuracy: Optional[float] = None


class PairwiseDistance(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: float
    max: float
    pairs: List[Tuple[int, int, float]] = Field(default_factory=list)


def _check_same_architecture(models: Sequence[ModelState]) -> None:
    if not models:
        raise ConfigError("cannot combine an empty list of models")
    reference = models[0]
    for other in models[1:]:
        if len(other.layers) != len(reference.layers):
            raise ArchitectureMismatchError("models have different depths")
        for mine, theirs in zip(reference.layers, other.layers):
            if mine.name != theirs.name or mine.kind != theirs.kind:
                raise ArchitectureMismatchError(f"layer {mine.name} differs from {theirs.name}")
            for attribute in _TENSOR_FIELDS:
                left, right = getattr(mine, attribute), getattr(theirs, attribute)
                if (left is None) != (right is None) or (
                    left is not None and left.shape != right.shape
                ):
                    raise ArchitectureMismatchError(f"{mine.name}.{attribute} shapes differ")


def linear_combine(models: Sequence[ModelState], lambdas: Sequence[float]) -> ModelState:
    """Return sum_i lambda_i * theta_i over every tensor, accumulated in float64.

    BN running statistics are combined like everything else but the result is
    flagged stale; they must be recomputed before evaluation.
    """
    _check_same_architecture(models)
    if len(lambdas) != len(models):
        raise ConfigError(f"got {len(lambdas)} coefficients for {len(models)} models")

    equal_weights = all(coefficient == lambdas[0] for coefficient in lambdas)
    combined = models[0].copy()
    for layer_index, layer in enumerate(combined.layers):
        for attribute in _TENSOR_FIELDS:
            reference = getattr(layer, attribute)
            if reference is None:
                continue
            accumulator = np.zeros(reference.shape, dtype=np.float64)
            if equal_weights:
                for model in models:
                    accumulator += getattr(model.layers[layer_index], attribute)
                accumulator *= lambdas[0]
            else:
                for model, coefficient in zip(models, lambdas):
                    accumulator += coefficient * getattr(model.layers[layer_index], attribute).astype(
                        np.float64
                    )
            setattr(layer, attribute, accumulator.astype(reference.dtype))
    combined.bn_stale = combined.has_batchnorm
    return combined


def recompute_bn(
    model: ModelState, train_data: Dataset, batch_size: int = DEFAULT_BN_BATCH_SIZE
) -> ModelState:
    """Reset and recompute every BN layer's statistics over the full data.

    Layers are processed front to back; each BN layer sees its inputs under
    the already-recomputed upstream statistics, batches come in canonical fixed
    order and batch moments are pooled into the exact dataset mean and unbiased
    variance. Weights are untouched.
    """
    refreshed = model.copy()
    refreshed.bn_stale = False
    if not refreshed.has_batchnorm:
        return refreshed

    fixed_batches = batches(train_data, batch_size, seed=0, fixed_order=True)
    for layer_index, layer in enumerate(refreshed.layers):
        if layer.kind != "batchnorm":
            continue
        count = 0
        mean = np.zeros(layer.bn_gamma.shape, dtype=np.float64)
        sum_squares = np.zeros(layer.bn_gamma.shape, dtype=np.float64)
        for batch in fixed_batches:
            activations, _ = forward(refreshed, batch.inputs, "eval", stop_at=layer_index)
            activations = activations.astype(np.float64)
            batch_count = activations.shape[0]
            batch_mean = activations.mean(axis=0)
            batch_squares = np.square(activations - batch_mean).sum(axis=0)
            merged_count = count + batch_count
            delta = batch_mean - mean
            mean = mean + delta * (batch_count / merged_count)
            sum_squares = sum_squares + batch_squares + np.square(delta) * (
                count * batch_count / merged_count
            )
            count = merged_count
        variance = sum_squares / (count - 1) if count > 1 else np.zeros_like(sum_squares)
        layer.bn_running_mean = mean.astype(layer.bn_gamma.dtype)
        layer.bn_running_var = variance.astype(layer.bn_gamma.dtype)
    return refreshed


def _masks_identical(models: Sequence[ModelState]) -> bool:
    reference = Mask.from_zeros(models[0])
    return all(Mask.from_zeros(model).equals(reference) for model in models[1:])


def _candidate_accuracies(
    models: Sequence[ModelState], val_data: Dataset, bn_data: Dataset, batch_size: int
) -> List[float]:
    return [
        evaluate(recompute_bn(model, bn_data, batch_size), val_data).accuracy for model in models
    ]


def uniform_soup(
    models: Sequence[ModelState],
    bn_data: Dataset,
    val_data: Optional[Dataset] = None,
    batch_size: int = DEFAULT_BN_BATCH_SIZE,
) -> Tuple[ModelState, MergeReport]:
    """Average all candidates with lambda_i = 1/m and recompute BN statistics."""
    _check_same_architecture(models)
    count = len(models)
    soup = recompute_bn(linear_combine(models, [1.0 / count] * count), bn_data, batch_size)

    report = MergeReport(
        pre_merge_sparsities=[sparsity_of(model) for model in models],
        post_merge_sparsity=sparsity_of(soup),
        masks_identical=_masks_identical(models),
    )
    if val_data is not None:
        report.val_accuracies = _candidate_accuracies(models, val_data, bn_data, batch_size)
        report.soup_val_accuracy = evaluate(soup, val_data).accuracy
    return soup, report


def greedy_soup(
    models: Sequence[ModelState],
    val_data: Dataset,
    bn_data: Dataset,
    batch_size: int = DEFAULT_BN_BATCH_SIZE,
) -> Tuple[ModelState, SoupRecipe, MergeReport]:
    """Greedy soup: visit candidates by descending validation accuracy and keep
    each one whose inclusion does not lower the soup's validation accuracy.

    Every evaluation (candidate or tentative soup) happens after recomputing BN
    on `bn_data`, so the soup is never worse than the best candidate.
    """
    _check_same_architecture(models)
    accuracies = _candidate_accuracies(models, val_data, bn_data, batch_size)
    visiting_order = sorted(range(len(models)), key=lambda index: (-accuracies[index], index))

    selected: List[int] = []
    best_accuracy = float("-inf")
    best_soup: Optional[ModelState] = None
    for candidate in visiting_order:
        trial = sorted(selected + [candidate])
        trial_soup = recompute_bn(
            linear_combine([models[i] for i in trial], [1.0 / len(trial)] * len(trial)),
            bn_data,
            batch_size,
        )
        trial_accuracy = evaluate(trial_soup, val_data).accuracy
        if trial_accuracy >= best_accuracy:
            selected, best_accuracy, best_soup = trial, trial_accuracy, trial_soup
            logger.debug("greedy soup kept candidate %d (val acc %.4f)", candidate, trial_accuracy)

    recipe = SoupRecipe(
        method="greedy",
        lambdas=[1.0 / len(selected) if i in selected else 0.0 for i in range(len(models))],
        selected=selected,
    )
    report = MergeReport(
        pre_merge_sparsities=[sparsity_of(model) for model in models],
        post_merge_sparsity=sparsity_of(best_soup),
        masks_identical=_masks_identical(models),
        val_accuracies=accuracies,
        soup_val_accuracy=best_accuracy,
    )
    return best_soup, recipe, report


def reprune_to(model: ModelState, target_sparsity: float) -> Tuple[ModelState, Mask]:
    """Magnitude-prune a (densified) model back to `target_sparsity`."""
    current = Mask.from_zeros(model)
    if pruned_count(target_sparsity, current.total) < current.pruned:
        raise SparsityError(
            f"target {target_sparsity:.6f} is below the model's sparsity {current.sparsity:.6f}"
        )
    mask = magnitude_mask(model, target_sparsity, current)
    return apply_mask(model, mask), mask


def _flat_parameters(model: ModelState) -> np.ndarray:
    return np.concatenate([p.astype(np.float64).ravel() for p in model.parameters().values()])


def pairwise_l2(models: Sequence[ModelState]) -> PairwiseDistance:
    """Mean and maximum Euclidean distance over all unordered model pairs."""
    if len(models) < 2:
        raise ConfigError("pairwise distances need at least two models")
    _check_same_architecture(models)
    vectors = [_flat_parameters(model) for model in models]
    pairs = [
        (left, right, float(np.linalg.norm(vectors[left] - vectors[right])))
        for left, right in itertools.combinations(range(len(models)), 2)
    ]
    distances = [distance for _, _, distance in pairs]
    return PairwiseDistance(mean=float(np.mean(distances)), max=float(max(distances)), pairs=pairs)
