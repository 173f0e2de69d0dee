"""Evaluation metrics beyond plain accuracy.

This module provides:
- Per-subgroup recall and balanced accuracy for skewed datasets
- Out-of-distribution accuracy over a grid of corruption kinds and severities
- Accuracy of a prediction ensemble (mean of softmax outputs)
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence

import numpy as np
from sklearn.metrics import balanced_accuracy_score, confusion_matrix

from ..data import CorruptionSpec, Dataset, corrupt
from ..errors import ConfigError, SubgroupError
from ..nn_core import ModelState, evaluate, predict_logits

logger = logging.getLogger(__name__)

ALL_SEVERITIES = (1, 2, 3, 4, 5)


@dataclass
class SubgroupReport:
    """Recall per subgroup and per class, plus the mean of class recalls."""

    subgroup_recalls: Dict[int, float]
    class_recalls: Dict[int, float]
    balanced_accuracy: float


def _predictions(model: ModelState, data: Dataset) -> np.ndarray:
    return np.argmax(predict_logits(model, data), axis=1)


def subgroup_recall(model: ModelState, data: Dataset) -> SubgroupReport:
    """Recall of every subgroup (correct in g / size of g) and balanced accuracy.

    Parameters
    ----------
    model : ModelState
        Model with fresh BN statistics.
    data : Dataset
        Evaluation data carrying `subgroup` labels.

    Raises
    ------
    SubgroupError
        If the data has no subgroup labels or one of the groups is empty.
    """
    if data.subgroup is None:
        raise SubgroupError(f"dataset '{data.name}' has no subgroup labels")

    predictions = _predictions(model, data)
    correct = predictions == data.labels

    subgroup_recalls: Dict[int, float] = {}
    for group in range(data.num_subgroups):
        members = data.subgroup == group
        if not members.any():
            raise SubgroupError(f"subgroup {group} of '{data.name}' is empty")
        subgroup_recalls[group] = float(correct[members].mean())

    matrix = confusion_matrix(data.labels, predictions, labels=np.arange(data.num_classes))
    support = matrix.sum(axis=1)
    class_recalls = {
        int(label): float(matrix[label, label] / support[label])
        for label in range(data.num_classes)
        if support[label] > 0
    }
    return SubgroupReport(
        subgroup_recalls=subgroup_recalls,
        class_recalls=class_recalls,
        balanced_accuracy=float(balanced_accuracy_score(data.labels, predictions)),
    )


def ood_accuracy(
    model: ModelState,
    clean_data: Dataset,
    corruption_kinds: Iterable[str],
    severities: Sequence[int] = ALL_SEVERITIES,
    scale: float = 1.0,
) -> float:
    """Mean accuracy over every (kind, severity) corruption of the full clean set."""
    kinds = sorted(set(corruption_kinds))
    if not kinds:
        raise ConfigError("ood_accuracy needs at least one corruption kind")
    if not severities:
        raise ConfigError("ood_accuracy needs at least one severity")

    accuracies = []
    for kind, level in itertools.product(kinds, sorted(set(severities))):
        corrupted = corrupt(clean_data, CorruptionSpec(kind=kind, severity=level, scale=scale))
        accuracies.append(evaluate(model, corrupted).accuracy)
    logger.debug("ood accuracy over %d corruptions", len(accuracies))
    return math.fsum(accuracies) / len(accuracies)


def ensemble_accuracy(models: Sequence[ModelState], data: Dataset) -> float:
    """Accuracy of the averaged softmax outputs of `models`."""
    if not models:
        raise ConfigError("ensemble_accuracy needs at least one model")
    summed = np.zeros((data.size, data.num_classes), dtype=np.float64)
    for model in models:
        logits = predict_logits(model, data).astype(np.float64)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        summed += shifted / shifted.sum(axis=1, keepdims=True)
    return float(np.mean(np.argmax(summed, axis=1) == data.labels))
