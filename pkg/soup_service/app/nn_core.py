"""Minimal deterministic feed-forward engine.

This module provides:
- The model containers (`ArchSpec`, `Layer`, `ModelState`) and momentum-SGD state
- Forward / backward passes for dense, 1-D batch-norm and ReLU layers with a
  softmax cross-entropy objective
- Masked momentum SGD, the epoch training loop, evaluation and FLOPs accounting

Parameters are float32; the loss is accumulated in float64. Any model can be
cast to float64 with `ModelState.astype` for finite-difference checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .data import Dataset, batches, derive_seed
from .errors import (
    ConfigError,
    DegenerateModelError,
    NumericError,
    ScheduleError,
    ShapeMismatchError,
    StaleStatisticsError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .pruning import Mask
    from .schedules import LearningRateSchedule

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DEFAULT_MOMENTUM = 0.9

Mode = Literal["train", "eval"]


class ArchSpec(BaseModel):
    """Layer sizes `[in, hidden..., out]` plus batch-norm and pruning flags."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    sizes: List[int]
    batchnorm: bool = True
    prune_classifier: bool = True


@dataclass
class Layer:
    """One layer of the network; only the fields of its kind are populated."""

    name: str
    kind: Literal["dense", "batchnorm", "relu"]
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    bn_gamma: Optional[np.ndarray] = None
    bn_beta: Optional[np.ndarray] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None
    prunable: bool = False

    def copy(self) -> "Layer":
        """Deep copy of the layer and all of its arrays."""

        def _clone(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if array is None else array.copy()

        return Layer(
            name=self.name,
            kind=self.kind,
            weight=_clone(self.weight),
            bias=_clone(self.bias),
            bn_gamma=_clone(self.bn_gamma),
            bn_beta=_clone(self.bn_beta),
            bn_running_mean=_clone(self.bn_running_mean),
            bn_running_var=_clone(self.bn_running_var),
            prunable=self.prunable,
        )


@dataclass
class ModelState:
    """Ordered layers, architecture metadata and batch-norm running statistics."""

    layers: List[Layer]
    arch: ArchSpec
    rng_seed: int
    bn_stale: bool = False

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable tensors in canonical order (weights, biases, BN affine)."""
        named: Dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.kind == "dense":
                named[f"{layer.name}.weight"] = layer.weight
                named[f"{layer.name}.bias"] = layer.bias
            elif layer.kind == "batchnorm":
                named[f"{layer.name}.gamma"] = layer.bn_gamma
                named[f"{layer.name}.beta"] = layer.bn_beta
        return named

    def buffers(self) -> Dict[str, np.ndarray]:
        """Batch-norm running statistics in canonical order."""
        named: Dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.kind == "batchnorm":
                named[f"{layer.name}.running_mean"] = layer.bn_running_mean
                named[f"{layer.name}.running_var"] = layer.bn_running_var
        return named

    def prunable_weights(self) -> Dict[str, np.ndarray]:
        """Weight matrices of the prunable dense layers (never biases or BN)."""
        return {
            f"{layer.name}.weight": layer.weight
            for layer in self.layers
            if layer.kind == "dense" and layer.prunable
        }

    def dense_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if layer.kind == "dense"]

    @property
    def has_batchnorm(self) -> bool:
        return any(layer.kind == "batchnorm" for layer in self.layers)

    @property
    def dtype(self) -> np.dtype:
        return self.dense_layers()[0].weight.dtype

    def copy(self) -> "ModelState":
        return ModelState(
            layers=[layer.copy() for layer in self.layers],
            arch=self.arch,
            rng_seed=self.rng_seed,
            bn_stale=self.bn_stale,
        )

    def astype(self, dtype) -> "ModelState":
        """Copy of the model with every array cast to `dtype`."""
        clone = self.copy()
        for layer in clone.layers:
            for attribute in (
                "weight",
                "bias",
                "bn_gamma",
                "bn_beta",
                "bn_running_mean",
                "bn_running_var",
            ):
                array = getattr(layer, attribute)
                if array is not None:
                    setattr(layer, attribute, array.astype(dtype))
        return clone


@dataclass
class OptimizerState:
    """Momentum buffers for every trainable tensor."""

    momentum_buffers: Dict[str, np.ndarray]
    momentum_coeff: float = DEFAULT_MOMENTUM
    weight_decay: float = 0.0

    @classmethod
    def for_model(
        cls,
        model: ModelState,
        weight_decay: float = 0.0,
        momentum_coeff: float = DEFAULT_MOMENTUM,
    ) -> "OptimizerState":
        buffers = {name: np.zeros_like(p) for name, p in model.parameters().items()}
        return cls(buffers, momentum_coeff=momentum_coeff, weight_decay=weight_decay)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            {name: buf.copy() for name, buf in self.momentum_buffers.items()},
            momentum_coeff=self.momentum_coeff,
            weight_decay=self.weight_decay,
        )


@dataclass
class Evaluation:
    accuracy: float
    loss: float


@dataclass
class FlopsReport:
    """Dense vs sparse inference FLOPs; `speedup` is the exact ratio F_d / F_s."""

    dense_flops: int
    sparse_flops: int
    speedup: Fraction
    per_layer: Dict[str, Tuple[int, int]] = field(default_factory=dict)


# ---------------------------------------------------------------
# Construction
# ---------------------------------------------------------------
def init_model(arch: ArchSpec, seed: int) -> ModelState:
    """Build a model with fan-in scaled-uniform weights drawn from `seed`.

    Parameters
    ----------
    arch : ArchSpec
        Layer sizes `[in, h1, ..., out]`; every hidden block is
        dense -> (batchnorm) -> relu and the last dense layer emits logits.
    seed : int
        Seed of the weight initialisation.

    Returns
    -------
    ModelState
        Fresh model with zero biases, unit BN scale and running var 1.
    """
    sizes = list(arch.sizes)
    if len(sizes) < 2:
        raise ConfigError("architecture needs at least an input and an output size")
    if any(size < 1 for size in sizes):
        raise ConfigError(f"layer sizes must be >= 1, got {sizes}")

    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    block_count = len(sizes) - 1
    for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)
        is_classifier = index == block_count - 1
        layers.append(
            Layer(
                name=f"dense{index}",
                kind="dense",
                weight=weight,
                bias=np.zeros(fan_out, dtype=np.float32),
                prunable=arch.prune_classifier or not is_classifier,
            )
        )
        if is_classifier:
            break
        if arch.batchnorm:
            layers.append(
                Layer(
                    name=f"bn{index}",
                    kind="batchnorm",
                    bn_gamma=np.ones(fan_out, dtype=np.float32),
                    bn_beta=np.zeros(fan_out, dtype=np.float32),
                    bn_running_mean=np.zeros(fan_out, dtype=np.float32),
                    bn_running_var=np.ones(fan_out, dtype=np.float32),
                )
            )
        layers.append(Layer(name=f"relu{index}", kind="relu"))
    return ModelState(layers=layers, arch=arch, rng_seed=int(seed))


# ---------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------
def forward(
    model: ModelState,
    inputs: np.ndarray,
    mode: Mode,
    mask: Optional["Mask"] = None,
    stop_at: Optional[int] = None,
) -> Tuple[np.ndarray, List[dict]]:
    """Run the network and return `(logits, cache)`.

    When `mask` is given the dense weights are multiplied by it before use.
    In train mode BN normalises with batch statistics (the batch mean and
    biased variance are left in the cache); in eval mode it uses the running
    statistics. `stop_at=i` stops before layer i and returns its input.
    """
    activations = np.asarray(inputs, dtype=model.dtype)
    expected_dim = model.dense_layers()[0].weight.shape[1]
    if activations.ndim != 2 or activations.shape[1] != expected_dim:
        raise ShapeMismatchError(
            f"expected inputs of shape [n, {expected_dim}], got {activations.shape}"
        )

    cache: List[dict] = []
    for layer in model.layers[:stop_at]:
        if layer.kind == "dense":
            weight = layer.weight
            if mask is not None and layer.prunable:
                weight = weight * mask.tensors[f"{layer.name}.weight"]
            cache.append({"input": activations, "weight": weight})
            activations = activations @ weight.T + layer.bias
        elif layer.kind == "batchnorm":
            if mode == "train":
                batch_mean = activations.mean(axis=0)
                batch_var = activations.var(axis=0)
            else:
                batch_mean = layer.bn_running_mean
                batch_var = layer.bn_running_var
            inv_std = 1.0 / np.sqrt(batch_var + model.dtype.type(BN_EPS))
            normalized = (activations - batch_mean) * inv_std
            cache.append(
                {
                    "normalized": normalized,
                    "inv_std": inv_std,
                    "batch_mean": batch_mean,
                    "batch_var": batch_var,
                    "count": activations.shape[0],
                }
            )
            activations = layer.bn_gamma * normalized + layer.bn_beta
        else:
            active = activations > 0
            cache.append({"active": active})
            activations = np.where(active, activations, 0).astype(model.dtype)

        if not np.all(np.isfinite(activations)):
            raise NumericError(layer.name)
    return activations, cache


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy (float64) and its gradient w.r.t. the logits."""
    shifted = logits.astype(np.float64)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    sample_count = labels.shape[0]
    rows = np.arange(sample_count)
    loss = float(-log_probs[rows, labels].sum() / sample_count)
    probs = np.exp(log_probs)
    probs[rows, labels] -= 1.0
    return loss, (probs / sample_count).astype(logits.dtype)


def _update_running_stats(model: ModelState, cache: List[dict]) -> None:
    for layer, entry in zip(model.layers, cache):
        if layer.kind != "batchnorm":
            continue
        count = entry["count"]
        unbiased = entry["batch_var"] * (count / (count - 1)) if count > 1 else entry["batch_var"]
        layer.bn_running_mean[...] = (
            (1.0 - BN_MOMENTUM) * layer.bn_running_mean + BN_MOMENTUM * entry["batch_mean"]
        )
        layer.bn_running_var[...] = (
            (1.0 - BN_MOMENTUM) * layer.bn_running_var + BN_MOMENTUM * unbiased
        )


def loss_and_grad(
    model: ModelState,
    mask: Optional["Mask"],
    batch: Tuple[np.ndarray, np.ndarray],
    mode: Mode,
    error_feedback: bool = False,
) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """Loss, gradients of every trainable tensor and the logits for one batch.

    Gradients at masked-out coordinates are zeroed. With `error_feedback` the
    forward pass runs through `weight * mask` instead and the weight gradients
    are returned dense, so they can be applied to an unpruned copy.
    Train mode updates the BN running statistics of `model` in place.
    """
    inputs, labels = batch
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ShapeMismatchError("batch must not be empty")

    logits, cache = forward(model, inputs, mode, mask if error_feedback else None)
    loss, delta = softmax_cross_entropy(logits, labels)

    raw_grads: Dict[str, np.ndarray] = {}
    for index in range(len(model.layers) - 1, -1, -1):
        layer, entry = model.layers[index], cache[index]
        if layer.kind == "dense":
            raw_grads[f"{layer.name}.weight"] = delta.T @ entry["input"]
            raw_grads[f"{layer.name}.bias"] = delta.sum(axis=0)
            if index > 0:
                delta = delta @ entry["weight"]
        elif layer.kind == "batchnorm":
            normalized, inv_std = entry["normalized"], entry["inv_std"]
            raw_grads[f"{layer.name}.gamma"] = (delta * normalized).sum(axis=0)
            raw_grads[f"{layer.name}.beta"] = delta.sum(axis=0)
            grad_normalized = delta * layer.bn_gamma
            if mode == "train":
                count = delta.shape[0]
                delta = (inv_std / count) * (
                    count * grad_normalized
                    - grad_normalized.sum(axis=0)
                    - normalized * (grad_normalized * normalized).sum(axis=0)
                )
            else:
                delta = grad_normalized * inv_std
        else:
            delta = delta * entry["active"]

    grads = {name: raw_grads[name] for name in model.parameters()}
    if mask is not None and not error_feedback:
        for name, keep in mask.tensors.items():
            grads[name] = np.where(keep, grads[name], 0).astype(grads[name].dtype)

    if mode == "train":
        _update_running_stats(model, cache)
    return loss, grads, logits


# ---------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------
def sgd_step(
    model: ModelState,
    opt: OptimizerState,
    grads: Dict[str, np.ndarray],
    lr: float,
    mask: Optional["Mask"],
) -> Tuple[ModelState, OptimizerState]:
    """One momentum-SGD update in place: v <- mu*v + g + wd*w ; w <- w - lr*v.

    Weight decay touches dense weights only. Masked coordinates of weights and
    momentum buffers are reset to exactly 0.0 afterwards.
    """
    if lr < 0:
        raise ScheduleError(f"learning rate must be >= 0, got {lr}")
    for name, param in model.parameters().items():
        buffer = opt.momentum_buffers[name]
        update = grads[name]
        if opt.weight_decay and name.endswith(".weight"):
            update = update + opt.weight_decay * param
        buffer *= opt.momentum_coeff
        buffer += update
        param -= lr * buffer
        if mask is not None and name in mask.tensors:
            pruned = ~mask.tensors[name]
            param[pruned] = 0.0
            buffer[pruned] = 0.0
    return model, opt


def train(  # pylint: disable=too-many-arguments
    model: ModelState,
    mask: Optional["Mask"],
    opt: OptimizerState,
    data: Dataset,
    schedule: "LearningRateSchedule",
    epochs: int,
    batch_size: int,
    seed: int,
    step_range: Optional[Tuple[int, int]] = None,
    error_feedback: bool = False,
) -> ModelState:
    """Train `model` in place for `epochs` epochs and return it.

    The batch order of epoch `e` is drawn from `derive_seed(seed, e)` and the
    learning rate of global step `t` is `schedule.lr_at(t, steps_per_epoch)`.
    `step_range=(start, stop)` restricts the updates to that window of global
    steps without shifting the schedule or the batch order.
    """
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if epochs == 0:
        return model

    steps_per_epoch = math.ceil(data.size / batch_size)
    start_step, stop_step = step_range or (0, epochs * steps_per_epoch)
    sgd_mask = None if error_feedback else mask

    for epoch in range(epochs):
        first_step = epoch * steps_per_epoch
        if first_step + steps_per_epoch <= start_step:
            continue
        if first_step >= stop_step:
            break
        epoch_batches = batches(data, batch_size, derive_seed(seed, epoch), fixed_order=False)
        epoch_loss = 0.0
        for offset, batch in enumerate(epoch_batches):
            step = first_step + offset
            if step < start_step:
                continue
            if step >= stop_step:
                break
            lr = schedule.lr_at(step, steps_per_epoch)
            loss, grads, _ = loss_and_grad(
                model, mask, (batch.inputs, batch.labels), "train", error_feedback
            )
            sgd_step(model, opt, grads, lr, sgd_mask)
            epoch_loss += loss
        logger.debug("epoch %d done, summed batch loss %.6f", epoch, epoch_loss)
    return model


# ---------------------------------------------------------------
# Evaluation and accounting
# ---------------------------------------------------------------
def predict_logits(
    model: ModelState, data: Dataset, batch_size: Optional[int] = None
) -> np.ndarray:
    """Eval-mode logits for every sample of `data`."""
    if model.bn_stale and model.has_batchnorm:
        raise StaleStatisticsError("batch-norm statistics are stale; recompute them first")
    if batch_size is None:
        return forward(model, data.inputs, "eval")[0]
    chunks = [
        forward(model, data.inputs[start : start + batch_size], "eval")[0]
        for start in range(0, data.size, batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def evaluate(model: ModelState, data: Dataset, batch_size: Optional[int] = None) -> Evaluation:
    """Top-1 accuracy (ties resolved towards the lowest class index) and mean loss."""
    if data.size == 0:
        raise ShapeMismatchError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, data, batch_size)
    predictions = np.argmax(logits, axis=1)
    accuracy = float(np.mean(predictions == data.labels))
    loss, _ = softmax_cross_entropy(logits, data.labels)
    return Evaluation(accuracy=accuracy, loss=loss)


def count_flops(model: ModelState, mask: "Mask", include_bias: bool = False) -> FlopsReport:
    """Inference FLOPs of the dense and the masked network.

    A dense layer costs `2 * in * out` (plus `out` bias additions when
    `include_bias`); the sparse count only charges unmasked weights.
    """
    dense_total = 0
    sparse_total = 0
    per_layer: Dict[str, Tuple[int, int]] = {}
    for layer in model.dense_layers():
        name = f"{layer.name}.weight"
        fan_out, fan_in = layer.weight.shape
        kept = int(mask.tensors[name].sum()) if name in mask.tensors else fan_out * fan_in
        bias_flops = fan_out if include_bias else 0
        layer_dense = 2 * fan_in * fan_out + bias_flops
        layer_sparse = 2 * kept + bias_flops
        per_layer[layer.name] = (layer_dense, layer_sparse)
        dense_total += layer_dense
        sparse_total += layer_sparse
    if sparse_total == 0:
        raise DegenerateModelError("every weight is pruned; sparse FLOPs are zero")
    return FlopsReport(
        dense_flops=dense_total,
        sparse_flops=sparse_total,
        speedup=Fraction(dense_total, sparse_total),
        per_layer=per_layer,
    )
