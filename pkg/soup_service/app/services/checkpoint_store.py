"""Binary checkpoints for sparse models.

Layout (all integers little-endian):

    magic "SPSOUPCK" | u32 version | u32 header length | JSON header
    | float32 tensors in header order | packed mask bitmaps | u32 CRC32

The JSON header is written with sorted keys, so saving a loaded checkpoint
reproduces the original bytes.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import CheckpointError, ShapeMismatchError
from ..nn_core import ArchSpec, Layer, ModelState
from ..pruning import Mask

logger = logging.getLogger(__name__)

MAGIC = b"SPSOUPCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_TRAILER = struct.Struct("<I")
_LAYER_FIELDS = ("weight", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")


class CheckpointMeta(BaseModel):
    """Provenance stored next to the tensors."""

    model_config = ConfigDict(extra="forbid")

    config_hash: str = ""
    method: str = ""
    phase: int = 0
    replica_id: Optional[int] = None
    seed: int = 0
    extra: Dict[str, Any] = Field(default_factory=dict)


def _header(model: ModelState, mask: Mask, meta: CheckpointMeta) -> Dict[str, Any]:
    tensors: List[Dict[str, Any]] = []
    for layer in model.layers:
        for attribute in _LAYER_FIELDS:
            array = getattr(layer, attribute)
            if array is not None:
                tensors.append(
                    {"layer": layer.name, "field": attribute, "shape": list(array.shape)}
                )
    return {
        "arch": model.arch.model_dump(mode="json"),
        "rng_seed": model.rng_seed,
        "bn_stale": model.bn_stale,
        "layers": [
            {"name": layer.name, "kind": layer.kind, "prunable": layer.prunable}
            for layer in model.layers
        ],
        "tensors": tensors,
        "masks": [{"name": name, "shape": list(keep.shape)} for name, keep in mask.tensors.items()],
        "meta": meta.model_dump(mode="json"),
    }


def dumps_checkpoint(model: ModelState, mask: Optional[Mask], meta: CheckpointMeta) -> bytes:
    """Serialise `model`, its mask (full when None) and provenance to bytes."""
    mask = mask if mask is not None else Mask.full(model)
    mask.check_congruent(model)
    header = json.dumps(_header(model, mask, meta), sort_keys=True, separators=(",", ":")).encode()

    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for layer in model.layers:
        for attribute in _LAYER_FIELDS:
            array = getattr(layer, attribute)
            if array is not None:
                chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    for keep in mask.tensors.values():
        chunks.append(np.packbits(keep.ravel()).tobytes())

    body = b"".join(chunks)
    return body + _TRAILER.pack(zlib.crc32(body))


def save_checkpoint(
    model: ModelState, mask: Optional[Mask], meta: CheckpointMeta, path: Path
) -> Path:
    """Write a checkpoint to `path` (parent directories are created)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dumps_checkpoint(model, mask, meta)
    path.write_bytes(payload)
    logger.debug("saved checkpoint %s (%d bytes)", path, len(payload))
    return path


def loads_checkpoint(payload: bytes) -> Tuple[ModelState, Mask, CheckpointMeta]:
    """Parse checkpoint bytes; any inconsistency raises CheckpointError."""
    if len(payload) < _PREFIX.size + _TRAILER.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, header_length = _PREFIX.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CheckpointError("not a sparse soup checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )

    body, (stored_crc,) = payload[: -_TRAILER.size], _TRAILER.unpack(payload[-_TRAILER.size :])
    header_end = _PREFIX.size + header_length
    if header_end > len(body):
        raise CheckpointError("checkpoint is truncated inside its header")
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")

    try:
        header = json.loads(body[_PREFIX.size : header_end].decode("utf-8"))
        arch = ArchSpec.model_validate(header["arch"])
        meta = CheckpointMeta.model_validate(header["meta"])
        layers = [
            Layer(name=entry["name"], kind=entry["kind"], prunable=entry["prunable"])
            for entry in header["layers"]
        ]
        tensor_entries = [
            (entry["layer"], entry["field"], _shape(entry["shape"])) for entry in header["tensors"]
        ]
        mask_entries = [(entry["name"], _shape(entry["shape"])) for entry in header["masks"]]
        rng_seed, bn_stale = int(header["rng_seed"]), bool(header["bn_stale"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    by_name = {layer.name: layer for layer in layers}
    offset = header_end
    for layer_name, field, shape in tensor_entries:
        byte_count = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + byte_count > len(body):
            raise CheckpointError(f"checkpoint is truncated at {layer_name}.{field}")
        array = np.frombuffer(body, dtype="<f4", count=byte_count // 4, offset=offset)
        if layer_name not in by_name or field not in _LAYER_FIELDS:
            raise CheckpointError(f"checkpoint names an unknown tensor {layer_name}.{field}")
        setattr(by_name[layer_name], field, array.astype(np.float32).reshape(shape))
        offset += byte_count

    tensors: Dict[str, np.ndarray] = {}
    for mask_name, shape in mask_entries:
        size = int(np.prod(shape, dtype=np.int64))
        byte_count = (size + 7) // 8
        if offset + byte_count > len(body):
            raise CheckpointError(f"checkpoint is truncated at mask {mask_name}")
        packed = np.frombuffer(body, dtype=np.uint8, count=byte_count, offset=offset)
        tensors[mask_name] = np.unpackbits(packed, count=size).astype(bool).reshape(shape)
        offset += byte_count
    if offset != len(body):
        raise CheckpointError("checkpoint has trailing bytes")

    model = ModelState(layers=layers, arch=arch, rng_seed=rng_seed, bn_stale=bn_stale)
    mask = Mask(tensors)
    try:
        mask.check_congruent(model)
    except ShapeMismatchError as exc:
        raise CheckpointError(f"stored mask does not fit the model: {exc}") from exc
    # pruned set and zero set of the stored weights must coincide
    for name, weight in model.prunable_weights().items():
        keep = mask.tensors[name]
        if np.any(weight[~keep] != 0):
            raise CheckpointError(f"{name} has non-zero values at masked coordinates")
        if np.any(weight[keep] == 0):
            raise CheckpointError(f"{name} has zero values at unmasked coordinates")
    return model, mask, meta


def _shape(raw: Any) -> Tuple[int, ...]:
    shape = tuple(int(dim) for dim in raw)
    if any(dim < 0 for dim in shape):
        raise ValueError(f"negative dimension in shape {list(shape)}")
    return shape


def load_checkpoint(path: Path) -> Tuple[ModelState, Mask, CheckpointMeta]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(payload)
