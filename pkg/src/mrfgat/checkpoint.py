"""
Training checkpoints.

Layout, all integers and reals little-endian::

    header    magic "MRFC" | version u16 (=1) | metadata length u32
    metadata  UTF-8 JSON with sorted keys: model config, epoch, best test OA,
              seed, Adam hyperparameters and step, dropout RNG state
    tensors   count u32, then per tensor:
              name length u16 | UTF-8 name | ndim u8 | ndim x u32 dims | float64 data

Tensors are the network parameters, the batch-norm running statistics and
the Adam moments (``adam.m.<param>`` / ``adam.v.<param>``), in network order.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointLoadError, ContractError, DimensionError, ValidationError
from .model import MRFGATConfig, NetworkParams, param_init
from .optim import AdamState

CHECKPOINT_MAGIC = b"MRFC"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sHI")
_COUNT = struct.Struct("<I")
_NAME_LENGTH = struct.Struct("<H")
_NDIM = struct.Struct("<B")

_FIRST_MOMENT = "adam.m."
_SECOND_MOMENT = "adam.v."


@dataclass
class Checkpoint:
    """Everything needed to resume training or to evaluate."""

    config: MRFGATConfig
    params: NetworkParams
    adam: AdamState
    epoch: int
    rng_state: Dict[str, Any]
    best_oa: Optional[float] = None
    seed: int = 0
    version: int = CHECKPOINT_VERSION

    def make_rng(self) -> np.random.Generator:
        """A generator positioned exactly where the saved run left off."""
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    def metadata(self) -> Dict[str, Any]:
        return {
            "config": dataclasses.asdict(self.config),
            "epoch": self.epoch,
            "best_oa": self.best_oa,
            "seed": self.seed,
            "adam": {
                "learning_rate": self.adam.learning_rate,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
                "step": self.adam.step,
            },
            "rng_state": self.rng_state,
        }

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        entries = list(self.params.state_arrays().items())
        names = [param.name for param in self.params.parameters()]
        for prefix, moments in ((_FIRST_MOMENT, self.adam.first_moment), (_SECOND_MOMENT, self.adam.second_moment)):
            entries.extend((prefix + name, moments[name]) for name in names if name in moments)
        return entries


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    metadata = json.dumps(checkpoint.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, checkpoint.version, len(metadata)), metadata]
    tensors = checkpoint.tensors()
    parts.append(_COUNT.pack(len(tensors)))
    for name, array in tensors:
        encoded = name.encode("utf-8")
        parts.append(_NAME_LENGTH.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_NDIM.pack(array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, section: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointLoadError(
                f"checkpoint truncated in {section} "
                f"(needs {size} bytes at offset {self.offset}, file has {len(self.data)})"
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct, section: str) -> Tuple[Any, ...]:
        return layout.unpack(self.take(layout.size, section))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic, version, metadata_length = reader.unpack(_HEADER, "header")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointLoadError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointLoadError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    try:
        metadata = json.loads(reader.take(metadata_length, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointLoadError(f"checkpoint metadata is not valid JSON: {error}") from error

    (count,) = reader.unpack(_COUNT, "tensor table")
    arrays: Dict[str, np.ndarray] = {}
    for index in range(count):
        section = f"tensor {index}"
        (length,) = reader.unpack(_NAME_LENGTH, section)
        name = reader.take(length, section).decode("utf-8", errors="replace")
        section = f"tensor {name!r}"
        (ndim,) = reader.unpack(_NDIM, section)
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, section))
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(8 * size, section)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if reader.offset != len(data):
        raise CheckpointLoadError(f"{len(data) - reader.offset} unexpected trailing bytes after the tensors")

    try:
        config = MRFGATConfig(**metadata["config"])
        adam_meta = metadata["adam"]
        adam = AdamState(
            learning_rate=adam_meta["learning_rate"],
            beta1=adam_meta["beta1"],
            beta2=adam_meta["beta2"],
            eps=adam_meta["eps"],
            step=adam_meta["step"],
        )
        params = param_init(config, np.random.default_rng(0))
        state = {name: array for name, array in arrays.items() if not name.startswith("adam.")}
        params.load_state_arrays(state)
        for name, array in arrays.items():
            if name.startswith(_FIRST_MOMENT):
                adam.first_moment[name[len(_FIRST_MOMENT):]] = array
            elif name.startswith(_SECOND_MOMENT):
                adam.second_moment[name[len(_SECOND_MOMENT):]] = array
        return Checkpoint(
            config=config,
            params=params,
            adam=adam,
            epoch=metadata["epoch"],
            rng_state=metadata["rng_state"],
            best_oa=metadata["best_oa"],
            seed=metadata["seed"],
            version=version,
        )
    except (KeyError, TypeError) as error:
        raise CheckpointLoadError(f"checkpoint metadata is incomplete: {error!r}") from error
    except (ValidationError, ContractError, DimensionError) as error:
        raise CheckpointLoadError(f"checkpoint contents are inconsistent: {error}") from error


def save_checkpoint(checkpoint: Checkpoint, path: str) -> bytes:
    """Write ``checkpoint`` to ``path`` (via a temporary file) and return the bytes written."""
    data = checkpoint_to_bytes(checkpoint)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    temporary = f"{path}.tmp"
    with open(temporary, "wb") as f:
        f.write(data)
    os.replace(temporary, path)
    return data


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
