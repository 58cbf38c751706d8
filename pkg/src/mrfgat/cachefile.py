"""
Binary sample cache.

Layout, all integers and reals little-endian::

    header   magic "MRFG" | version u16 (=1) | points n u32 | samples S u32 | classes c u32
    labels   c times: name length u32 | UTF-8 name bytes
    body     S records: split u8 (0 train, 1 test) | class index u32 | n*3 float64 (x, y, z per point)
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import CacheFormatError, ValidationError

CACHE_MAGIC = b"MRFG"
CACHE_VERSION = 1
SPLITS = {"train": 0, "test": 1}

_HEADER = struct.Struct("<4sHIII")
_NAME_LENGTH = struct.Struct("<I")


def record_dtype(n_points: int) -> np.dtype:
    return np.dtype([("split", "u1"), ("label", "<u4"), ("points", "<f8", (n_points, 3))])


@dataclass
class CacheFile:
    """Sampled clouds with their class index and split tag."""

    class_names: List[str]
    points: np.ndarray
    labels: np.ndarray
    splits: np.ndarray

    def __post_init__(self) -> None:
        self.class_names = list(self.class_names)
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValidationError(f"cache points must be S x n x 3, got shape {self.points.shape}")
        samples = self.points.shape[0]
        if self.labels.shape != (samples,) or self.splits.shape != (samples,):
            raise ValidationError(
                f"{samples} clouds need {samples} labels and split tags, got "
                f"{self.labels.shape} and {self.splits.shape}"
            )
        if samples and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValidationError(f"labels must lie in [0, {len(self.class_names)})")
        if samples and not np.isin(self.splits, list(SPLITS.values())).all():
            raise ValidationError("split tags must be 0 (train) or 1 (test)")

    @property
    def n_points(self) -> int:
        return int(self.points.shape[1])

    @property
    def num_samples(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValidationError(f"split must be one of {sorted(SPLITS)}, got {split!r}")
        return np.flatnonzero(self.splits == SPLITS[split])

    def class_counts(self, split: str) -> List[int]:
        labels = self.labels[self.split_indices(split)]
        return np.bincount(labels, minlength=self.num_classes).tolist()

    def to_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.n_points, self.num_samples, self.num_classes)
        ]
        for name in self.class_names:
            encoded = name.encode("utf-8")
            parts.append(_NAME_LENGTH.pack(len(encoded)))
            parts.append(encoded)
        body = np.empty(self.num_samples, dtype=record_dtype(self.n_points))
        body["split"] = self.splits
        body["label"] = self.labels
        body["points"] = self.points
        parts.append(body.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CacheFile":
        if len(data) < _HEADER.size:
            raise CacheFormatError(f"cache truncated in header ({len(data)} of {_HEADER.size} bytes)")
        magic, version, n_points, samples, classes = _HEADER.unpack_from(data, 0)
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"not a sample cache (magic {magic!r})")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache version {version}, expected {CACHE_VERSION}")
        offset = _HEADER.size
        class_names = []
        for index in range(classes):
            if offset + _NAME_LENGTH.size > len(data):
                raise CacheFormatError(f"cache truncated in label map (class {index})")
            (length,) = _NAME_LENGTH.unpack_from(data, offset)
            offset += _NAME_LENGTH.size
            if offset + length > len(data):
                raise CacheFormatError(f"cache truncated in label map (class {index} name)")
            try:
                class_names.append(data[offset:offset + length].decode("utf-8"))
            except UnicodeDecodeError as error:
                raise CacheFormatError(f"class {index} name is not UTF-8") from error
            offset += length
        dtype = record_dtype(n_points)
        expected = samples * dtype.itemsize
        remaining = len(data) - offset
        if remaining < expected:
            raise CacheFormatError(
                f"cache truncated in body ({remaining} of {expected} bytes for {samples} samples)"
            )
        if remaining > expected:
            raise CacheFormatError(f"{remaining - expected} unexpected trailing bytes after the body")
        body = np.frombuffer(data, dtype=dtype, count=samples, offset=offset)
        try:
            return cls(
                class_names=class_names,
                points=body["points"].astype(np.float64),
                labels=body["label"].astype(np.int64),
                splits=body["split"].copy(),
            )
        except ValidationError as error:
            raise CacheFormatError(f"inconsistent cache contents: {error}") from error


def write_cache(cache: CacheFile, path: str) -> bytes:
    """Write ``cache`` to ``path`` (via a temporary file) and return the bytes written."""
    data = cache.to_bytes()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temporary = f"{path}.tmp"
    with open(temporary, "wb") as f:
        f.write(data)
    os.replace(temporary, path)
    return data


def read_cache(path: str) -> CacheFile:
    with open(path, "rb") as f:
        return CacheFile.from_bytes(f.read())
