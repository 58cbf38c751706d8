"""
ModelNet ingestion: OFF meshes to a sampled, normalised point cache, plus
training-time augmentation and mini-batching.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .cachefile import SPLITS, CacheFile, write_cache
from .errors import DegenerateInputError, OFFParseError, ValidationError
from .geometry import PointCloud, TriangleMesh, normalize_unit_sphere, sample_surface
from .progress import Stage, Status, emit_progress

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 1024


def _off_lines(text: str) -> Iterator[Tuple[int, List[str]]]:
    for number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split("#", 1)[0].split()
        if tokens:
            yield number, tokens


def _parse_numbers(tokens: Sequence[str], kind: type, line_number: int, what: str) -> List:
    try:
        return [kind(token) for token in tokens]
    except ValueError as error:
        raise OFFParseError(f"non-numeric {what}: {' '.join(tokens)}", line_number) from error


def parse_off(data: Union[bytes, str]) -> TriangleMesh:
    """
    Parse OFF text into a triangle mesh.

    Accepts the ModelNet quirk where the counts are fused onto the header
    line (``OFF490 518 0``). Polygons are fan-triangulated around their first
    vertex; triangles that repeat a vertex are dropped and counted.
    """
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as error:
            raise OFFParseError("input is not UTF-8 text", 1) from error
    else:
        text = data
    lines = _off_lines(text)

    header = next(lines, None)
    if header is None or not header[1][0].startswith("OFF"):
        raise OFFParseError("missing OFF header", header[0] if header else 1)
    line_number, tokens = header
    count_tokens = ([tokens[0][3:]] if tokens[0][3:] else []) + tokens[1:]
    if not count_tokens:
        counts_line = next(lines, None)
        if counts_line is None:
            raise OFFParseError("missing vertex/face counts", line_number + 1)
        line_number, count_tokens = counts_line
    if len(count_tokens) < 2:
        raise OFFParseError("expected vertex, face and edge counts", line_number)
    counts = _parse_numbers(count_tokens[:3], int, line_number, "counts")
    num_vertices, num_faces = counts[0], counts[1]
    if num_vertices < 0 or num_faces < 0:
        raise OFFParseError("negative vertex or face count", line_number)

    # Rows are collected as they are read; the declared counts are untrusted.
    vertex_rows: List[List[float]] = []
    for row in range(num_vertices):
        entry = next(lines, None)
        if entry is None:
            raise OFFParseError(f"expected {num_vertices} vertices, found {row}", line_number + 1)
        line_number, tokens = entry
        if len(tokens) < 3:
            raise OFFParseError("vertex needs three coordinates", line_number)
        coordinates = _parse_numbers(tokens[:3], float, line_number, "vertex")
        if not all(math.isfinite(value) for value in coordinates):
            raise OFFParseError(f"non-finite vertex: {' '.join(tokens[:3])}", line_number)
        vertex_rows.append(coordinates)
    vertices = np.array(vertex_rows, dtype=np.float64).reshape(num_vertices, 3)

    triangles: List[Tuple[int, int, int]] = []
    dropped = 0
    for row in range(num_faces):
        entry = next(lines, None)
        if entry is None:
            raise OFFParseError(f"expected {num_faces} faces, found {row}", line_number + 1)
        line_number, tokens = entry
        (size,) = _parse_numbers(tokens[:1], int, line_number, "face size")
        if size < 3 or len(tokens) < 1 + size:
            raise OFFParseError(f"face needs at least 3 of its {size} vertex indices", line_number)
        polygon = _parse_numbers(tokens[1:1 + size], int, line_number, "face index")
        for index in polygon:
            if not 0 <= index < num_vertices:
                raise OFFParseError(
                    f"vertex index {index} out of range for {num_vertices} vertices", line_number
                )
        for corner in range(1, size - 1):
            triangle = (polygon[0], polygon[corner], polygon[corner + 1])
            if len(set(triangle)) < 3:
                dropped += 1
                continue
            triangles.append(triangle)

    if dropped:
        logger.warning("Dropped %d degenerate faces while parsing OFF mesh.", dropped)
    return TriangleMesh(
        vertices=vertices,
        faces=np.array(triangles, dtype=np.int64).reshape(-1, 3),
        dropped_faces=dropped,
    )


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_name: str
    class_index: int
    split: str


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    class_names: List[str]

    def split(self, split: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    def counts(self) -> Dict[str, List[int]]:
        counts = {split: [0] * len(self.class_names) for split in SPLITS}
        for entry in self.entries:
            counts[entry.split][entry.class_index] += 1
        return counts


def scan_modelnet(raw_root: str) -> Manifest:
    """Index a ModelNet tree laid out as ``class/{train,test}/*.off``."""
    if not os.path.isdir(raw_root):
        raise ValidationError(f"dataset directory not found: {raw_root}")
    class_names = sorted(
        name
        for name in os.listdir(raw_root)
        if any(os.path.isdir(os.path.join(raw_root, name, split)) for split in SPLITS)
    )
    entries = []
    for class_index, class_name in enumerate(class_names):
        for split in SPLITS:
            split_dir = os.path.join(raw_root, class_name, split)
            if not os.path.isdir(split_dir):
                continue
            for filename in sorted(os.listdir(split_dir)):
                if filename.lower().endswith(".off"):
                    entries.append(
                        ManifestEntry(
                            path=os.path.join(split_dir, filename),
                            class_name=class_name,
                            class_index=class_index,
                            split=split,
                        )
                    )
    return Manifest(entries=entries, class_names=class_names)


def stratified_subset(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Keep ``max(1, round(fraction * n))`` seeded picks of every (class, split) group."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = set()
    for class_index in range(len(manifest.class_names)):
        for split in SPLITS:
            group = [
                position
                for position, entry in enumerate(manifest.entries)
                if entry.class_index == class_index and entry.split == split
            ]
            if not group:
                continue
            count = max(1, int(round(fraction * len(group))))
            keep.update(group[i] for i in rng.permutation(len(group))[:count])
    entries = [entry for position, entry in enumerate(manifest.entries) if position in keep]
    return Manifest(entries=entries, class_names=list(manifest.class_names))


@dataclass
class BuildSummary:
    class_names: List[str]
    counts: Dict[str, List[int]]
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    unchanged: bool = False

    @property
    def totals(self) -> Dict[str, int]:
        return {split: sum(counts) for split, counts in self.counts.items()}

    def summary_line(self) -> str:
        return " ".join(f"{split}={total}" for split, total in self.totals.items())


def sample_mesh_file(path: str, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Read one OFF file, sample its surface and normalise to the unit sphere."""
    with open(path, "rb") as f:
        mesh = parse_off(f.read())
    return normalize_unit_sphere(sample_surface(mesh, n_points, rng))


def build_cache(
    raw_root: str,
    out: Optional[str],
    n_points: int = DEFAULT_POINTS,
    seed: int = 0,
    fraction: Optional[float] = None,
    workers: int = 1,
) -> Tuple[CacheFile, BuildSummary]:
    """
    Sample every mesh under ``raw_root`` into one cache.

    Each mesh draws from its own generator keyed by ``(seed, manifest
    position)``, so the result does not depend on ``workers``. Unreadable or
    degenerate meshes are skipped and listed in the summary. When ``out``
    already holds identical bytes it is left untouched.
    """
    if n_points < 1:
        raise ValidationError(f"point count must be at least 1, got {n_points}")
    manifest = scan_modelnet(raw_root)
    if fraction is not None:
        manifest = stratified_subset(manifest, fraction, seed)

    def load(position: int) -> Union[PointCloud, str]:
        entry = manifest.entries[position]
        try:
            return sample_mesh_file(entry.path, n_points, np.random.default_rng([seed, position]))
        except (OSError, OFFParseError, DegenerateInputError, ValidationError) as error:
            return str(error)

    emit_progress(
        Stage.CACHE_BUILD,
        Status.RUNNING,
        "Sampling meshes",
        total=len(manifest.entries),
    )
    positions = range(len(manifest.entries))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            tqdm(
                pool.map(load, positions),
                total=len(manifest.entries),
                desc="Sampling meshes",
                unit="mesh",
                leave=False,
            )
        )

    clouds, labels, splits, skipped = [], [], [], []
    counts = {split: [0] * len(manifest.class_names) for split in SPLITS}
    for entry, result in zip(manifest.entries, results):
        if isinstance(result, str):
            logger.warning("Skipping %s: %s", entry.path, result)
            skipped.append((entry.path, result))
            continue
        clouds.append(result.points)
        labels.append(entry.class_index)
        splits.append(SPLITS[entry.split])
        counts[entry.split][entry.class_index] += 1

    cache = CacheFile(
        class_names=manifest.class_names,
        points=np.array(clouds, dtype=np.float64).reshape(len(clouds), n_points, 3),
        labels=np.array(labels, dtype=np.int64),
        splits=np.array(splits, dtype=np.uint8),
    )
    summary = BuildSummary(class_names=manifest.class_names, counts=counts, skipped=skipped)
    if out is not None:
        data = cache.to_bytes()
        if os.path.exists(out):
            with open(out, "rb") as f:
                summary.unchanged = f.read() == data
        if not summary.unchanged:
            write_cache(cache, out)
    emit_progress(
        Stage.CACHE_BUILD,
        Status.COMPLETE if not skipped else Status.ERROR,
        f"Cached {cache.num_samples} clouds, skipped {len(skipped)}",
        current=cache.num_samples,
        total=len(manifest.entries),
        detail=out,
    )
    return cache, summary


@dataclass
class AugmentConfig:
    """Training-time augmentation: up-axis rotation, uniform scale, clipped jitter."""

    rotate: bool = True
    scale_low: float = 0.8
    scale_high: float = 1.25
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ValidationError(
                f"scale range must satisfy 0 < low <= high, got [{self.scale_low}, {self.scale_high}]"
            )
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ValidationError("jitter sigma and clip must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotate=False, scale_low=1.0, scale_high=1.0, jitter_sigma=0.0, jitter_clip=0.0)


def augment_points(points: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate about z, then scale, then jitter ``points[n, 3]``."""
    if cfg.rotate:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        cos, sin = math.cos(angle), math.sin(angle)
        rotation = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
        points = points @ rotation.T
    scale = cfg.scale_low if cfg.scale_low == cfg.scale_high else rng.uniform(cfg.scale_low, cfg.scale_high)
    if scale != 1.0:
        points = points * scale
    if cfg.jitter_sigma > 0:
        jitter = np.clip(rng.normal(0.0, cfg.jitter_sigma, size=points.shape), -cfg.jitter_clip, cfg.jitter_clip)
        points = points + jitter
    return points


def augment(pc: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    return PointCloud(augment_points(pc.points, cfg, rng), label=pc.label)


def batch_iter(
    cache: CacheFile,
    split: str,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    augment: Optional[AugmentConfig] = None,
    epoch: int = 0,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Yield ``(points[B, n, 3], labels[B])`` over one split, last batch partial.

    The order is the cache order unless ``shuffle_seed`` is given, in which
    case it is a permutation keyed by ``(shuffle_seed, epoch)``. Each
    augmented sample draws from a generator keyed by ``(shuffle_seed, epoch,
    sample index)``.
    """
    if batch_size < 1:
        raise ValidationError(f"batch size must be at least 1, got {batch_size}")
    indices = cache.split_indices(split)
    if len(indices) == 0:
        raise ValidationError(f"split {split!r} is empty")
    if shuffle_seed is not None:
        indices = indices[np.random.default_rng([shuffle_seed, epoch]).permutation(len(indices))]
    seed = shuffle_seed if shuffle_seed is not None else 0
    for start in range(0, len(indices), batch_size):
        chosen = indices[start:start + batch_size]
        points = cache.points[chosen]
        if augment is not None:
            for row, sample_index in enumerate(chosen):
                rng = np.random.default_rng([seed, epoch, int(sample_index)])
                points[row] = augment_points(points[row], augment, rng)
        yield points, cache.labels[chosen]


def num_batches(num_samples: int, batch_size: int) -> int:
    return -(-num_samples // batch_size)
