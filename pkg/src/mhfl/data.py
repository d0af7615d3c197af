"""Dataset loading (IDX) and leaf partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x F matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per sample required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class Partition:
    assignment: list[np.ndarray]

    @property
    def n_leaves(self) -> int:
        return len(self.assignment)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignment], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class IID:
    pass


@dataclass(frozen=True)
class NonIID:
    labels_per_node: int = 1


Scheme = Union[IID, NonIID]


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: {len(raw)} bytes, header needs {header}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{what}: magic {got:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(
            f"{what}: expected {size} payload bytes, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(x, y, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def make_blobs(
    n_samples: int,
    num_features: int = 20,
    num_classes: int = 10,
    spread: float = 0.12,
    rng: Optional[np.random.Generator] = None,
) -> Dataset:
    """Gaussian blob per class, clipped to [0, 1]."""
    rng = np.random.default_rng(0) if rng is None else rng
    centers = rng.uniform(0.2, 0.8, size=(num_classes, num_features))
    y = np.arange(n_samples) % num_classes
    rng.shuffle(y)
    x = centers[y] + spread * rng.standard_normal((n_samples, num_features))
    return Dataset(np.clip(x, 0.0, 1.0), y, num_classes)


def partition(ds: Dataset, n_leaves: int, scheme: Scheme, rng: np.random.Generator) -> Partition:
    if n_leaves < 1:
        raise PartitionError("n_leaves must be >= 1")
    if isinstance(scheme, IID):
        return _partition_iid(ds, n_leaves, rng)
    if isinstance(scheme, NonIID):
        return _partition_noniid(ds, n_leaves, scheme.labels_per_node, rng)
    raise PartitionError(f"unknown scheme {scheme!r}")


def _partition_iid(ds: Dataset, n: int, rng: np.random.Generator) -> Partition:
    per_node = len(ds) // n
    if per_node == 0:
        raise PartitionError(f"{len(ds)} samples cannot feed {n} nodes")
    idx = rng.permutation(len(ds))[: per_node * n]
    # sorting by label then dealing keeps every node close to the global mix
    idx = idx[np.argsort(ds.labels[idx], kind="stable")]
    return Partition([np.sort(idx[i::n]) for i in range(n)])


def _partition_noniid(ds: Dataset, n: int, s: int, rng: np.random.Generator) -> Partition:
    if s < 1:
        raise PartitionError("labels_per_node must be >= 1")
    present = [c for c in range(ds.num_classes) if np.any(ds.labels == c)]
    C = len(present)
    if s > C:
        raise PartitionError(f"{s} labels per node but only {C} classes present")
    total_shards = n * s
    shards_per_class = np.full(C, total_shards // C)
    shards_per_class[: total_shards % C] += 1
    if shards_per_class.max() > n:
        raise PartitionError("a node would receive two shards of one class")
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in present]
    sizes = [len(b) // k for b, k in zip(by_class, shards_per_class) if k > 0]
    shard_size = min(sizes)
    if shard_size == 0:
        raise PartitionError(
            f"{n} nodes x {s} labels exceeds the available label shards"
        )
    shards = []
    for members, k in zip(by_class, shards_per_class):
        for j in range(k):
            shards.append(members[j * shard_size:(j + 1) * shard_size])
    assignment = [
        np.sort(np.concatenate([shards[i + r * n] for r in range(s)]))
        for i in range(n)
    ]
    return Partition(assignment)
