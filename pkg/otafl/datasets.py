"""Datasets: synthetic generators, IDX ingestion, partitioning, snapshots."""
from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from otafl.errors import IdxFormatError, InvalidArgumentError
from otafl.numerics import RandomStream

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SNAPSHOT_PATTERN = "dataset-{seed}.npz"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise InvalidArgumentError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise InvalidArgumentError(
                f"{labels.shape[0] if labels.ndim else 0} labels for {features.shape[0]} samples")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class DataPartition:
    parts: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([p.size for p in self.parts], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    @property
    def weights(self) -> np.ndarray:
        """D_k / D_A for every device."""
        return self.sizes / self.total

    def __len__(self) -> int:
        return len(self.parts)


def partition_data(stream: RandomStream, dataset: Dataset, num_devices: int,
                   skew: float = 0.0) -> DataPartition:
    """Split sample indices across devices.

    ``skew`` blends a random order (0, IID) with a label-sorted order
    (1, contiguous label shards); the blended order is cut into
    ``num_devices`` near-equal pieces.
    """
    n = len(dataset)
    if num_devices < 1:
        raise InvalidArgumentError(f"K must be >= 1, got {num_devices}")
    if num_devices > n:
        raise InvalidArgumentError(f"cannot split {n} samples across {num_devices} devices")
    if not 0.0 <= skew <= 1.0:
        raise InvalidArgumentError(f"skew must lie in [0, 1], got {skew}")

    rng = stream.generator()
    random_rank = np.empty(n)
    random_rank[rng.permutation(n)] = np.arange(n)
    label_order = np.lexsort((random_rank, dataset.labels))
    label_rank = np.empty(n)
    label_rank[label_order] = np.arange(n)

    key = skew * label_rank + (1.0 - skew) * random_rank
    order = np.argsort(key, kind="stable")
    parts = tuple(np.sort(chunk) for chunk in np.array_split(order, num_devices))
    return DataPartition(parts=parts)


def split_holdout(stream: RandomStream, dataset: Dataset, n_holdout: int) -> tuple[Dataset, Dataset | None]:
    """Random ``(train, held-out)`` split with ``n_holdout`` held-out samples."""
    n = len(dataset)
    if n_holdout < 0 or n_holdout >= n:
        raise InvalidArgumentError(f"cannot hold out {n_holdout} of {n} samples")
    if n_holdout == 0:
        return dataset, None
    order = stream.generator().permutation(n)

    def pick(idx: np.ndarray) -> Dataset:
        idx = np.sort(idx)
        return Dataset(features=dataset.features[idx], labels=dataset.labels[idx])

    return pick(order[n_holdout:]), pick(order[:n_holdout])


def make_blobs(stream: RandomStream, n_samples: int, dim_in: int, classes: int,
               separation: float = 2.0) -> Dataset:
    """Gaussian blobs: one unit-variance cluster per class."""
    if min(n_samples, dim_in, classes) < 1:
        raise InvalidArgumentError("n_samples, dim_in and classes must be positive")
    rng = stream.generator()
    centers = rng.normal(0.0, separation, size=(classes, dim_in))
    labels = rng.integers(0, classes, size=n_samples)
    features = centers[labels] + rng.normal(0.0, 1.0, size=(n_samples, dim_in))
    return Dataset(features=features, labels=labels)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, ndims: int, path: str) -> tuple[tuple[int, ...], np.ndarray]:
    header_len = 4 + 4 * ndims
    if len(raw) < 4:
        raise IdxFormatError("file too short for magic number", offset=len(raw), path=path)
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(
            f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0, path=path)
    if len(raw) < header_len:
        raise IdxFormatError("truncated header", offset=len(raw), path=path)
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndims, offset=4))
    expected = int(np.prod(dims))
    available = len(raw) - header_len
    if available < expected:
        raise IdxFormatError(
            f"header declares {expected} bytes of data, found {available}",
            offset=len(raw), path=path)
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_len)
    return dims, data


def load_idx_dataset(images_path: str | Path, labels_path: str | Path,
                     limit: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    (n_images, rows, cols), pixels = _parse_idx(
        _read_bytes(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    (n_labels,), labels = _parse_idx(
        _read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if n_images != n_labels:
        raise IdxFormatError(
            f"{n_images} images but {n_labels} labels", offset=4, path=str(labels_path))

    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if limit is not None:
        features, labels = features[:limit], labels[:limit]
    logger.info("loaded %d IDX samples of %dx%d from %s", len(labels), rows, cols, images_path)
    return Dataset(features=features, labels=labels)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory: str | Path, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SNAPSHOT_PATTERN.format(seed=seed)
    np.savez_compressed(path, features=dataset.features, labels=dataset.labels,
                        seed=np.array(seed, dtype=np.uint64))
    return path


def load_dataset(path: str | Path) -> Dataset:
    with np.load(Path(path)) as data:
        return Dataset(features=data["features"], labels=data["labels"])
