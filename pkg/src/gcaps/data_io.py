"""IDX dataset ingestion, normalization, batching and class filtering.

Reads the big-endian IDX format used by MNIST-style datasets (image
magic 0x00000803, label magic 0x00000801), transparently decompressing
gzip inputs, and normalizes pixel bytes to [0, 1].  Batch iteration
reshuffles deterministically per epoch from a seed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import substream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray        # (M, H, W) float64 in [0, 1]
    labels: np.ndarray        # (M,) int64
    num_classes: int = 10
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class LabeledBatch:
    images: np.ndarray        # (B, H, W)
    labels: np.ndarray        # (B,)


def _read_binary(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int, rank: int) -> np.ndarray:
    header = 4 * (1 + rank)
    if len(raw) < header:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    got_magic = struct.unpack(">I", raw[:4])[0]
    if got_magic != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got_magic:08x}, "
                              f"expected 0x{magic:08x}")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataFormatError(f"{path}: payload has {len(raw) - header} bytes, "
                              f"expected {count} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: Optional[str] = None,
             num_classes: Optional[int] = None) -> Dataset:
    """Load an images/labels IDX pair into a normalized dataset."""
    images_u8 = _parse_idx(_read_binary(images_path), images_path, IMAGE_MAGIC, rank=3)
    labels_u8 = _parse_idx(_read_binary(labels_path), labels_path, LABEL_MAGIC, rank=1)
    if images_u8.shape[0] != labels_u8.shape[0]:
        raise DataFormatError(
            f"{images_path} has {images_u8.shape[0]} images but "
            f"{labels_path} has {labels_u8.shape[0]} labels")
    labels = labels_u8.astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2) if labels.size else 2
    return Dataset(images=images_u8.astype(np.float64) / 255.0,
                   labels=labels,
                   num_classes=num_classes,
                   name=name or Path(images_path).stem)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of the image loader: floats in [0,1] to IDX bytes."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise DataFormatError(f"expected (M,H,W) images, got shape {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    payload = struct.pack(">IIII", IMAGE_MAGIC, *arr.shape) + pixels.tobytes()
    _write_maybe_gzip(path, payload)


def write_idx_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    payload = struct.pack(">II", LABEL_MAGIC, arr.shape[0]) + arr.tobytes()
    _write_maybe_gzip(path, payload)


def _write_maybe_gzip(path, payload: bytes) -> None:
    from .io_utils import atomic_write_bytes
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6)
    atomic_write_bytes(path, payload)


def filter_class(dataset: Dataset, label: int) -> Dataset:
    mask = dataset.labels == label
    if not mask.any():
        raise ConfigError(f"class filter {label} leaves an empty dataset")
    return Dataset(images=dataset.images[mask], labels=dataset.labels[mask],
                   num_classes=dataset.num_classes,
                   name=f"{dataset.name}[class={label}]")


def subset(dataset: Dataset, limit: int) -> Dataset:
    if limit >= len(dataset):
        return dataset
    return Dataset(images=dataset.images[:limit], labels=dataset.labels[:limit],
                   num_classes=dataset.num_classes, name=dataset.name)


def batch_iter(dataset: Dataset, batch_size: int, seed: int = 0,
               class_filter: Optional[int] = None,
               epochs: Optional[int] = None) -> Iterator[LabeledBatch]:
    """Deterministically shuffled batches; one permutation per epoch.

    Every example appears exactly once per epoch (the final batch may be
    short).  Runs forever unless ``epochs`` is given.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if class_filter is not None:
        dataset = filter_class(dataset, class_filter)
    count = len(dataset)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = substream(seed, "data", epoch).permutation(count)
        for start in range(0, count, batch_size):
            idx = order[start:start + batch_size]
            yield LabeledBatch(images=dataset.images[idx], labels=dataset.labels[idx])
        epoch += 1


def resize_nearest(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize for foreign datasets; not used for the
    native 28x28 inputs."""
    arr = np.asarray(images, dtype=np.float64)
    rows = (np.arange(height) * arr.shape[1] / height).astype(np.int64)
    cols = (np.arange(width) * arr.shape[2] / width).astype(np.int64)
    return arr[:, rows][:, :, cols]
