"""Datasets, Dirichlet client partitions and mini-batching.

Images are stored as float32 ``[N, C, H, W]`` arrays already normalized to
per-channel zero mean and unit variance. The normalization constants travel
with the dataset so train and test splits share one transform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
MAX_PARTITION_RETRIES = 100


class DataFormatError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError("dataset must contain at least one sample")
        if self.images.shape[0] != len(self.labels):
            raise ValueError(f"{self.images.shape[0]} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split, self.mean, self.std)


def _normalize(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((pixels - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(uint8 images [N,3,32,32], labels [N])`` from one binary batch file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record (truncated file?)"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def write_cifar_batch(path: str | os.PathLike, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``[N,3,32,32]`` images and labels in the CIFAR-10 record layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE) or images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"expected [N,3,32,32] images and N labels, got {images.shape}/{labels.shape}")
    records = np.concatenate([labels[:, None], images.reshape(len(labels), -1)], axis=1)
    records.tofile(path)


def load_cifar10(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    parts = [read_cifar_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    train_px = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    train_y = np.concatenate([p[1] for p in parts])
    test_raw, test_y = read_cifar_batch(directory / CIFAR_TEST_FILE)
    test_px = test_raw.astype(np.float32) / 255.0

    mean = train_px.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = train_px.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std[std == 0] = 1.0
    train = Dataset(_normalize(train_px, mean, std), train_y, 10, "train", mean, std)
    test = Dataset(_normalize(test_px, mean, std), test_y, 10, "test", mean, std)
    return train, test


# ---------------------------------------------------------------------------
# synthetic stand-in


def class_prototypes(class_count: int, side: int, channels: int = 3, contrast: float = 0.15) -> np.ndarray:
    """Noise-free class images in [0, 1]: oriented colour gratings, one per class.

    Class ``c`` gets orientation ``pi * c / class_count``, a frequency that
    cycles through 1..3 periods per image and a per-channel phase offset, so
    any two classes differ at most pixel positions.
    """
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    protos = np.empty((class_count, channels, side, side), dtype=np.float64)
    for c in range(class_count):
        theta = np.pi * c / class_count
        freq = 1 + c % 3
        proj = (xx * np.cos(theta) + yy * np.sin(theta)) / side
        for ch in range(channels):
            phase = 2 * np.pi * (c * 0.37 + ch / channels)
            protos[c, ch] = 0.5 + contrast * np.sin(2 * np.pi * freq * proj + phase)
    return protos


def synth_dataset(
    class_count: int,
    per_class: int,
    side: int,
    noise_sigma: float,
    seed: int,
    split: str = "train",
) -> Dataset:
    """Balanced prototype-plus-Gaussian-noise images.

    Train and test draws use disjoint noise streams. Normalization constants
    are the expected per-channel moments of the training distribution
    (prototype moments plus noise variance), so both splits share them.
    """
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if side < 8:
        raise ValueError(f"side must be >= 8 so two stride-2 stages leave a 2x2 map, got {side}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if split not in ("train", "test", "server"):
        raise ValueError(f"unknown split {split!r}")

    protos = class_prototypes(class_count, side)
    stream = {"train": 0, "test": 1, "server": 2}[split]
    rng = np.random.default_rng([seed, stream])
    labels = np.repeat(np.arange(class_count), per_class)
    pixels = protos[labels] + noise_sigma * rng.standard_normal((len(labels),) + protos.shape[1:])

    mean = protos.mean(axis=(0, 2, 3))
    std = np.sqrt(protos.var(axis=(0, 2, 3)) + noise_sigma**2)
    mean, std = mean.astype(np.float32), std.astype(np.float32)
    return Dataset(_normalize(pixels.astype(np.float32), mean, std), labels, class_count, split, mean, std)


def export_cifar_format(dataset: Dataset, path: str | os.PathLike) -> None:
    """Store a 32x32 dataset as a CIFAR-10 binary batch (pixels de-normalized and clipped)."""
    if dataset.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise DataFormatError(f"CIFAR format needs [N,3,32,32] images, got {dataset.images.shape}")
    if dataset.class_count > 10:
        raise DataFormatError("CIFAR-10 label bytes only cover 10 classes")
    px = dataset.images * dataset.std[None, :, None, None] + dataset.mean[None, :, None, None]
    write_cifar_batch(path, np.clip(np.rint(px * 255), 0, 255), dataset.labels)


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionSpec:
    alpha: float
    seed: int
    assignments: list[np.ndarray]
    attempts: int = 1

    @property
    def client_counts(self) -> list[int]:
        return [len(a) for a in self.assignments]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


def _dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    g = rng.gamma(alpha, 1.0, size=k)
    s = g.sum()
    if s == 0:  # every gamma draw underflowed; fall back to a single winner
        g = np.zeros(k)
        g[rng.integers(k)] = 1.0
        s = 1.0
    return g / s


def _draw_partition(labels: np.ndarray, k: int, alpha: float, seed: int) -> list[np.ndarray]:
    classes = np.unique(labels)
    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in classes:
        rng = np.random.default_rng([seed, int(c)])
        idx = np.flatnonzero(labels == c)
        p = _dirichlet(rng, alpha, k)
        counts = rng.multinomial(len(idx), p)
        idx = rng.permutation(idx)
        for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[client].append(chunk)
    out = []
    for client, chunks in enumerate(buckets):
        merged = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        rng = np.random.default_rng([seed, 0x5EED, client])
        out.append(rng.permutation(merged).astype(np.int64))
    return out


def dirichlet_partition(labels: Sequence[int], K: int, alpha: float, seed: int) -> PartitionSpec:
    """Split sample indices over ``K`` clients with per-class Dirichlet(alpha) shares.

    For each class a share vector over clients is drawn and that class's
    samples are assigned multinomially. If any client ends up empty the whole
    draw is repeated with ``seed + 1`` (at most 100 attempts).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if K < 1:
        raise PartitionError(f"K must be >= 1, got {K}")
    if alpha <= 0:
        raise PartitionError(f"alpha must be > 0, got {alpha}")
    if K > len(labels):
        raise PartitionError(f"cannot give {K} clients at least one of {len(labels)} samples")
    for attempt in range(MAX_PARTITION_RETRIES):
        assignments = _draw_partition(labels, K, alpha, seed + attempt)
        if all(len(a) for a in assignments):
            return PartitionSpec(alpha, seed, assignments, attempt + 1)
    raise PartitionError(f"every one of {MAX_PARTITION_RETRIES} draws left a client without samples")


def class_histogram(labels: Sequence[int], partition: PartitionSpec, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.stack([np.bincount(labels[a], minlength=class_count) for a in partition.assignments])


def chi_square_uniformity(hist: np.ndarray) -> np.ndarray:
    """Per-client Pearson chi-square of class counts against the global class mix."""
    hist = np.asarray(hist, dtype=np.float64)
    global_share = hist.sum(axis=0) / hist.sum()
    expected = hist.sum(axis=1, keepdims=True) * global_share[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (hist - expected) ** 2 / expected, 0.0)
    return terms.sum(axis=1)


# ---------------------------------------------------------------------------
# batching


def batches(
    dataset: Dataset, indices: Sequence[int], B: int, seed: int, epoch: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches over ``indices``; the short final batch is kept."""
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot batch an empty index set")
    order = np.random.default_rng([seed, epoch]).permutation(idx)
    for start in range(0, len(order), B):
        chunk = order[start : start + B]
        yield dataset.images[chunk], dataset.labels[chunk]
