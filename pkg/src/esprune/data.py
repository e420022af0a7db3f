"""Dataset ingestion and generation.

Supports the CIFAR-10/100 binary layouts, stratified subsampling for cheap
candidate evaluation, and seeded synthetic class-blob images for desk-scale
experiments. Datasets are immutable after construction and safe to share
across evaluation workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR100_RECORD = 3074  # coarse + fine label bytes + pixels


class DataError(ValueError):
    """Malformed dataset file or invalid sampling request."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, channels, height, width), values in [0, 1]
    labels: np.ndarray  # (count,) ints in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise DataError(
                f"images {images.shape} and labels {labels.shape} do not line up"
            )
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError("labels out of range for num_classes")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def _batch_files(path: str | Path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.bin"))
        if not files:
            raise DataError(f"{p}: no .bin batch files found")
        return files
    return [p]


def load_cifar_binary(path, num_classes: int = 10) -> Dataset:
    """Load CIFAR binary batch file(s): a file, a directory of them, or a list.

    Records are 1 label byte (2 for the 100-class layout: coarse then fine,
    the fine label is used) followed by 3072 pixel bytes, channel-major
    R/G/B, row-major within each channel. Pixels are scaled to [0, 1].
    """
    if num_classes == 10:
        record, label_offset = CIFAR10_RECORD, 0
    elif num_classes == 100:
        record, label_offset = CIFAR100_RECORD, 1
    else:
        raise DataError("num_classes must be 10 or 100 for the CIFAR binary layout")
    files = _batch_files(path) if isinstance(path, (str, Path)) else [Path(f) for f in path]
    images, labels = [], []
    for f in files:
        raw = np.frombuffer(Path(f).read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % record != 0:
            raise DataError(
                f"{f}: size {raw.size} bytes is not a multiple of the "
                f"{record}-byte record"
            )
        recs = raw.reshape(-1, record)
        labs = recs[:, label_offset].astype(np.int64)
        if labs.max(initial=0) >= num_classes:
            bad = int(labs.max())
            raise DataError(f"{f}: label byte {bad} out of range for {num_classes} classes")
        images.append(recs[:, label_offset + 1:].reshape(-1, 3, 32, 32))
        labels.append(labs)
    pixels = np.concatenate(images).astype(np.float64) / 255.0
    return Dataset(pixels, np.concatenate(labels), num_classes)


def write_cifar_binary(data: Dataset, path: str | Path) -> None:
    """Inverse of load_cifar_binary for fixtures; 10-class layout only."""
    if data.num_classes != 10:
        raise DataError("fixture writer only supports the 10-class layout")
    recs = np.empty((len(data), CIFAR10_RECORD), dtype=np.uint8)
    recs[:, 0] = data.labels
    recs[:, 1:] = np.round(data.images * 255.0).reshape(len(data), -1)
    Path(path).write_bytes(recs.tobytes())


def stratified_sample(data: Dataset, per_class: int, seed) -> Dataset:
    """Draw exactly per_class examples of every class, without replacement.

    The result is shuffled (deterministically) so fixed-order batches mix
    classes; batch-statistics normalization misbehaves on one-class batches.
    """
    if per_class < 0:
        raise DataError("per_class must be >= 0")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(data.num_classes):
        pool = np.flatnonzero(data.labels == c)
        if len(pool) < per_class:
            raise DataError(
                f"class {c} has only {len(pool)} examples, need {per_class}"
            )
        picks.append(rng.choice(pool, size=per_class, replace=False))
    idx = np.concatenate(picks) if picks else np.array([], dtype=np.int64)
    rng.shuffle(idx)
    return data.subset(idx)


def synthetic(num_classes: int, per_class: int, image_size: int, seed) -> Dataset:
    """Class-conditional blob images a small CNN can fit.

    Each class gets a Gaussian intensity bump at a distinct location with a
    distinct channel tint; tints are maximally spread RGB corners, so up to
    eight classes stay separable even through a global-average-pool head.
    Samples add pixel noise and sub-pixel jitter of the bump center, and the
    returned order interleaves classes. Deterministic for a given seed.
    """
    if min(num_classes, per_class, image_size) < 1:
        raise DataError("num_classes, per_class and image_size must all be >= 1")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = image_size * 0.28
    centers = np.stack([image_size / 2 + radius * np.sin(angles),
                        image_size / 2 + radius * np.cos(angles)], axis=1)
    corners = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])
    tints = 0.35 + 0.6 * corners[np.arange(num_classes) % 8]
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    sigma = max(image_size / 8.0, 1.0)
    images = np.empty((num_classes * per_class, 3, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, c in enumerate(labels):
        cy, cx = centers[c] + rng.normal(0, 0.5, size=2)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = tints[c].reshape(3, 1, 1) * bump
        img = img + rng.normal(0, 0.06, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], num_classes)
