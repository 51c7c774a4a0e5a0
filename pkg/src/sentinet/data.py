"""Dataset manifests, agreement subsets, stratified folds and image preprocessing.

Manifest CSV (paths relative to the manifest's directory)::

    path,positive_votes,total_annotators
    images/img_0000.ppm,5,5

Class index 1 is *positive*, 0 is *negative*.

Bilinear resizing uses half-pixel centers: output pixel ``i`` samples the
source at ``(i + 0.5) * in / out - 0.5``, clamped to the valid range.  For
example the 2x2 image ``[[0, 10], [20, 30]]`` resized to 4x4 samples rows
and columns at ``0, 0.25, 0.75, 1`` and its first row becomes
``[0, 2.5, 7.5, 10]``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from sentinet import ppm
from sentinet.errors import DataError

NEGATIVE, POSITIVE = 0, 1
MANIFEST_HEADER = ["path", "positive_votes", "total_annotators"]


@dataclass(frozen=True)
class SampleRecord:
    path: str
    positive_votes: int
    total_annotators: int = 5

    def __post_init__(self):
        if self.total_annotators < 1:
            raise DataError(f"{self.path}: total_annotators must be >= 1")
        if not 0 <= self.positive_votes <= self.total_annotators:
            raise DataError(
                f"{self.path}: positive_votes={self.positive_votes} outside [0, {self.total_annotators}]"
            )

    @property
    def label(self) -> int:
        return POSITIVE if 2 * self.positive_votes > self.total_annotators else NEGATIVE

    @property
    def consensus(self) -> int:
        return max(self.positive_votes, self.total_annotators - self.positive_votes)

    def qualifies(self, level: int) -> bool:
        return self.consensus >= level


def load_manifest(path) -> list[SampleRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                votes, total = int(row[1]), int(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: vote counts must be integers, got {row[1:]}") from None
            try:
                records.append(SampleRecord(row[0], votes, total))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def write_manifest(path, records) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.path, r.positive_votes, r.total_annotators])


def filter_agreement(records, level: int) -> list[SampleRecord]:
    """Records whose majority reached at least ``level`` of the annotators."""
    if level not in (3, 4, 5):
        raise DataError(f"agreement level must be 3, 4 or 5, got {level}")
    return [r for r in records if r.qualifies(level)]


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: np.ndarray  # fold index per record

    def split(self, fold: int):
        test = np.flatnonzero(self.folds == fold)
        train = np.flatnonzero(self.folds != fold)
        return train, test

    def sizes(self) -> list[int]:
        return [int(np.sum(self.folds == f)) for f in range(self.k)]

    def digest(self) -> str:
        return hashlib.sha256(self.folds.astype(np.int64).tobytes()).hexdigest()[:16]


def _labels_of(items) -> np.ndarray:
    items = list(items)
    if items and hasattr(items[0], "label"):
        return np.array([r.label for r in items], dtype=np.int64)
    return np.asarray(items, dtype=np.int64)


def kfold(records, k: int, seed: int) -> FoldAssignment:
    """Stratified k-fold assignment.

    Each class is shuffled with the seeded generator and dealt round-robin
    into folds; the deal continues across classes, so fold sizes differ by
    at most one overall and per class.
    """
    labels = _labels_of(records)
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    dealt = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise DataError(f"class {cls} has {len(idx)} samples, fewer than k={k} folds")
        perm = rng.permutation(idx)
        folds[perm] = (dealt + np.arange(len(perm))) % k
        dealt += len(perm)
    return FoldAssignment(k, folds)


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation (divisor n - 1)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size < 2:
        raise DataError(f"summarize needs at least 2 values, got {values.size}")
    return float(values.mean()), float(values.std(ddof=1))


# --------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    resize_to: int = 256
    crop: int = 227
    channel_means: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.crop > self.resize_to:
            raise DataError(f"crop {self.crop} larger than resize_to {self.resize_to}")


FULL_PREPROCESS = PreprocessConfig(256, 227)
MINI_PREPROCESS = PreprocessConfig(72, 63)


def _resize_axis(a: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == out:
        return a
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize an (H, W, C) image to float32 (height, width, C)."""
    a = np.asarray(image, dtype=np.float32)
    return _resize_axis(_resize_axis(a, height, 0), width, 1)


def resize_and_normalize(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Square bilinear resize then mean subtraction; channel-first float32 output."""
    r = config.resize_to
    out = resize_bilinear(image, r, r) - np.asarray(config.channel_means, dtype=np.float32)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def center_offset(size: int, crop: int) -> int:
    return (size - crop) // 2


def center_crop(chw: np.ndarray, crop: int) -> np.ndarray:
    h, w = chw.shape[-2:]
    y, x = center_offset(h, crop), center_offset(w, crop)
    return chw[..., y:y + crop, x:x + crop]


def preprocess(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Resize, subtract channel means and center-crop to (3, crop, crop)."""
    return np.ascontiguousarray(center_crop(resize_and_normalize(image, config), config.crop))


def view_offsets(size: int, crop: int) -> list[tuple[int, int]]:
    """(row, col) of the 5 crops: top-left, top-right, bottom-left, bottom-right, center."""
    far = size - crop
    c = center_offset(size, crop)
    return [(0, 0), (0, far), (far, 0), (far, far), (c, c)]


def oversample_views(resized: np.ndarray, crop: int) -> np.ndarray:
    """Ten test-time views of a (..., 3, R, R) image.

    Views 0-4 are the crops of :func:`view_offsets` in that order, views 5-9
    their horizontal mirrors in the same order.  The view axis is inserted
    before the channel axis.
    """
    crops = [resized[..., y:y + crop, x:x + crop] for y, x in view_offsets(resized.shape[-1], crop)]
    crops += [c[..., ::-1] for c in crops]
    return np.ascontiguousarray(np.stack(crops, axis=-4))


# --------------------------------------------------------------------------
# in-memory datasets


@dataclass(frozen=True)
class LabeledImages:
    """Resized images (N, 3, R, R) float32 with labels and the crop size."""

    images: np.ndarray
    labels: np.ndarray
    crop: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def channel_means(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.images.astype(np.float64).mean(axis=(0, 2, 3)))

    def normalized(self, means) -> "LabeledImages":
        m = np.asarray(means, dtype=np.float32).reshape(1, 3, 1, 1)
        return replace(self, images=self.images - m)

    def center_crops(self) -> np.ndarray:
        return np.ascontiguousarray(center_crop(self.images, self.crop))

    def views(self) -> np.ndarray:
        """(N, 10, 3, crop, crop)."""
        return oversample_views(self.images, self.crop)


def load_dataset(manifest, records=None, config: PreprocessConfig = MINI_PREPROCESS) -> LabeledImages:
    """Decode and resize every record's image (no mean subtraction yet)."""
    manifest = Path(manifest)
    if records is None:
        records = load_manifest(manifest)
    raw = replace(config, channel_means=(0.0, 0.0, 0.0))
    images = np.stack([resize_and_normalize(ppm.load_image(manifest.parent / r.path), raw) for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return LabeledImages(images, labels, config.crop)


# --------------------------------------------------------------------------
# synthetic data


def blob_image(rng: np.random.Generator, size: int, positive: bool, center=None) -> np.ndarray:
    """Noisy background with one colored disc: green-dominant if positive, red otherwise."""
    img = rng.uniform(60, 160, size=3)[None, None, :] + rng.normal(0, 20, size=(size, size, 3))
    radius = rng.uniform(0.18, 0.32) * size
    cy, cx = center if center is not None else rng.uniform(radius, size - radius, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    strong, weak = rng.uniform(170, 255), rng.uniform(0, 110, size=2)
    color = np.array([weak[0], strong, weak[1]]) if positive else np.array([strong, weak[0], weak[1]])
    img[disc] = color + rng.normal(0, 15, size=(int(disc.sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _votes(rng: np.random.Generator, positive: bool, annotators: int = 5) -> int:
    q = rng.uniform(0.7, 1.0)
    while True:
        agree = int(rng.binomial(annotators, q))
        if 2 * agree > annotators:
            break
    return agree if positive else annotators - agree


def synth_dataset(n: int, size: int, seed: int, out_dir) -> list[SampleRecord]:
    """Write ``n`` PPM images plus ``manifest.csv`` under ``out_dir``.

    Classes alternate (even index positive).  Each image gets a consensus
    probability in [0.7, 1.0]; annotator votes are drawn from it and
    redrawn until the majority matches the image's class, so every
    agreement tier is populated without label noise.
    """
    if n < 2:
        raise DataError(f"synth_dataset needs n >= 2, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        positive = i % 2 == 0
        rel = f"images/img_{i:04d}.ppm"
        ppm.save_image(out / rel, blob_image(rng, size, positive))
        records.append(SampleRecord(rel, _votes(rng, positive)))
    write_manifest(out / "manifest.csv", records)
    return records
