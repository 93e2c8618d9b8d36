"""Crop dataset ingestion, min-max scaling, sharding and train/test splitting."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError

FEATURES = ("N", "P", "K", "temperature", "humidity", "ph", "rainfall")
LABEL_COLUMN = "label"
CROP_CSV_ENV = "FEDCROP_CROP_CSV"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    feature_names: tuple[str, ...] = FEATURES

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index outside class_names")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], list(self.class_names), self.feature_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def rows(self) -> set[tuple]:
        """Rows as hashable tuples, for partition checks."""
        return {tuple(f) + (int(l),) for f, l in zip(self.features.tolist(), self.labels.tolist())}


@dataclass
class FeatureStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if np.any(self.minimum > self.maximum):
            raise DataError("feature min exceeds max")

    @classmethod
    def of(cls, features: np.ndarray) -> "FeatureStats":
        return cls(features.min(axis=0), features.max(axis=0))

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}


def load_csv(path, class_names: Sequence[str] | None = None) -> Dataset:
    """Read a crop CSV with header ``N,P,K,temperature,humidity,ph,rainfall,label``.

    Labels are indexed by their sorted unique text. Passing ``class_names``
    fixes the mapping instead (eval-only mode) and rejects labels outside it.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_csv(fh, str(path), class_names)


def loads_csv(text: str, class_names: Sequence[str] | None = None) -> Dataset:
    return _parse_csv(io.StringIO(text), "<string>", class_names)


def _parse_csv(fh, source: str, class_names) -> Dataset:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{source}: empty file") from None
    missing = [c for c in FEATURES + (LABEL_COLUMN,) if c not in header]
    if missing:
        raise DataError(f"{source}: missing column(s) {missing}")
    cols = [header.index(c) for c in FEATURES]
    label_col = header.index(LABEL_COLUMN)

    rows, labels = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataError(f"{source}: row {lineno} has {len(row)} cells, expected {len(header)}")
        try:
            values = [float(row[c]) for c in cols]
        except ValueError:
            bad = next(header[c] for c in cols if not _is_float(row[c]))
            raise DataError(f"{source}: row {lineno}: non-numeric value in column {bad!r}") from None
        if not all(np.isfinite(values)):
            raise DataError(f"{source}: row {lineno}: non-finite value")
        rows.append(values)
        labels.append(row[label_col].strip())
    if not rows:
        raise DataError(f"{source}: no data rows")

    if class_names is None:
        class_names = sorted(set(labels))
    else:
        class_names = list(class_names)
    index = {name: i for i, name in enumerate(class_names)}
    encoded = []
    for lineno, lab in enumerate(labels, start=2):
        if lab not in index:
            raise DataError(f"{source}: row {lineno}: unknown label {lab!r}")
        encoded.append(index[lab])
    return Dataset(np.array(rows), np.array(encoded), list(class_names))


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def dumps_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(dataset.feature_names) + [LABEL_COLUMN])
    for feats, lab in zip(dataset.features.tolist(), dataset.labels.tolist()):
        writer.writerow([repr(v) for v in feats] + [dataset.class_names[lab]])
    return buf.getvalue()


def write_csv(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_csv(dataset), encoding="utf-8")


def preprocess(dataset: Dataset, stats: FeatureStats | None = None) -> tuple[Dataset, FeatureStats]:
    """Min-max scale every feature.

    Constant features map to 0. With externally supplied ``stats`` values may
    fall outside [0, 1]; they are passed through unclamped.
    """
    if stats is None:
        stats = FeatureStats.of(dataset.features)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (dataset.features - stats.minimum) / safe, 0.0)
    return Dataset(scaled, dataset.labels.copy(), list(dataset.class_names), dataset.feature_names), stats


def split_shards(dataset: Dataset, k: int, stratified: bool = True, seed: int = 0) -> list[Dataset]:
    """Partition ``dataset`` into ``k`` disjoint shards covering every row.

    Stratified mode deals each class out so every shard holds the floor or the
    ceiling of ``count / k`` samples of it; which shards get the remainders
    rotates across classes to keep shard sizes balanced.
    """
    if k < 1:
        raise ConfigurationError(f"shard count must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    if not stratified:
        perm = rng.permutation(len(dataset))
        return [dataset.subset(part) for part in np.array_split(perm, k)]

    counts = dataset.class_counts()
    small = [dataset.class_names[c] for c in range(dataset.num_classes) if 0 < counts[c] < k]
    if small:
        raise DataError(f"classes {small} have fewer than {k} samples; cannot stratify")
    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
    offset = 0
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        parts = np.array_split(idx, k)  # larger parts first
        for j, part in enumerate(parts):
            buckets[(j + offset) % k].append(part)
        offset = (offset + idx.size % k) % k
    shards = []
    for parts in buckets:
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        shards.append(dataset.subset(rng.permutation(idx)))
    return shards


def train_test_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes round(count * test_fraction) test rows."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_test = int(np.floor(idx.size * test_fraction + 0.5))
        if idx.size > 1:
            n_test = min(max(n_test, 1), idx.size - 1)
        test_parts.append(idx[:n_test])
        train_parts.append(idx[n_test:])
    train = np.concatenate(train_parts)
    test = np.concatenate(test_parts)
    if train.size == 0 or test.size == 0:
        raise ConfigurationError("split leaves an empty side")
    return dataset.subset(rng.permutation(train)), dataset.subset(rng.permutation(test))


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Index batches covering ``range(n)``; ceil(n / batch_size) of them."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# Per-crop (low, high) ranges for each feature, approximating the public
# 2200-row crop recommendation table. Used to regenerate a stand-in dataset
# when the original CSV is not available.
_CROP_RANGES = {
    "rice":        ((60, 99), (35, 60), (35, 45), (20.0, 26.9), (80.1, 85.0), (5.0, 7.9), (182.6, 298.6)),
    "maize":       ((60, 100), (35, 60), (15, 25), (18.0, 26.5), (55.3, 75.0), (5.5, 7.0), (60.6, 109.8)),
    "chickpea":    ((20, 60), (55, 80), (75, 85), (17.0, 21.0), (14.3, 20.0), (6.0, 8.9), (65.1, 95.0)),
    "kidneybeans": ((0, 40), (55, 80), (15, 25), (15.3, 25.0), (18.1, 25.0), (5.5, 6.0), (60.3, 150.0)),
    "pigeonpeas":  ((0, 40), (55, 80), (15, 25), (18.3, 37.0), (30.4, 69.7), (4.5, 7.4), (90.1, 198.8)),
    "mothbeans":   ((0, 40), (35, 60), (15, 25), (24.0, 32.0), (40.0, 65.0), (3.5, 9.9), (30.9, 74.4)),
    "mungbean":    ((0, 40), (35, 60), (15, 25), (27.0, 30.0), (80.0, 90.0), (6.2, 7.2), (36.1, 60.0)),
    "blackgram":   ((20, 60), (55, 80), (15, 25), (25.1, 35.0), (60.1, 70.0), (6.5, 7.8), (60.4, 75.0)),
    "lentil":      ((0, 40), (55, 80), (15, 25), (18.1, 30.0), (60.1, 70.0), (5.9, 7.8), (35.0, 55.0)),
    "pomegranate": ((0, 40), (5, 30), (35, 45), (18.1, 25.0), (85.1, 95.0), (5.6, 7.2), (102.5, 112.5)),
    "banana":      ((80, 120), (70, 95), (45, 55), (25.0, 30.0), (75.0, 85.0), (5.5, 6.5), (90.1, 120.0)),
    "mango":       ((0, 40), (15, 40), (25, 35), (27.0, 36.0), (45.0, 55.0), (4.5, 7.0), (89.3, 101.0)),
    "grapes":      ((0, 40), (120, 145), (195, 205), (8.8, 42.0), (80.0, 84.0), (5.5, 6.5), (65.0, 75.0)),
    "watermelon":  ((80, 120), (5, 30), (45, 55), (24.0, 27.0), (80.0, 90.0), (6.0, 7.0), (40.1, 60.0)),
    "muskmelon":   ((80, 120), (5, 30), (45, 55), (27.0, 30.0), (90.0, 95.0), (6.0, 6.8), (20.2, 30.0)),
    "apple":       ((0, 40), (120, 145), (195, 205), (21.0, 24.0), (90.0, 95.0), (5.5, 6.5), (100.1, 125.0)),
    "orange":      ((0, 40), (5, 30), (5, 15), (10.0, 35.0), (90.0, 95.0), (6.0, 8.0), (100.2, 120.0)),
    "papaya":      ((31, 70), (46, 70), (45, 55), (23.0, 44.0), (90.0, 95.0), (6.5, 7.0), (40.4, 248.9)),
    "coconut":     ((0, 40), (5, 30), (25, 35), (25.0, 30.0), (90.0, 100.0), (5.5, 6.5), (131.1, 225.6)),
    "cotton":      ((100, 140), (35, 60), (15, 25), (22.0, 26.0), (75.0, 85.0), (5.8, 8.0), (60.7, 100.0)),
    "jute":        ((60, 100), (35, 60), (35, 45), (23.1, 27.0), (70.9, 90.0), (6.0, 7.5), (150.2, 200.0)),
    "coffee":      ((80, 120), (15, 40), (25, 35), (23.1, 28.0), (50.0, 70.0), (6.0, 7.5), (115.2, 199.5)),
}


def synthetic_crop_dataset(per_class: int = 100, seed: int = 2200) -> Dataset:
    """Stand-in for the crop recommendation table: 22 crops, 7 features.

    Soil nutrients are integers; climate features carry 6 decimals, like the
    original file.
    """
    rng = np.random.default_rng(seed)
    names = sorted(_CROP_RANGES)
    feats, labels = [], []
    for ci, name in enumerate(names):
        lo = np.array([r[0] for r in _CROP_RANGES[name]], dtype=float)
        hi = np.array([r[1] for r in _CROP_RANGES[name]], dtype=float)
        x = rng.uniform(lo, hi, size=(per_class, len(FEATURES)))
        x[:, :3] = np.round(x[:, :3])
        x[:, 3:] = np.round(x[:, 3:], 6)
        feats.append(x)
        labels.append(np.full(per_class, ci))
    order = rng.permutation(per_class * len(names))
    return Dataset(np.vstack(feats)[order], np.concatenate(labels)[order], names)


def bundled_csv_path() -> Path:
    return Path(__file__).with_name("resources") / "crop_recommendation.csv"


def load_crop_dataset(path=None) -> Dataset:
    """Load the crop CSV from ``path``, ``$FEDCROP_CROP_CSV`` or the bundled copy."""
    path = path or os.environ.get(CROP_CSV_ENV) or bundled_csv_path()
    return load_csv(path)

CROP_CLASSES = tuple(sorted(_CROP_RANGES))
