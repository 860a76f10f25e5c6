"""Datasets of precomputed feature vectors: synthesis, file I/O, splits, batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from subic.errors import BadMagicError, DimensionOverflowError, FormatError, TruncatedFileError

FEATURE_MAGIC = b"SUBF"
LABEL_MAGIC = b"SUBL"
FORMAT_VERSION = 1
_U32_MAX = 2**32 - 1
# refuse headers that would need more than 2**31 elements
MAX_ELEMENTS = 2**31


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    C: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(y) != len(x):
            raise ValueError(f"{len(x)} feature rows but {len(y)} labels")
        if self.C < 1:
            raise ValueError(f"class count must be positive, got {self.C}")
        if y.size and (y.min() < 0 or y.max() >= self.C):
            raise ValueError(f"labels must lie in [0, {self.C})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.C)


def gen_synthetic(n: int, d: int, C: int, class_spread: float, noise: float, seed: int) -> Dataset:
    """Gaussian class clusters.

    Centers are ``class_spread * N(0, I)``; each sample is its class center plus
    ``noise * N(0, I)``.  Sample i belongs to class ``i % C``, so classes are
    balanced with the remainder going to the lowest class ids.
    """
    if C < 2 or n < C:
        raise ValueError(f"need n >= C >= 2, got n={n}, C={C}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if class_spread <= 0 or noise < 0:
        raise ValueError("class_spread must be > 0 and noise >= 0")
    rng = np.random.default_rng(seed)
    centers = class_spread * rng.standard_normal((C, d))
    labels = np.arange(n) % C
    features = centers[labels] + noise * rng.standard_normal((n, d))
    return Dataset(features, labels, C)


def _check_u32(**dims):
    for name, v in dims.items():
        if v > _U32_MAX:
            raise DimensionOverflowError(f"{name}={v} does not fit in u32")


def _read_exact(f, nbytes: int, what: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise TruncatedFileError(f"truncated {what}: wanted {nbytes} bytes, got {len(buf)}")
    return buf


def _read_header(f, magic: bytes, path) -> tuple[int, int, int]:
    head = f.read(4)
    if head != magic:
        if len(head) < 4:
            raise TruncatedFileError(f"{path}: file too short for header")
        raise BadMagicError(f"{path}: expected magic {magic!r}, got {head!r}")
    version, a, b = struct.unpack("<3I", _read_exact(f, 12, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return version, a, b


def _ensure_eof(f, path):
    if f.read(1):
        raise FormatError(f"{path}: trailing bytes after payload")


def save_features(path, features) -> None:
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got {x.shape}")
    n, d = x.shape
    _check_u32(n=n, d=d)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<3I", FORMAT_VERSION, n, d))
        f.write(x.astype("<f4").tobytes(order="C"))


def load_features(path) -> np.ndarray:
    """Load a float32 feature matrix (``.csv`` files are read as headered CSV)."""
    if str(path).lower().endswith(".csv"):
        return _load_features_csv(path)
    with open(path, "rb") as f:
        _, n, d = _read_header(f, FEATURE_MAGIC, path)
        if n * d > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{path}: {n}x{d} exceeds {MAX_ELEMENTS} elements")
        raw = _read_exact(f, 4 * n * d, "feature payload")
        _ensure_eof(f, path)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, d)


def save_labels(path, labels, C: int) -> None:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    _check_u32(n=len(y), C=C)
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<3I", FORMAT_VERSION, len(y), C))
        f.write(y.astype("<u4").tobytes())


def load_labels(path) -> tuple[np.ndarray, int]:
    """Return ``(labels, C)``."""
    if str(path).lower().endswith(".csv"):
        return _load_labels_csv(path)
    with open(path, "rb") as f:
        _, n, C = _read_header(f, LABEL_MAGIC, path)
        if n > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{path}: {n} labels exceeds {MAX_ELEMENTS}")
        raw = _read_exact(f, 4 * n, "label payload")
        _ensure_eof(f, path)
    y = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if y.size and y.max() >= C:
        raise FormatError(f"{path}: label {y.max()} >= C = {C}")
    return y, C


def _load_features_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: missing CSV header")
    body = rows[1:]
    try:
        x = np.array([[float(v) for v in r] for r in body], dtype=np.float32)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if not body:
        return np.zeros((0, len(rows[0])), dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != len(rows[0]):
        raise FormatError(f"{path}: ragged CSV rows")
    return x


def _load_labels_csv(path) -> tuple[np.ndarray, int]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: missing CSV header")
    try:
        y = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: {e}") from None
    if y.size and y.min() < 0:
        raise FormatError(f"{path}: negative label")
    return y, int(y.max()) + 1 if y.size else 0


def load_dataset(features_path, labels_path) -> Dataset:
    x = load_features(features_path)
    y, C = load_labels(labels_path)
    if len(x) != len(y):
        raise FormatError(f"{features_path} has {len(x)} rows, {labels_path} has {len(y)} labels")
    return Dataset(x, y, max(C, 1))


def split_counts(dataset: Dataset, counts: Sequence[int], seed: int) -> tuple[Dataset, ...]:
    """Seeded permutation, then contiguous slices of the given sizes."""
    if any(c < 0 for c in counts) or sum(counts) > dataset.n:
        raise ValueError(f"split sizes {tuple(counts)} do not fit in n={dataset.n}")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    out, start = [], 0
    for c in counts:
        out.append(dataset.subset(perm[start : start + c]))
        start += c
    return tuple(out)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, db, query).

    db and query sizes are ``floor(n * f)``; train gets ``floor(n * f_train)``
    plus, when the fractions sum to one, whatever rounding left over.
    """
    if len(fractions) != 3:
        raise ValueError("expected three fractions (train, db, query)")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    total = float(sum(fractions))
    if total > 1.0 + 1e-12:
        raise ValueError(f"fractions sum to {total} > 1")
    n = dataset.n
    # rounding first keeps e.g. 6200 * (1000/6200) from flooring to 999
    sizes = [int(np.floor(round(n * f, 6))) for f in fractions]
    if abs(total - 1.0) <= 1e-12:
        sizes[0] = n - sizes[1] - sizes[2]
    return split_counts(dataset, sizes, seed)


def batches(dataset, T: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches of exactly T items.

    Every epoch is a fresh seeded permutation; the short tail of an epoch is
    dropped so all batches have the same size.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else dataset.n
    if not 1 <= T <= n:
        raise ValueError(f"batch size {T} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    per_epoch = n // T
    while True:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * T : (b + 1) * T]
