"""Unsupervised product quantization at a matched (M, K) code shape."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from subic.codes import BinaryCode, BlockShape
from subic.errors import BadMagicError, DimensionOverflowError, FormatError, ShapeError, TruncatedFileError

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"SUBQ"
CODEBOOK_VERSION = 1


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences rather than the |a|^2 - 2ab + |b|^2 expansion, so
    # distances are exact enough for tie handling
    out = np.empty((len(points), len(centroids)))
    step = max(1, (1 << 22) // max(1, centroids.size))
    for s in range(0, len(points), step):
        diff = points[s : s + step, None, :] - centroids[None, :, :]
        out[s : s + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    sse: list = field(default_factory=list)
    padded: int = 0


def _plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = _sq_dists(points, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            i = rng.integers(n)
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centers.append(points[i])
        d2 = np.minimum(d2, _sq_dists(points, points[i][None])[:, 0])
    return np.array(centers)


def _repair_empty(points, centroids, assign, d2):
    """Give each empty cluster the point farthest from its centroid in the largest cluster."""
    K = len(centroids)
    counts = np.bincount(assign, minlength=K)
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        if counts[big] < 2:
            break
        members = np.flatnonzero(assign == big)
        far = members[np.argmax(d2[members])]
        centroids[j] = points[far]
        assign[far] = j
        d2[far] = 0.0
        counts[big] -= 1
        counts[j] = 1
    return centroids, assign, d2


def kmeans(points, K: int, iterations: int = 25, seed: int = 0) -> KMeansResult:
    """k-means++ seeding followed by a fixed number of Lloyd iterations.

    ``sse`` holds the within-cluster sum of squares after each assignment step
    and is non-increasing.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"points must be a non-empty 2-D array, got shape {X.shape}")
    if K < 1 or iterations < 1:
        raise ValueError(f"need K >= 1 and iterations >= 1, got K={K}, iterations={iterations}")
    rng = np.random.default_rng(seed)
    padded = 0
    if len(X) < K:
        padded = K - len(X)
        log.warning("kmeans: %d points for %d centroids, padding by duplicating points", len(X), K)
        X_init = np.concatenate([X, X[rng.integers(len(X), size=padded)]])
        centroids = X_init.copy()
    else:
        centroids = _plus_plus(X, K, rng)
    sse = []
    assign = np.zeros(len(X), dtype=np.int64)
    for _ in range(iterations):
        D = _sq_dists(X, centroids)
        assign = np.argmin(D, axis=1)
        d2 = D[np.arange(len(X)), assign]
        if not padded:
            centroids, assign, d2 = _repair_empty(X, centroids, assign, d2)
        sse.append(float(d2.sum()))
        for j in range(K):
            members = assign == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
    return KMeansResult(centroids, assign, sse, padded)


@dataclass(frozen=True)
class PQCodebooks:
    """``centroids[m, k]`` is centroid k of sub-space m (length d / M)."""

    centroids: np.ndarray
    shape: BlockShape

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 3 or c.shape[:2] != (self.shape.M, self.shape.K):
            raise ShapeError(f"centroids must be (M, K, d/M) = ({self.shape.M}, {self.shape.K}, .), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        object.__setattr__(self, "centroids", c)

    @property
    def d(self) -> int:
        return self.shape.M * self.centroids.shape[2]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    def decode(self, code: BinaryCode) -> np.ndarray:
        return np.concatenate([self.centroids[m, k] for m, k in enumerate(code.indices)])


def _subspaces(x: np.ndarray, cb: PQCodebooks) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cb.d:
        raise ShapeError(f"feature dimension {x.shape[-1]} != codebook d = {cb.d}")
    return x.reshape(x.shape[:-1] + (cb.shape.M, cb.sub_dim))


def pq_train(features, shape: BlockShape, iterations: int = 25, seed: int = 0) -> PQCodebooks:
    X = np.asarray(features, dtype=np.float64)
    d = X.shape[1]
    if d % shape.M:
        raise ShapeError(f"feature dimension {d} is not divisible by M = {shape.M}")
    sub = d // shape.M
    seeds = np.random.SeedSequence(seed).generate_state(shape.M)
    books = [
        kmeans(X[:, m * sub : (m + 1) * sub], shape.K, iterations, int(seeds[m])).centroids for m in range(shape.M)
    ]
    return PQCodebooks(np.stack(books), shape)


def pq_encode_many(features, codebooks: PQCodebooks) -> np.ndarray:
    """Nearest-centroid index per sub-space for each row; ties go to the lowest index."""
    xs = _subspaces(np.atleast_2d(features), codebooks)
    out = np.empty(xs.shape[:2], dtype=np.int64)
    for m in range(codebooks.shape.M):
        out[:, m] = np.argmin(_sq_dists(xs[:, m], codebooks.centroids[m]), axis=1)
    return out


def pq_encode(feature, codebooks: PQCodebooks) -> BinaryCode:
    x = np.asarray(feature, dtype=np.float64).reshape(-1)
    return BinaryCode(codebooks.shape, tuple(pq_encode_many(x, codebooks)[0]))


def adc_table(query, codebooks: PQCodebooks) -> np.ndarray:
    """(M, K) table of squared distances from each query sub-vector to each centroid."""
    q = _subspaces(np.asarray(query, dtype=np.float64).reshape(-1), codebooks)
    diff = codebooks.centroids - q[:, None, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def adc_scores(query, codes, codebooks: PQCodebooks) -> np.ndarray:
    """Negated ADC distances for an (n, M) array of codes."""
    table = adc_table(query, codebooks)
    codes = np.asarray(codes, dtype=np.int64)
    acc = table[0, codes[:, 0]].copy()
    for m in range(1, codebooks.shape.M):
        acc += table[m, codes[:, m]]
    return -acc


def pq_adc_score(query, code: BinaryCode, codebooks: PQCodebooks) -> float:
    if code.shape != codebooks.shape:
        raise ShapeError(f"code shape {code.shape} != codebook shape {codebooks.shape}")
    return float(adc_scores(query, np.asarray([code.indices]), codebooks)[0])


def save_codebooks(path, codebooks: PQCodebooks) -> None:
    d, M, K = codebooks.d, codebooks.shape.M, codebooks.shape.K
    if max(d, M, K) > 2**32 - 1:
        raise DimensionOverflowError("codebook dimensions do not fit in u32")
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<4I", CODEBOOK_VERSION, d, M, K))
        f.write(np.ascontiguousarray(codebooks.centroids, dtype="<f8").tobytes())


def load_codebooks(path) -> PQCodebooks:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CODEBOOK_MAGIC:
        if len(raw) < 4:
            raise TruncatedFileError(f"{path}: file too short for header")
        raise BadMagicError(f"{path}: expected magic {CODEBOOK_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: truncated header")
    version, d, M, K = struct.unpack_from("<4I", raw, 4)
    if version != CODEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    try:
        shape = BlockShape(M, K)
    except ShapeError as e:
        raise FormatError(f"{path}: {e}") from None
    if d % M:
        raise FormatError(f"{path}: d={d} not divisible by M={M}")
    if K * d > 2**31:
        raise DimensionOverflowError(f"{path}: codebook too large")
    expected = 20 + 8 * K * d
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    c = np.frombuffer(raw, dtype="<f8", offset=20).astype(np.float64).reshape(M, K, d // M)
    return PQCodebooks(c, shape)
