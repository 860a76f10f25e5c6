"""Packed code index, asymmetric scoring, ranking and AP/mAP."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from subic.codes import BinaryCode, BlockShape, argmax_blocks, pack_many, unpack_many
from subic.errors import BadMagicError, DimensionOverflowError, FormatError, ShapeError, TruncatedFileError
from subic.network import ModelParams, embed

INDEX_MAGIC = b"SUBC"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIHHB")


@dataclass(frozen=True)
class CodeIndex:
    shape: BlockShape
    packed: bytes = field(repr=False)
    ids: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.packed) != len(ids) * self.shape.record_bytes:
            raise ShapeError(
                f"packed buffer has {len(self.packed)} bytes, expected {len(ids)} x {self.shape.record_bytes}"
            )
        if len(np.unique(ids)) != len(ids):
            raise ValueError("record ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "packed", bytes(self.packed))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(ids):
                raise ShapeError(f"{len(ids)} records but {len(labels)} labels")
            object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return len(self.ids)

    def codes(self) -> np.ndarray:
        """Decoded (count, M) index array."""
        return unpack_many(self.packed, self.shape, self.count)

    def code(self, i: int) -> BinaryCode:
        rb = self.shape.record_bytes
        rec = self.packed[i * rb : (i + 1) * rb]
        return BinaryCode(self.shape, tuple(unpack_many(rec, self.shape, 1)[0]))

    @classmethod
    def from_codes(cls, indices, shape: BlockShape, ids=None, labels=None) -> "CodeIndex":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, shape.M)
        if ids is None:
            ids = np.arange(len(idx))
        return cls(shape, pack_many(idx, shape).tobytes(), ids, labels)


@dataclass(frozen=True)
class QueryEmbedding:
    z: np.ndarray
    shape: BlockShape

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if z.size != self.shape.width:
            raise ShapeError(f"embedding has {z.size} entries, expected {self.shape.width}")
        if not np.all(np.isfinite(z)):
            raise ValueError("query embedding is not finite")
        if np.any(z < 0):
            raise ValueError("query embedding must be non-negative")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class RankedList:
    """Record ids by descending score, ties by ascending id."""

    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class OpCounter:
    gathers: int = 0
    additions: int = 0


def encode_database(features, params: ModelParams, ids=None, labels=None) -> CodeIndex:
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        return CodeIndex.from_codes(np.zeros((0, params.shape.M), dtype=np.int64), params.shape, ids=[], labels=None if labels is None else [])
    x = np.atleast_2d(x)
    codes = argmax_blocks(embed(x, params), params.shape)
    return CodeIndex.from_codes(codes, params.shape, ids=ids, labels=labels)


def embed_query(x, params: ModelParams) -> QueryEmbedding:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return QueryEmbedding(embed(x, params), params.shape)


def asymmetric_score(q: QueryEmbedding, code: BinaryCode, counter: Optional[OpCounter] = None) -> float:
    """sum_m z[m*K + code[m]]: M gathers and M-1 additions."""
    if q.shape != code.shape:
        raise ShapeError(f"query shape {q.shape} != code shape {code.shape}")
    K = q.shape.K
    z = q.z
    total = float(z[code.indices[0]])
    for m in range(1, q.shape.M):
        total += float(z[m * K + code.indices[m]])
    if counter is not None:
        counter.gathers += q.shape.M
        counter.additions += q.shape.M - 1
    return total


def score_codes(q: QueryEmbedding, codes: np.ndarray) -> np.ndarray:
    """Vectorised asymmetric scores for an (n, M) index array.

    Accumulates block by block in the same order as :func:`asymmetric_score`,
    so both give bit-identical results.
    """
    shape = q.shape
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[1] != shape.M:
        raise ShapeError(f"expected (n, {shape.M}) codes, got {codes.shape}")
    table = q.z.reshape(shape.M, shape.K)
    scores = table[0, codes[:, 0]].copy()
    for m in range(1, shape.M):
        scores += table[m, codes[:, m]]
    return scores


def rank(scores, ids, top_k: Optional[int] = None) -> RankedList:
    """Sort by descending score then ascending id and keep ``top_k``."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    order = np.lexsort((ids, -scores))
    if top_k is not None:
        order = order[:top_k]
    return RankedList(ids[order], scores[order])


def search(q: QueryEmbedding, index: CodeIndex, top_k: int) -> RankedList:
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if index.count == 0:
        raise ValueError("cannot search an empty index")
    if q.shape != index.shape:
        raise ShapeError(f"query shape {q.shape} != index shape {index.shape}")
    return rank(score_codes(q, index.codes()), index.ids, top_k)


def symmetric_score(a: BinaryCode, b: BinaryCode) -> int:
    """Number of blocks on which two codes agree."""
    if a.shape != b.shape:
        raise ShapeError(f"code shapes differ: {a.shape} vs {b.shape}")
    return sum(1 for i, j in zip(a.indices, b.indices) if i == j)


def expected_hamming_adds(B: int) -> float:
    """Expected differing bits between two i.i.d. uniform B-bit hashes."""
    if B < 1:
        raise ValueError(f"bit count must be >= 1, got {B}")
    return B / 2.0


def average_precision(ranking, relevant) -> float:
    """Non-interpolated AP: summed precision at each relevant hit over |relevant|.

    ``ranking`` is a RankedList or a sequence of ids.
    """
    rel = set(int(r) for r in relevant)
    if not rel:
        raise ValueError("empty relevant set")
    ids = ranking.ids if isinstance(ranking, RankedList) else ranking
    hits = np.isin(np.asarray(ids, dtype=np.int64), np.fromiter(rel, dtype=np.int64))
    if not hits.any():
        return 0.0
    positions = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(positions) + 1) / positions
    return float(precision.sum() / len(rel))


@dataclass(frozen=True)
class MAPResult:
    mean_ap: float
    per_query: dict
    skipped: list


def mean_average_precision(queries: Iterable[tuple]) -> MAPResult:
    """mAP over ``(query_id, ranking, relevant)`` triples.

    Queries with an empty relevant set are skipped and listed in ``skipped``.
    """
    per_query, skipped = {}, []
    for qid, ranking, relevant in queries:
        if len(relevant) == 0:
            skipped.append(qid)
            continue
        per_query[qid] = average_precision(ranking, relevant)
    if not per_query:
        raise ValueError("no query with a non-empty relevant set")
    return MAPResult(float(np.mean(list(per_query.values()))), per_query, skipped)


def category_map(rankings: Sequence[RankedList], query_labels, index: CodeIndex) -> MAPResult:
    """Category retrieval mAP: relevant records share the query's label."""
    if index.labels is None:
        raise ValueError("index has no labels")
    by_label: dict[int, np.ndarray] = {}
    for lab in np.unique(index.labels):
        by_label[int(lab)] = index.ids[index.labels == lab]
    triples = [
        (i, r, by_label.get(int(lab), np.zeros(0, dtype=np.int64))) for i, (r, lab) in enumerate(zip(rankings, query_labels))
    ]
    return mean_average_precision(triples)


def save_index(path, index: CodeIndex) -> None:
    M, K = index.shape.M, index.shape.K
    if index.count > 2**32 - 1 or M > 0xFFFF or K > 0xFFFF:
        raise DimensionOverflowError(f"index with count={index.count}, M={M}, K={K} does not fit the header")
    if index.count and (index.ids.min() < 0 or index.ids.max() > 2**32 - 1):
        raise DimensionOverflowError("record ids must fit in u32")
    has_labels = index.labels is not None
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.count, M, K, int(has_labels)))
        f.write(index.ids.astype("<u4").tobytes())
        if has_labels:
            f.write(index.labels.astype("<u4").tobytes())
        f.write(index.packed)


def load_index(path) -> CodeIndex:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != INDEX_MAGIC:
        if len(raw) < 4:
            raise TruncatedFileError(f"{path}: file too short for header")
        raise BadMagicError(f"{path}: expected magic {INDEX_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, count, M, K, flag = _HEADER.unpack_from(raw)
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    if flag not in (0, 1):
        raise FormatError(f"{path}: bad label flag {flag}")
    try:
        shape = BlockShape(M, K)
    except ShapeError as e:
        raise FormatError(f"{path}: {e}") from None
    if count > 2**31:
        raise DimensionOverflowError(f"{path}: {count} records is too many")
    off = _HEADER.size
    expected = off + 4 * count * (1 + flag) + count * shape.record_bytes
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    ids = np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64)
    off += 4 * count
    labels = None
    if flag:
        labels = np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64)
        off += 4 * count
    packed = raw[off:]
    unpack_many(packed, shape, count)  # rejects indices >= K
    try:
        return CodeIndex(shape, packed, ids, labels)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_results(path, results: Sequence[tuple]) -> None:
    """Search results CSV from ``(query_id, RankedList)`` pairs."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "rank", "db_id", "score"])
        for qid, ranked in results:
            for r, (i, s) in enumerate(zip(ranked.ids, ranked.scores), start=1):
                w.writerow([qid, r, int(i), repr(float(s))])


def read_results(path) -> dict:
    """Inverse of :func:`write_results`: ``{query_id: RankedList}`` in rank order."""
    rows: dict[int, list] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["query_id", "rank", "db_id", "score"]:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.setdefault(int(row["query_id"]), []).append((int(row["rank"]), int(row["db_id"]), float(row["score"])))
    out = {}
    for qid, items in rows.items():
        items.sort()
        out[qid] = RankedList(np.array([i for _, i, _ in items], dtype=np.int64), np.array([s for _, _, s in items]))
    return out
