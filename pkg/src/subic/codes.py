"""Block-structured code mathematics.

A code of shape (M, K) is a concatenation of M blocks of length K.  Relaxed
(training-time) codes live in the product of simplices, binary (test-time)
codes pick one active position per block.  All entropies are in bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from subic.errors import FormatError, ShapeError

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class BlockShape:
    M: int
    K: int

    def __post_init__(self):
        if int(self.M) != self.M or int(self.K) != self.K:
            raise ShapeError(f"block shape must be integral, got M={self.M}, K={self.K}")
        if self.M < 1:
            raise ShapeError(f"M must be >= 1, got {self.M}")
        if self.K < 2:
            raise ShapeError(f"K must be >= 2, got {self.K}")

    @property
    def bits_per_block(self) -> int:
        # ceil(log2 K) without floating point
        return (self.K - 1).bit_length()

    @property
    def bit_rate(self) -> int:
        return self.M * self.bits_per_block

    @property
    def width(self) -> int:
        return self.M * self.K

    @property
    def record_bytes(self) -> int:
        return (self.bit_rate + 7) // 8


@dataclass(frozen=True)
class SoftCode:
    """Relaxed code: M blocks, each a probability vector of length K."""

    shape: BlockShape
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.shape.width:
            raise ShapeError(f"expected {self.shape.width} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("soft code contains non-finite values")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("soft code entries must lie in [0, 1]")
        sums = v.reshape(self.shape.M, self.shape.K).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
            raise ValueError(f"soft code blocks must sum to 1, got {sums}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def blocks(self) -> np.ndarray:
        return self.values.reshape(self.shape.M, self.shape.K)


@dataclass(frozen=True)
class BinaryCode:
    """One active index per block."""

    shape: BlockShape
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in np.asarray(self.indices).reshape(-1))
        if len(idx) != self.shape.M:
            raise ShapeError(f"expected {self.shape.M} indices, got {len(idx)}")
        for i in idx:
            if not 0 <= i < self.shape.K:
                raise ValueError(f"index {i} outside [0, {self.shape.K})")
        object.__setattr__(self, "indices", idx)

    def dense(self) -> np.ndarray:
        """One-hot expansion of length M*K."""
        out = np.zeros(self.shape.width)
        out[np.arange(self.shape.M) * self.shape.K + np.asarray(self.indices)] = 1.0
        return out


def _as_blocks(z, shape: BlockShape) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != shape.width:
        raise ShapeError(f"last dimension {z.shape[-1]} != M*K = {shape.width}")
    if not np.all(np.isfinite(z)):
        raise ValueError("input contains non-finite values")
    return z.reshape(z.shape[:-1] + (shape.M, shape.K))


def softmax_blocks(z, shape: BlockShape) -> np.ndarray:
    """Vectorised block softmax over the last axis; returns the same shape as ``z``."""
    zb = _as_blocks(z, shape)
    e = np.exp(zb - zb.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return out.reshape(np.shape(z))


def argmax_blocks(z, shape: BlockShape) -> np.ndarray:
    """Per-block argmax indices, shape ``z.shape[:-1] + (M,)``.

    np.argmax returns the first maximal position, which is the lowest-index
    tie rule.
    """
    return np.argmax(_as_blocks(z, shape), axis=-1)


def block_entropies(p, shape: BlockShape) -> np.ndarray:
    """Entropy in bits of each block, with 0 log 0 = 0.  No validation."""
    pb = np.asarray(p, dtype=np.float64).reshape(np.shape(p)[:-1] + (shape.M, shape.K))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pb > 0.0, pb * np.log2(np.where(pb > 0.0, pb, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def block_softmax(z, shape: BlockShape) -> SoftCode:
    return SoftCode(shape, softmax_blocks(np.asarray(z).reshape(-1), shape))


def block_one_hot(z, shape: BlockShape) -> BinaryCode:
    return BinaryCode(shape, tuple(argmax_blocks(np.asarray(z).reshape(-1), shape)))


def entropy(p) -> float:
    """Entropy in bits of a single probability vector."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty distribution")
    if np.any(p < 0.0):
        raise ValueError("negative probability")
    if abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0.0]
    h = -float(np.sum(nz * np.log2(nz)))
    # -0.0 for deterministic inputs
    return max(h, 0.0)


def code_entropy(c: SoftCode) -> float:
    return float(sum(entropy(b) for b in c.blocks))


def _stack(batch: Sequence[SoftCode]) -> tuple[BlockShape, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    shape = batch[0].shape
    for c in batch:
        if c.shape != shape:
            raise ShapeError(f"mixed shapes in batch: {shape} vs {c.shape}")
    return shape, np.stack([c.values for c in batch])


def mean_entropy(batch: Sequence[SoftCode]) -> float:
    """Average per-block entropy over a batch: (1/TM) sum_i sum_m E(b_m^(i))."""
    shape, arr = _stack(batch)
    return float(block_entropies(arr, shape).mean())


def batch_entropy(batch: Sequence[SoftCode]) -> float:
    """(1/M) E(b_bar), b_bar the batch-averaged code.  Positive; callers negate."""
    shape, arr = _stack(batch)
    bbar = arr.mean(axis=0)
    return float(block_entropies(bbar, shape).mean())


def projection_residual(c: SoftCode) -> np.ndarray:
    """Per-block Euclidean distance to the nearest one-hot vertex."""
    b = c.blocks
    d = b.copy()
    d[np.arange(c.shape.M), np.argmax(b, axis=1)] -= 1.0
    return np.sqrt(np.sum(d * d, axis=1))


def pack_many(indices, shape: BlockShape) -> np.ndarray:
    """Pack an (n, M) index array into an (n, record_bytes) uint8 array.

    Each index takes ceil(log2 K) bits, MSB first, blocks in order; records are
    zero-padded to a byte boundary.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[1] != shape.M:
        raise ShapeError(f"expected (n, {shape.M}) indices, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= shape.K):
        raise ValueError(f"indices must lie in [0, {shape.K})")
    if len(idx) == 0:
        return np.zeros((0, shape.record_bytes), dtype=np.uint8)
    nbits = shape.bits_per_block
    shifts = np.arange(nbits - 1, -1, -1)
    bits = ((idx[:, :, None] >> shifts) & 1).astype(np.uint8).reshape(len(idx), -1)
    return np.packbits(bits, axis=1).reshape(len(idx), shape.record_bytes)


def unpack_many(buf, shape: BlockShape, count: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_many`; ``buf`` is bytes or a uint8 array."""
    raw = np.frombuffer(bytes(buf), dtype=np.uint8) if not isinstance(buf, np.ndarray) else buf
    raw = raw.reshape(-1)
    rb = shape.record_bytes
    if count is None:
        if raw.size % rb:
            raise FormatError(f"{raw.size} bytes is not a multiple of record size {rb}")
        count = raw.size // rb
    if raw.size != count * rb:
        raise FormatError(f"expected {count * rb} bytes for {count} records, got {raw.size}")
    nbits = shape.bits_per_block
    bits = np.unpackbits(raw.reshape(count, rb), axis=1)[:, : shape.bit_rate]
    weights = 1 << np.arange(nbits - 1, -1, -1, dtype=np.int64)
    idx = bits.reshape(count, shape.M, nbits).astype(np.int64) @ weights
    if idx.size and idx.max() >= shape.K:
        raise FormatError(f"decoded index {idx.max()} >= K = {shape.K}")
    return idx


def pack(code: BinaryCode) -> bytes:
    return pack_many([code.indices], code.shape).tobytes()


def unpack(data: Union[bytes, bytearray], shape: BlockShape) -> BinaryCode:
    return BinaryCode(shape, tuple(unpack_many(data, shape, count=1)[0]))
