"""Structuring diagnostics for trained encoders and the scoring-cost report."""

from __future__ import annotations

import time

import numpy as np

from subic.codes import BinaryCode, BlockShape, argmax_blocks, softmax_blocks
from subic.network import ModelParams, embed
from subic.search import OpCounter, QueryEmbedding, asymmetric_score, expected_hamming_adds, score_codes


def one_hot_closeness(soft, shape: BlockShape, block: int = 0) -> np.ndarray:
    """Entries of one block sorted in decreasing order, averaged over samples.

    A perfectly one-hot block gives ``[1, 0, ..., 0]``.
    """
    b = np.asarray(soft, dtype=np.float64).reshape(-1, shape.M, shape.K)[:, block, :]
    return -np.sort(-b, axis=1).mean(axis=0)


def support_histogram(indices, shape: BlockShape, block: int = 0) -> np.ndarray:
    """Normalised histogram of the active position of one block, sorted decreasing."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, shape.M)[:, block]
    counts = np.bincount(idx, minlength=shape.K).astype(np.float64)
    if counts.sum() == 0:
        return counts
    return np.sort(counts)[::-1] / counts.sum()


def support_entropy(hist) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def structure_report(features, params: ModelParams, block: int = 0) -> dict:
    """Both curves of the entropy-loss ablation for one block of a trained model."""
    z = embed(np.atleast_2d(features), params)
    soft = softmax_blocks(z, params.shape)
    closeness = one_hot_closeness(soft, params.shape, block)
    hist = support_histogram(argmax_blocks(z, params.shape), params.shape, block)
    return {
        "block": block,
        "closeness": closeness.tolist(),
        "support_histogram": hist.tolist(),
        "top_coordinate": float(closeness[0]),
        "support_entropy_bits": support_entropy(hist),
        "used_support": int(np.count_nonzero(hist)),
    }


def complexity_report(shape: BlockShape, n_records: int = 100_000, repeats: int = 5, seed: int = 0) -> dict:
    """Operation counts for one asymmetric score versus Hamming distance at equal bit-rate,
    plus a measured scan throughput."""
    rng = np.random.default_rng(seed)
    q = QueryEmbedding(rng.random(shape.width), shape)
    counter = OpCounter()
    code = BinaryCode(shape, tuple(rng.integers(0, shape.K, size=shape.M)))
    asymmetric_score(q, code, counter)

    codes = rng.integers(0, shape.K, size=(n_records, shape.M))
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        score_codes(q, codes)
        best = min(best, time.perf_counter() - t0)

    B = shape.bit_rate
    blocks_for_lut = shape.M
    return {
        "M": shape.M,
        "K": shape.K,
        "bit_rate": B,
        "subic_gathers": counter.gathers,
        "subic_additions": counter.additions,
        # the score needs M table look-ups summed; counted as M adds into an accumulator
        "subic_adds": counter.gathers,
        "hamming_expected_adds": expected_hamming_adds(B),
        "hamming_xor_ops": 1,
        "hamming_full_lut_entries": 2**B if B <= 64 else None,
        "hamming_split_lut_blocks": blocks_for_lut,
        "hamming_split_lut_entries": 2 ** (B // blocks_for_lut),
        "records": n_records,
        "scan_seconds": best,
        "scores_per_second": n_records / best if best > 0 else None,
    }
