"""Supervised structured binary codes: encoder, index, evaluation and PQ baseline."""

from subic.codes import (
    BinaryCode,
    BlockShape,
    SoftCode,
    batch_entropy,
    block_one_hot,
    block_softmax,
    code_entropy,
    entropy,
    mean_entropy,
    pack,
    projection_residual,
    unpack,
)

__version__ = "0.1.0"

__all__ = [
    "BinaryCode",
    "BlockShape",
    "SoftCode",
    "batch_entropy",
    "block_one_hot",
    "block_softmax",
    "code_entropy",
    "entropy",
    "mean_entropy",
    "pack",
    "projection_residual",
    "unpack",
]
