"""Encoder/classifier network trained on precomputed features.

    x -> FC0 -> ReLU -> z -> block softmax -> b~ -> FC1 -> softmax -> s

At test time the block softmax is replaced by a per-block argmax.  The
objective for a mini-batch of size T is

    mean_i cls(s_i, y_i)
      + gamma / (M log2 K) * mean_i E(b~_i)
      - mu    / (M log2 K) * E(mean_i b~_i)

with ``cls(s, y) = -log2 s[y] / log2 C`` and E the summed per-block entropy.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from subic.codes import BinaryCode, BlockShape, SoftCode, argmax_blocks, block_entropies, softmax_blocks
from subic.data import Dataset, batches
from subic.errors import (
    BadMagicError,
    DimensionOverflowError,
    DivergenceError,
    FormatError,
    ShapeError,
    TruncatedFileError,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
MODEL_MAGIC = b"SUBM"
MODEL_VERSION = 1
LOG_COLUMNS = ("batch", "total", "cls", "mean_ent", "batch_ent")


@dataclass
class ModelParams:
    W0: np.ndarray
    bias0: np.ndarray
    W1: np.ndarray
    bias1: np.ndarray
    shape: BlockShape

    def __post_init__(self):
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        self.bias0 = np.asarray(self.bias0, dtype=np.float64).reshape(-1)
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.bias1 = np.asarray(self.bias1, dtype=np.float64).reshape(-1)
        w = self.shape.width
        if self.W0.ndim != 2 or self.W0.shape[1] != w or self.bias0.shape != (w,):
            raise ShapeError(f"FC0 must be d x {w} with bias {w}, got {self.W0.shape}, {self.bias0.shape}")
        if self.W1.ndim != 2 or self.W1.shape[0] != w or self.bias1.shape != (self.W1.shape[1],):
            raise ShapeError(f"FC1 must be {w} x C with bias C, got {self.W1.shape}, {self.bias1.shape}")

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def C(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.W0, self.bias0, self.W1, self.bias1

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, theta: np.ndarray) -> "ModelParams":
        parts, start = [], 0
        for a in self.arrays():
            parts.append(np.asarray(theta[start : start + a.size]).reshape(a.shape).copy())
            start += a.size
        return ModelParams(*parts, shape=self.shape)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()), shape=self.shape)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 1.0
    mu: float = 1.0
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 200
    num_batches: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.mu < 0:
            raise ValueError(f"gamma and mu must be >= 0, got {self.gamma}, {self.mu}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.num_batches < 0:
            raise ValueError(f"num_batches must be >= 0, got {self.num_batches}")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")


@dataclass
class ForwardTrace:
    """Batched forward pass; every array has one row per sample."""

    x: np.ndarray
    pre: np.ndarray
    z: np.ndarray
    soft: np.ndarray
    probs: np.ndarray
    shape: BlockShape

    def soft_codes(self) -> list[SoftCode]:
        return [SoftCode(self.shape, row) for row in self.soft]


@dataclass(frozen=True)
class LossBreakdown:
    """Batch loss and its weighted components (``total = cls + mean_ent + batch_ent``).

    ``mean_entropy_bits`` and ``batch_entropy_bits`` are the unweighted per-block
    averages, both in ``[0, log2 K]``.
    """

    total: float
    cls: float
    mean_ent: float
    batch_ent: float
    mean_entropy_bits: float
    batch_entropy_bits: float


def init_params(d: int, shape: BlockShape, C: int, seed: int) -> ModelParams:
    if d < 1 or C < 1:
        raise ValueError(f"dimensions must be positive, got d={d}, C={C}")
    rng = np.random.default_rng(seed)
    w = shape.width
    a0 = math.sqrt(6.0 / (d + w))
    a1 = math.sqrt(6.0 / (w + C))
    W0 = rng.uniform(-a0, a0, size=(d, w))
    W1 = rng.uniform(-a1, a1, size=(w, C))
    return ModelParams(W0, np.zeros(w), W1, np.zeros(C), shape)


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def embed(x, params: ModelParams) -> np.ndarray:
    """ReLU(W0^T x + bias0) for a vector or a row-stacked batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ShapeError(f"feature dimension {x.shape[-1]} != model d = {params.d}")
    return np.maximum(x @ params.W0 + params.bias0, 0.0)


def forward(x, params: ModelParams) -> ForwardTrace:
    """Forward pass for one feature vector or an (n, d) batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.d:
        raise ShapeError(f"feature dimension {x.shape[1]} != model d = {params.d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    pre = x @ params.W0 + params.bias0
    if not np.all(np.isfinite(pre)):
        raise DivergenceError("non-finite FC0 activations")
    z = np.maximum(pre, 0.0)
    soft = softmax_blocks(z, params.shape)
    logits = soft @ params.W1 + params.bias1
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite FC1 activations")
    return ForwardTrace(x, pre, z, soft, _softmax_rows(logits), params.shape)


def classification_loss(probs, y: int, C: int) -> float:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if C < 2:
        raise ValueError(f"need at least 2 classes, got C={C}")
    if probs.size != C:
        raise ShapeError(f"{probs.size} probabilities for C={C}")
    if not 0 <= y < C:
        raise ValueError(f"label {y} outside [0, {C})")
    return -math.log2(max(float(probs[y]), PROB_FLOOR)) / math.log2(C)


def _loss_terms(trace: ForwardTrace, labels: np.ndarray, gamma: float, mu: float) -> LossBreakdown:
    shape = trace.shape
    T = len(labels)
    C = trace.probs.shape[1]
    py = trace.probs[np.arange(T), labels]
    cls = float(np.mean(-np.log2(np.maximum(py, PROB_FLOOR)) / math.log2(C)))
    mean_bits = float(block_entropies(trace.soft, shape).mean())
    batch_bits = float(block_entropies(trace.soft.mean(axis=0), shape).mean())
    log2k = math.log2(shape.K)
    mean_term = gamma * mean_bits / log2k
    batch_term = -mu * batch_bits / log2k
    return LossBreakdown(cls + mean_term + batch_term, cls, mean_term, batch_term, mean_bits, batch_bits)


def _check_batch(labels, trace_or_n, C: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(y) != trace_or_n:
        raise ShapeError(f"{trace_or_n} samples but {len(y)} labels")
    if C < 2:
        raise ValueError(f"need at least 2 classes, got C={C}")
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    return y


def total_loss(trace: ForwardTrace, labels, hyper: Hyperparams) -> LossBreakdown:
    y = _check_batch(labels, len(trace.x), trace.probs.shape[1])
    return _loss_terms(trace, y, hyper.gamma, hyper.mu)


def backward(X, labels, params: ModelParams, hyper: Hyperparams) -> tuple[ModelParams, LossBreakdown]:
    """Exact gradient of the batch objective, plus the loss it was taken at.

    The batch-entropy term couples all samples through the batch mean; its
    gradient is propagated through that mean rather than treated as constant.
    """
    trace = forward(X, params)
    y = _check_batch(labels, len(trace.x), params.C)
    loss = _loss_terms(trace, y, hyper.gamma, hyper.mu)

    shape = params.shape
    T, M, K, C = len(y), shape.M, shape.K, params.C
    ln2 = math.log(2.0)
    log2k = math.log2(K)
    rows = np.arange(T)

    # classification: d cls / d logits = (s - onehot(y)) / ln C, zero where clamped
    dlogits = trace.probs.copy()
    dlogits[rows, y] -= 1.0
    active = trace.probs[rows, y] > PROB_FLOOR
    dlogits *= (active / (T * math.log(C)))[:, None]

    gW1 = trace.soft.T @ dlogits
    gb1 = dlogits.sum(axis=0)

    S = trace.soft.reshape(T, M, K)
    dS = (dlogits @ params.W1.T).reshape(T, M, K)

    # batch entropy through the batch mean b_bar
    if hyper.mu:
        bbar = S.mean(axis=0)
        log_bbar = np.log(np.where(bbar > 0.0, bbar, 1.0))
        dS += (hyper.mu / (M * log2k * ln2 * T)) * (log_bbar + 1.0)[None]

    # softmax Jacobian per block
    dz = S * (dS - np.sum(S * dS, axis=2, keepdims=True))

    # mean entropy, differentiated directly w.r.t. z: dH/dz_j = -s_j (ln s_j + H)
    if hyper.gamma:
        s_log_s = np.where(S > 0.0, S * np.log(np.where(S > 0.0, S, 1.0)), 0.0)
        h_nat = -s_log_s.sum(axis=2, keepdims=True)
        dz -= (hyper.gamma / (M * log2k * ln2 * T)) * (s_log_s + S * h_nat)

    dpre = dz.reshape(T, M * K) * (trace.pre > 0.0)
    gW0 = trace.x.T @ dpre
    gb0 = dpre.sum(axis=0)
    return ModelParams(gW0, gb0, gW1, gb1, shape), loss


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst_index: int = -1


def check_gradient(
    f: Callable[[np.ndarray], float],
    analytic: np.ndarray,
    theta: np.ndarray,
    step: float = 1e-5,
    skip: Optional[Callable[[np.ndarray], bool]] = None,
) -> GradCheckResult:
    """Compare ``analytic`` with central differences of ``f`` at ``theta``.

    ``skip(theta_perturbed)`` may veto a coordinate; vetoed coordinates are
    counted but not compared.
    """
    theta = np.array(theta, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.shape != theta.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != parameter shape {theta.shape}")
    worst, worst_i, checked, skipped = 0.0, -1, 0, 0
    base_skip = skip is not None and skip(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up_skip = skip is not None and skip(theta)
        f_up = f(theta)
        theta[i] = orig - step
        dn_skip = skip is not None and skip(theta)
        f_dn = f(theta)
        theta[i] = orig
        if base_skip or up_skip or dn_skip:
            skipped += 1
            continue
        num = (f_up - f_dn) / (2.0 * step)
        a = analytic[i]
        err = abs(a - num) / max(1e-8, abs(a) + abs(num))
        checked += 1
        if err > worst:
            worst, worst_i = err, i
    return GradCheckResult(float(worst), checked, skipped, worst_i)


def grad_check(params: ModelParams, X, labels, hyper: Hyperparams, step: float = 1e-5) -> GradCheckResult:
    """Central-difference check of :func:`backward` over every parameter.

    Coordinates whose stencil touches the probability clamp are skipped, since
    the clamped loss is flat there and the check is meaningless.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    grads, _ = backward(X, y, params, hyper)
    rows = np.arange(len(y))

    def f(theta):
        tr = forward(X, params.with_flat(theta))
        return _loss_terms(tr, y, hyper.gamma, hyper.mu).total

    def clamped(theta):
        tr = forward(X, params.with_flat(theta))
        return bool(np.any(tr.probs[rows, y] <= PROB_FLOOR))

    return check_gradient(f, grads.flat(), params.flat(), step, skip=clamped)


def sgd_step(
    params: ModelParams, grads: ModelParams, velocity: ModelParams, lr: float, momentum: float
) -> tuple[ModelParams, ModelParams]:
    """Classical momentum: ``v <- momentum * v - lr * g``, ``theta <- theta + v``."""
    if not grads.all_finite():
        raise DivergenceError("non-finite gradient")
    new_v = [momentum * v - lr * g for v, g in zip(velocity.arrays(), grads.arrays())]
    new_p = [p + v for p, v in zip(params.arrays(), new_v)]
    return ModelParams(*new_p, shape=params.shape), ModelParams(*new_v, shape=params.shape)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[LossBreakdown] = field(default_factory=list)


def train(dataset: Dataset, shape: BlockShape, hyper: Hyperparams) -> TrainResult:
    """Mini-batch SGD with momentum on (features, labels); deterministic per seed."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    if dataset.C < 2:
        raise ValueError(f"need at least 2 classes, got C={dataset.C}")
    if hyper.batch_size > dataset.n:
        raise ValueError(f"batch size {hyper.batch_size} exceeds dataset size {dataset.n}")
    init_seed, batch_seed = np.random.SeedSequence(hyper.seed).generate_state(2)
    params = init_params(dataset.d, shape, dataset.C, int(init_seed))
    velocity = params.zeros_like()
    history: list[LossBreakdown] = []
    stream = batches(dataset, hyper.batch_size, int(batch_seed))
    for b in range(hyper.num_batches):
        idx = next(stream)
        try:
            grads, loss = backward(dataset.features[idx], dataset.labels[idx], params, hyper)
            if not math.isfinite(loss.total):
                raise DivergenceError("non-finite loss")
            params, velocity = sgd_step(params, grads, velocity, hyper.learning_rate, hyper.momentum)
        except DivergenceError as e:
            raise DivergenceError(f"training diverged at batch {b}: {e}") from None
        history.append(loss)
        if b % 500 == 0:
            log.debug("batch %d loss %.6f", b, loss.total)
    return TrainResult(params, history)


def classify_code(code: BinaryCode, weights, bias) -> tuple[np.ndarray, int]:
    """Linear classifier on a binary code via M row gathers per class."""
    scores = classify_codes(np.asarray([code.indices]), code.shape, weights, bias)[0]
    return scores, int(np.argmax(scores))


def classify_codes(indices, shape: BlockShape, weights, bias) -> np.ndarray:
    """Class scores for an (n, M) array of block indices."""
    W = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64).reshape(-1)
    idx = np.asarray(indices, dtype=np.int64)
    if W.ndim != 2 or W.shape[0] != shape.width or b.shape != (W.shape[1],):
        raise ShapeError(f"weights must be {shape.width} x C' with bias C', got {W.shape}, {b.shape}")
    if idx.ndim != 2 or idx.shape[1] != shape.M:
        raise ShapeError(f"expected (n, {shape.M}) indices, got {idx.shape}")
    rows = np.arange(shape.M) * shape.K + idx
    acc = W[rows[:, 0]].copy()
    for m in range(1, shape.M):
        acc += W[rows[:, m]]
    return acc + b


def binarize(X, params: ModelParams) -> np.ndarray:
    """Block indices of the test-time encoder for each row of X."""
    return argmax_blocks(embed(np.atleast_2d(X), params), params.shape)


def save_model(path, params: ModelParams) -> None:
    dims = (params.d, params.shape.M, params.shape.K, params.C)
    if max(dims) > 2**32 - 1:
        raise DimensionOverflowError(f"model dimensions {dims} do not fit in u32")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<5I", MODEL_VERSION, *dims))
        for a in params.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        if len(raw) < 4:
            raise TruncatedFileError(f"{path}: file too short for header")
        raise BadMagicError(f"{path}: expected magic {MODEL_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 24:
        raise TruncatedFileError(f"{path}: truncated header")
    version, d, M, K, C = struct.unpack_from("<5I", raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    try:
        shape = BlockShape(M, K)
    except ShapeError as e:
        raise FormatError(f"{path}: {e}") from None
    w = shape.width
    sizes = [d * w, w, w * C, C]
    if sum(sizes) > 2**31:
        raise DimensionOverflowError(f"{path}: model with d={d}, M={M}, K={K}, C={C} is too large")
    expected = 24 + 8 * sum(sizes)
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    flat = np.frombuffer(raw, dtype="<f8", offset=24).astype(np.float64)
    parts, start = [], 0
    for n in sizes:
        parts.append(flat[start : start + n])
        start += n
    return ModelParams(parts[0].reshape(d, w), parts[1], parts[2].reshape(w, C), parts[3], shape)


def write_log(path, history: Iterable[LossBreakdown]) -> None:
    """Training log CSV; floats are written with repr so they round-trip exactly."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for b, h in enumerate(history):
            w.writerow([b, repr(h.total), repr(h.cls), repr(h.mean_ent), repr(h.batch_ent)])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "batch" else float(v)) for k, v in r.items()} for r in rows]
