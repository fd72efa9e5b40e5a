"""
scram_core/attention.py

Scaled dot-product compatibility, softmax and the exact O(n^2) attention
oracle that every approximation is checked against.

Design:
  - Scores are accumulated in float64 from float32 rasters.
  - Dense work is done in blocks of Config.BLOCK_ROWS query rows so the
    n x n score matrix is never materialised.
  - Masked entries carry a -inf score before normalisation.
  - Top-k results are (n_queries, kappa) arrays of row-major key indices;
    PixelIndex.from_flat converts them.
"""
import logging
import math
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from config import Config
from scram_core.errors import (
    DegenerateNormalizerError,
    DegenerateRowError,
    DimensionError,
    InfeasibleSeparationError,
    OracleGuardError,
)
from scram_core.fields import AttentionOutput, FieldImage, PixelIndex

logger = logging.getLogger(__name__)

# f(query_block (m, d), keys (n, d)) -> nonnegative (m, n) weights
PairwiseKernel = Callable[[np.ndarray, np.ndarray], np.ndarray]

MAX_WEIGHT_ENTRIES = 2 ** 26


# ─────────────────────────────────────────────────────────────
# Scalar operations
# ─────────────────────────────────────────────────────────────

def compatibility(q, k, d_k: Optional[int] = None) -> float:
    """(q . k) / sqrt(d_k)"""
    q = np.asarray(q, dtype=np.float64).ravel()
    k = np.asarray(k, dtype=np.float64).ravel()
    if q.shape != k.shape:
        raise DimensionError(f"query has {q.size} channels, key has {k.size}")
    if d_k is None:
        d_k = q.size
    if d_k != q.size or d_k < 1:
        raise DimensionError(f"d_k={d_k} does not match vector length {q.size}")
    return float(np.dot(q, k)) / math.sqrt(d_k)


def softmax_row(scores) -> np.ndarray:
    """Max-subtracted softmax of one score row; -inf entries get probability 0."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise DimensionError("softmax of an empty row")
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise DimensionError("softmax scores must be finite or -inf")
    top = s.max()
    if top == -np.inf:
        raise DegenerateRowError("every score in the row is masked")
    e = np.exp(s - top)
    return e / e.sum()


# ─────────────────────────────────────────────────────────────
# Block helpers
# ─────────────────────────────────────────────────────────────

def _as_f64(field: FieldImage) -> np.ndarray:
    return field.flat().astype(np.float64)


def _blocks(n_rows: int, block_rows: Optional[int] = None) -> Iterator[Tuple[int, int]]:
    step = max(1, block_rows or Config.BLOCK_ROWS)
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


def score_block(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Compatibility of every query row with every key row, float64 (m, n)."""
    d_k = queries.shape[1]
    return (queries @ keys.T) / math.sqrt(d_k)


def causal_block_mask(start: int, stop: int, n_keys: int) -> np.ndarray:
    """True where key j is at or after query i in row-major order."""
    rows = np.arange(start, stop)[:, None]
    cols = np.arange(n_keys)[None, :]
    return cols >= rows


def _check_qkv(Q: FieldImage, K: FieldImage, V: Optional[FieldImage], causal: bool) -> None:
    if Q.depth != K.depth:
        raise DimensionError(f"query depth {Q.depth} != key depth {K.depth}")
    if V is not None and V.shape != K.shape:
        raise DimensionError(f"value raster {V.shape} does not match key raster {K.shape}")
    if causal and Q.shape != K.shape:
        raise DimensionError("causal masking needs query and key rasters of the same shape")


def key_coordinates(height: int, width: int) -> np.ndarray:
    """(n, 2) array of (y, x) for every row-major index."""
    ys, xs = np.divmod(np.arange(height * width), width)
    return np.stack([ys, xs], axis=1)


# ─────────────────────────────────────────────────────────────
# Exact attention
# ─────────────────────────────────────────────────────────────

def full_attention(Q: FieldImage, K: FieldImage, V: FieldImage,
                   causal: bool = False, return_weights: bool = False) -> AttentionOutput:
    """
    o_i = sum_j p_ij v_j with p_i the softmax of query i's scores over all keys.

    Under `causal`, keys at row-major position >= i are masked; query 0 has no
    past and is returned as a zero row flagged degenerate.
    """
    _check_qkv(Q, K, V, causal)
    n_q, n_k = Q.n, K.n
    if return_weights and n_q * n_k > MAX_WEIGHT_ENTRIES:
        raise OracleGuardError(f"dense weights for {n_q} x {n_k} exceed the diagnostics limit")

    q64, k64, v64 = _as_f64(Q), _as_f64(K), _as_f64(V)
    out = np.zeros((n_q, V.depth), dtype=np.float64)
    log_norm = np.full(n_q, -np.inf)
    degenerate = np.zeros(n_q, dtype=bool)
    weights = np.zeros((n_q, n_k), dtype=np.float64) if return_weights else None

    for start, stop in _blocks(n_q):
        scores = score_block(q64[start:stop], k64)
        if causal:
            scores[causal_block_mask(start, stop, n_k)] = -np.inf
        top = scores.max(axis=1)
        dead = top == -np.inf
        top[dead] = 0.0
        e = np.exp(scores - top[:, None])
        denom = e.sum(axis=1)
        denom[dead] = 1.0
        p = e / denom[:, None]
        out[start:stop] = p @ v64
        out[start:stop][dead] = 0.0
        log_norm[start:stop] = np.where(dead, -np.inf, top + np.log(denom))
        degenerate[start:stop] = dead
        if weights is not None:
            weights[start:stop] = p

    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} queries had no unmasked keys")

    return AttentionOutput(
        values=out.reshape(Q.height, Q.width, V.depth),
        degenerate=degenerate,
        weights=weights,
        log_normalizer=log_norm,
    )


def attention_row(Q: FieldImage, K: FieldImage, query: PixelIndex, causal: bool = False) -> np.ndarray:
    """The full attention map of one query as a key-shaped (H, W) raster."""
    _check_qkv(Q, K, None, causal)
    i = query.flat(Q.width)
    scores = score_block(Q.flat()[i:i + 1].astype(np.float64), _as_f64(K))[0]
    if causal:
        scores[i:] = -np.inf
    return softmax_row(scores).reshape(K.height, K.width)


# ─────────────────────────────────────────────────────────────
# Non-local mean
# ─────────────────────────────────────────────────────────────

def exp_compatibility_kernel(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    return np.exp(score_block(queries, keys))


def uniform_kernel(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    return np.ones((queries.shape[0], keys.shape[0]), dtype=np.float64)


def delta_kernel(target: int) -> PairwiseKernel:
    """Weight 1 on key `target` (row-major), 0 elsewhere."""
    def kernel(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
        w = np.zeros((queries.shape[0], keys.shape[0]), dtype=np.float64)
        w[:, target] = 1.0
        return w
    return kernel


def gaussian_kernel(h: float) -> PairwiseKernel:
    """Non-local-means weight exp(-||q - k||^2 / h^2)."""
    if h <= 0:
        raise DimensionError("gaussian kernel bandwidth must be positive")

    def kernel(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
        sq = (
            np.sum(queries ** 2, axis=1)[:, None]
            + np.sum(keys ** 2, axis=1)[None, :]
            - 2.0 * queries @ keys.T
        )
        return np.exp(-np.maximum(sq, 0.0) / (h * h))
    return kernel


def nonlocal_mean(Q: FieldImage, K: FieldImage, V: FieldImage, f: PairwiseKernel) -> AttentionOutput:
    """y_i = (1 / C(q_i)) sum_j f(q_i, k_j) v_j with C(q_i) = sum_l f(q_i, k_l)."""
    _check_qkv(Q, K, V, False)
    q64, k64, v64 = _as_f64(Q), _as_f64(K), _as_f64(V)
    out = np.zeros((Q.n, V.depth), dtype=np.float64)
    log_norm = np.zeros(Q.n, dtype=np.float64)

    for start, stop in _blocks(Q.n):
        w = np.asarray(f(q64[start:stop], k64), dtype=np.float64)
        if w.shape != (stop - start, K.n):
            raise DimensionError(f"kernel returned shape {w.shape}, expected {(stop - start, K.n)}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DimensionError("kernel weights must be finite and nonnegative")
        c = w.sum(axis=1)
        bad = np.flatnonzero(c <= 0)
        if bad.size:
            query = start + int(bad[0])
            raise DegenerateNormalizerError(f"normalizer is zero for query {query}", query=query)
        out[start:stop] = (w @ v64) / c[:, None]
        log_norm[start:stop] = np.log(c)

    return AttentionOutput(
        values=out.reshape(Q.height, Q.width, V.depth),
        degenerate=np.zeros(Q.n, dtype=bool),
        log_normalizer=log_norm,
    )


# ─────────────────────────────────────────────────────────────
# Exact top-k solvers
# ─────────────────────────────────────────────────────────────

def top_k_exact(Q: FieldImage, K: FieldImage, kappa: int) -> np.ndarray:
    """
    The kappa most compatible keys per query, best first.

    Ties are broken by ascending row-major key index. Returns an int64
    (n_queries, kappa) array of key indices.
    """
    _check_qkv(Q, K, None, False)
    if kappa < 1 or kappa > K.n:
        raise DimensionError(f"kappa={kappa} must lie in [1, {K.n}]")
    q64, k64 = _as_f64(Q), _as_f64(K)
    result = np.empty((Q.n, kappa), dtype=np.int64)
    for start, stop in _blocks(Q.n):
        neg = -score_block(q64[start:stop], k64)
        part = np.argpartition(neg, kappa - 1, axis=1)[:, :kappa]
        top = np.take_along_axis(neg, part, axis=1)
        picked = np.take_along_axis(part, np.lexsort((part, top), axis=1), axis=1)
        # ties straddling the kappa boundary: partition may have kept a higher index
        tied = np.count_nonzero(neg <= top.max(axis=1, keepdims=True), axis=1) > kappa
        for r in np.flatnonzero(tied):
            picked[r] = np.argsort(neg[r], kind='stable')[:kappa]
        result[start:stop] = picked
    return result


def top_k_mode_exact(Q: FieldImage, K: FieldImage, kappa: int, separation: int) -> np.ndarray:
    """
    Greedy spatially separated top-k: repeatedly take the best key whose
    Chebyshev distance to every key already selected exceeds `separation`.
    """
    _check_qkv(Q, K, None, False)
    if kappa < 1:
        raise DimensionError("kappa must be >= 1")
    if separation < 0:
        raise DimensionError("separation must be >= 0")
    q64, k64 = _as_f64(Q), _as_f64(K)
    coords = key_coordinates(K.height, K.width)
    result = np.empty((Q.n, kappa), dtype=np.int64)

    for start, stop in _blocks(Q.n):
        scores = score_block(q64[start:stop], k64)
        eligible = np.ones_like(scores, dtype=bool)
        rows = np.arange(stop - start)
        for rank in range(kappa):
            has_any = eligible.any(axis=1)
            if not has_any.all():
                query = start + int(np.flatnonzero(~has_any)[0])
                raise InfeasibleSeparationError(
                    f"only {rank} keys separated by more than {separation} exist for query {query}",
                    position=tuple(PixelIndex.from_flat(query, Q.width)),
                )
            masked = np.where(eligible, scores, -np.inf)
            pick = np.argmax(masked, axis=1)
            result[start:stop, rank] = pick
            picked = coords[pick]
            dist = np.maximum(
                np.abs(coords[None, :, 0] - picked[:, None, 0]),
                np.abs(coords[None, :, 1] - picked[:, None, 1]),
            )
            eligible &= dist > separation
            eligible[rows, pick] = False
    return result
