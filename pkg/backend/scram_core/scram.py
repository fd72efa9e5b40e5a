"""
scram_core/scram.py

Sparse attention from PatchMatch matches:

  top_kappa -> expand_neighbourhood -> sparse_attention_output

Each match is widened to its (2b+1)^2 window (clipped at the raster border),
the windows of all kappa matches are merged without duplicates, and the
softmax is taken over that support only. Causal runs mask future keys in the
search, in the expansion and once more inside the softmax.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from numba import njit, prange

from scram_core.attention import PairwiseKernel, _check_qkv, score_block, softmax_row
from scram_core.errors import ConfigError, DegenerateNormalizerError, DegenerateRowError, DimensionError
from scram_core.fields import AttentionOutput, FieldImage, PixelIndex
from scram_core.patchmatch import (
    NeighbourField,
    PatchMatchConfig,
    ValidityPolicy,
    _score,
    max_non_duplicate,
    top_kappa,
)
from services.metrics_service import degenerate_rows, forward_seconds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScramConfig:
    kappa: int = 1
    b: int = 0
    policy: ValidityPolicy = field(default_factory=max_non_duplicate)
    patchmatch: PatchMatchConfig = field(default_factory=PatchMatchConfig)
    causal: bool = False

    def __post_init__(self):
        if self.kappa < 1:
            raise ConfigError("kappa must be >= 1")
        if self.b < 0:
            raise ConfigError("neighbourhood half-width b must be >= 0")


@dataclass
class SparseIndexSet:
    """
    Per query the sorted, duplicate-free row-major key indices it attends to.

    `indices` is (n_queries, width) padded with -1; `counts` gives the used
    length of each row.
    """
    indices: np.ndarray
    counts: np.ndarray
    query_shape: Tuple[int, int]
    key_shape: Tuple[int, int]

    @property
    def n_queries(self) -> int:
        return self.indices.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.indices[i, :self.counts[i]]

    def dense_mask(self) -> np.ndarray:
        """(n_queries, n_keys) boolean support matrix."""
        n_keys = self.key_shape[0] * self.key_shape[1]
        mask = np.zeros((self.n_queries, n_keys), dtype=bool)
        rows = np.repeat(np.arange(self.n_queries), self.counts)
        cols = self.indices[self.indices >= 0]
        mask[rows, cols] = True
        return mask

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], query_shape: Tuple[int, int],
                  key_shape: Tuple[int, int]) -> "SparseIndexSet":
        """Build from arbitrary per-query key lists (sorted and deduplicated here)."""
        n_keys = key_shape[0] * key_shape[1]
        cleaned = [np.unique(np.asarray(r, dtype=np.int64)) for r in rows]
        for r in cleaned:
            if r.size and (r[0] < 0 or r[-1] >= n_keys):
                raise DimensionError("sparse index outside the key raster")
        width = max(1, max((r.size for r in cleaned), default=1))
        indices = np.full((len(cleaned), width), -1, dtype=np.int64)
        counts = np.zeros(len(cleaned), dtype=np.int64)
        for i, r in enumerate(cleaned):
            indices[i, :r.size] = r
            counts[i] = r.size
        return cls(indices, counts, tuple(query_shape), tuple(key_shape))

    @classmethod
    def full(cls, query_shape: Tuple[int, int], key_shape: Tuple[int, int]) -> "SparseIndexSet":
        n_q = query_shape[0] * query_shape[1]
        n_keys = key_shape[0] * key_shape[1]
        indices = np.tile(np.arange(n_keys, dtype=np.int64), (n_q, 1))
        return cls(indices, np.full(n_q, n_keys, dtype=np.int64), tuple(query_shape), tuple(key_shape))


def causal_mask_positions(i: int, j: int) -> bool:
    """True when key j must be hidden from query i (j at or after i in row-major order)."""
    return j >= i


# ─────────────────────────────────────────────────────────────
# numba kernels
# ─────────────────────────────────────────────────────────────

@njit(parallel=True, cache=True)
def _expand_kernel(matches, b, hk, wk, causal, buffer_size, out, counts):
    kappa = matches.shape[0]
    n_q = matches.shape[1]
    for i in prange(n_q):
        buf = np.empty(buffer_size, dtype=np.int64)
        m = 0
        for e in range(kappa):
            u = matches[e, i, 0]
            v = matches[e, i, 1]
            if u < 0:
                continue
            y0 = u - b if u - b > 0 else 0
            y1 = u + b if u + b < hk - 1 else hk - 1
            x0 = v - b if v - b > 0 else 0
            x1 = v + b if v + b < wk - 1 else wk - 1
            for yy in range(y0, y1 + 1):
                for xx in range(x0, x1 + 1):
                    j = yy * wk + xx
                    if causal and j >= i:
                        continue
                    buf[m] = j
                    m += 1
        s = np.sort(buf[:m])
        c = 0
        for t in range(m):
            if t == 0 or s[t] != s[t - 1]:
                out[i, c] = s[t]
                c += 1
        counts[i] = c


@njit(parallel=True, cache=True)
def _sparse_softmax_kernel(q, k, v, indices, counts, causal, scale, out, log_norm, degenerate):
    n_q = indices.shape[0]
    d_v = v.shape[1]
    for i in prange(n_q):
        c = counts[i]
        top = -np.inf
        for t in range(c):
            j = indices[i, t]
            if causal and j >= i:
                continue
            s = _score(q, k, i, j) * scale
            if s > top:
                top = s
        for e in range(d_v):
            out[i, e] = 0.0
        if top == -np.inf:
            degenerate[i] = True
            log_norm[i] = -np.inf
            continue
        denom = 0.0
        for t in range(c):
            j = indices[i, t]
            if causal and j >= i:
                continue
            w = math.exp(_score(q, k, i, j) * scale - top)
            denom += w
            for e in range(d_v):
                out[i, e] += w * v[j, e]
        for e in range(d_v):
            out[i, e] /= denom
        log_norm[i] = top + math.log(denom)


# ─────────────────────────────────────────────────────────────
# Public operations
# ─────────────────────────────────────────────────────────────

def matches_array(fields: Sequence[NeighbourField]) -> np.ndarray:
    """(kappa, n_queries, 2) stack of match coordinates."""
    return np.ascontiguousarray(
        np.stack([f.entries.reshape(-1, 2) for f in fields]).astype(np.int64)
    )


def expand_neighbourhood(fields: Sequence[NeighbourField], b: int,
                         height: int, width: int, causal: bool = False) -> SparseIndexSet:
    """
    Union of the clipped (2b+1)^2 windows around every match, per query.
    `height` x `width` is the key raster.
    """
    if not fields:
        raise DimensionError("expansion needs at least one neighbour field")
    if b < 0:
        raise ConfigError("b must be >= 0")
    query_shape = (fields[0].height, fields[0].width)
    for f in fields:
        if (f.height, f.width) != query_shape:
            raise DimensionError("neighbour fields must share one query raster")
    if causal and query_shape != (height, width):
        raise DimensionError("causal masking needs query and key rasters of the same shape")
    kappa = len(fields)
    side_y = min(2 * b + 1, height)
    side_x = min(2 * b + 1, width)
    buffer_size = kappa * side_y * side_x
    out_width = max(1, min(buffer_size, height * width))
    n_q = query_shape[0] * query_shape[1]
    out = np.full((n_q, out_width), -1, dtype=np.int64)
    counts = np.zeros(n_q, dtype=np.int64)
    _expand_kernel(matches_array(fields), b, height, width, causal, buffer_size, out, counts)
    return SparseIndexSet(out, counts, query_shape, (height, width))


def sparse_attention_output(Q: FieldImage, K: FieldImage, V: FieldImage, sets: SparseIndexSet,
                            causal: bool = False) -> AttentionOutput:
    """Softmax over each query's support only; zero output and a flag for empty rows."""
    _check_qkv(Q, K, V, causal)
    if sets.n_queries != Q.n or tuple(sets.key_shape) != K.shape:
        raise DimensionError("sparse index set does not match the query/key rasters")
    q64 = np.ascontiguousarray(Q.flat(), dtype=np.float64)
    k64 = np.ascontiguousarray(K.flat(), dtype=np.float64)
    v64 = np.ascontiguousarray(V.flat(), dtype=np.float64)
    out = np.zeros((Q.n, V.depth), dtype=np.float64)
    log_norm = np.empty(Q.n, dtype=np.float64)
    degenerate = np.zeros(Q.n, dtype=np.bool_)
    _sparse_softmax_kernel(q64, k64, v64, np.ascontiguousarray(sets.indices), sets.counts,
                           causal, 1.0 / math.sqrt(Q.depth), out, log_norm, degenerate)
    n_dead = int(degenerate.sum())
    if n_dead:
        degenerate_rows.inc(n_dead)
        logger.debug(f"{n_dead} queries have an empty support after masking")
    return AttentionOutput(
        values=out.reshape(Q.height, Q.width, V.depth),
        degenerate=degenerate,
        log_normalizer=log_norm,
    )


def sparse_nonlocal_mean(Q: FieldImage, K: FieldImage, V: FieldImage, sets: SparseIndexSet,
                         f: PairwiseKernel) -> AttentionOutput:
    """Non-local mean with an arbitrary kernel restricted to each query's support."""
    _check_qkv(Q, K, V, False)
    q64 = Q.flat().astype(np.float64)
    k64 = K.flat().astype(np.float64)
    v64 = V.flat().astype(np.float64)
    out = np.zeros((Q.n, V.depth), dtype=np.float64)
    log_norm = np.zeros(Q.n, dtype=np.float64)
    for i in range(Q.n):
        idx = sets.row(i)
        w = np.asarray(f(q64[i:i + 1], k64[idx]), dtype=np.float64)[0]
        c = w.sum()
        if not c > 0:
            raise DegenerateNormalizerError(f"restricted normalizer is zero for query {i}", query=i)
        out[i] = (w @ v64[idx]) / c
        log_norm[i] = math.log(c)
    return AttentionOutput(
        values=out.reshape(Q.height, Q.width, V.depth),
        degenerate=np.zeros(Q.n, dtype=bool),
        log_normalizer=log_norm,
    )


def scram_forward(Q: FieldImage, K: FieldImage, V: FieldImage, config: ScramConfig) -> AttentionOutput:
    """top-kappa PatchMatch, window expansion, sparse softmax."""
    _check_qkv(Q, K, V, config.causal)
    started = time.perf_counter()
    fields = top_kappa(Q, K, config.kappa, config.policy, config.patchmatch, causal=config.causal)
    sets = expand_neighbourhood(fields, config.b, K.height, K.width, causal=config.causal)
    result = sparse_attention_output(Q, K, V, sets, causal=config.causal)
    result.extras['fields'] = fields
    result.extras['sets'] = sets
    forward_seconds.labels(method='scram').observe(time.perf_counter() - started)
    return result


def identity_field(height: int, width: int) -> NeighbourField:
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    return NeighbourField(np.stack([ys, xs], axis=-1).astype(np.int64), (height, width))


def local_window_attention(Q: FieldImage, K: FieldImage, V: FieldImage, b: int,
                           causal: bool = False) -> AttentionOutput:
    """Fixed-pattern baseline: every query attends to the window around its own position."""
    _check_qkv(Q, K, V, True)
    sets = expand_neighbourhood([identity_field(Q.height, Q.width)], b, K.height, K.width, causal=causal)
    result = sparse_attention_output(Q, K, V, sets, causal=causal)
    result.extras['sets'] = sets
    return result


def sparse_attention_row(Q: FieldImage, K: FieldImage, sets: SparseIndexSet, query: PixelIndex,
                         causal: bool = False) -> np.ndarray:
    """One query's sparse weights as a key-shaped (H, W) raster, zero off the support."""
    _check_qkv(Q, K, None, causal)
    i = query.flat(Q.width)
    idx = sets.row(i)
    if causal:
        idx = idx[idx < i]
    if idx.size == 0:
        raise DegenerateRowError(f"query {i} has an empty support", query=i)
    scores = score_block(Q.flat()[i:i + 1].astype(np.float64), K.flat()[idx].astype(np.float64))[0]
    weights = np.zeros(K.n, dtype=np.float64)
    weights[idx] = softmax_row(scores)
    return weights.reshape(K.height, K.width)
