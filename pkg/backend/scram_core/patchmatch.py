"""
scram_core/patchmatch.py

Jump-flood PatchMatch over attention scores.

  init_random       -> random nearest neighbour field respecting the policy
  patchmatch_pass   -> T iterations of propagation + random search
  top_kappa         -> kappa sequential passes, each constrained by the earlier ones

Design:
  - Each iteration reads the previous field and writes a second buffer, so
    positions are independent and the numba kernels run them with prange.
  - Random numbers are drawn up front from Philox streams keyed by
    (seed, run, stage, iteration); results do not depend on the thread count.
  - MaxNonDuplicate is the separation-0 case of the Chebyshev test.
  - Causal runs only propagate from earlier positions (up, left) and leave
    positions without any valid past key unmatched at (-1, -1).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit, prange, set_num_threads

from config import Config
from scram_core.errors import ConfigError, DimensionError, InfeasiblePolicyError
from scram_core.fields import FieldImage, PixelIndex
from services.metrics_service import patchmatch_passes

logger = logging.getLogger(__name__)

UNMATCHED = -1

# (dy, dx) per direction, in the order up, down, left, right
DIRECTION_OFFSETS = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)

# SeedSequence stage tags
_STAGE_INIT = 0
_STAGE_SEARCH = 1


class Direction(Enum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3

    @property
    def offset(self) -> Tuple[int, int]:
        dy, dx = DIRECTION_OFFSETS[self.value]
        return int(dy), int(dx)


class PolicyVariant(Enum):
    MAX = "max"
    MODE = "mode"


@dataclass(frozen=True)
class ValidityPolicy:
    """MaxNonDuplicate (variant MAX) or ModeSeparated(L) (variant MODE)."""
    variant: PolicyVariant = PolicyVariant.MAX
    separation: int = 0

    def __post_init__(self):
        if self.variant is PolicyVariant.MODE and self.separation < 1:
            raise ConfigError(f"mode separation L must be >= 1, got {self.separation}")
        if self.variant is PolicyVariant.MAX and self.separation != 0:
            raise ConfigError("MaxNonDuplicate takes no separation")

    @property
    def kernel_separation(self) -> int:
        return self.separation if self.variant is PolicyVariant.MODE else 0

    @property
    def name(self) -> str:
        return self.variant.value


def max_non_duplicate() -> ValidityPolicy:
    return ValidityPolicy(PolicyVariant.MAX, 0)


def mode_separated(separation: int) -> ValidityPolicy:
    return ValidityPolicy(PolicyVariant.MODE, separation)


@dataclass(frozen=True)
class PatchMatchConfig:
    iterations: int = 8
    jumps: Tuple[int, ...] = (8, 4, 2, 1)
    seed: int = 0
    init_retries: int = 16
    propagate_unshifted: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("PatchMatch needs at least one iteration")
        jumps = tuple(int(j) for j in self.jumps)
        if not jumps or jumps[-1] != 1 or any(a <= b for a, b in zip(jumps, jumps[1:])):
            raise ConfigError(f"jump sequence must be strictly decreasing and end at 1, got {jumps}")
        object.__setattr__(self, 'jumps', jumps)
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.init_retries < 1:
            raise ConfigError("init_retries must be >= 1")

    @classmethod
    def from_config(cls, seed: int = 0, **overrides) -> "PatchMatchConfig":
        values = Config.get_patchmatch_config()
        values.update(overrides)
        return cls(seed=seed, **values)


@dataclass
class NeighbourField:
    """Per query position the (u, v) of its matched key; (-1, -1) when unmatched."""
    entries: np.ndarray
    key_shape: Tuple[int, int]

    @property
    def height(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]

    def entry(self, pos: PixelIndex) -> Optional[PixelIndex]:
        u, v = self.entries[pos.y, pos.x]
        if u == UNMATCHED:
            return None
        return PixelIndex(int(u), int(v))

    def flat_indices(self) -> np.ndarray:
        """(n_queries,) row-major key indices, -1 where unmatched."""
        u = self.entries[..., 0].ravel()
        v = self.entries[..., 1].ravel()
        return np.where(u == UNMATCHED, UNMATCHED, u * self.key_shape[1] + v)

    def matched(self) -> np.ndarray:
        return self.entries[..., 0].ravel() != UNMATCHED


def configure_threads(threads: int) -> None:
    if threads and threads > 0:
        set_num_threads(int(threads))


def search_distances(radius: int) -> np.ndarray:
    """R, R/2, R/4, ..., 1 with integer halving."""
    out = []
    d = max(1, int(radius))
    while d >= 1:
        out.append(d)
        d //= 2
    return np.array(out, dtype=np.int64)


def _stream(seed: int, run_index: int, stage: int, iteration: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, run_index, stage, iteration])))


def _stack_priors(priors: Sequence[NeighbourField], height: int, width: int) -> np.ndarray:
    if not priors:
        return np.empty((0, height, width, 2), dtype=np.int64)
    for prior in priors:
        if prior.entries.shape[:2] != (height, width):
            raise DimensionError("prior fields must share the query raster shape")
    return np.ascontiguousarray(np.stack([p.entries for p in priors]).astype(np.int64))


# ─────────────────────────────────────────────────────────────
# numba kernels
# ─────────────────────────────────────────────────────────────

@njit(cache=True)
def _is_valid(cu, cv, y, x, priors, separation, causal, key_width, query_width):
    if causal and cu * key_width + cv >= y * query_width + x:
        return False
    for c in range(priors.shape[0]):
        pu = priors[c, y, x, 0]
        if pu < 0:
            continue
        pv = priors[c, y, x, 1]
        dy = abs(cu - pu)
        dx = abs(cv - pv)
        cheb = dy if dy > dx else dx
        if cheb <= separation:
            return False
    return True


@njit(cache=True)
def _score(q, k, qi, kj):
    s = 0.0
    for c in range(q.shape[1]):
        s += q[qi, c] * k[kj, c]
    return s


@njit(cache=True)
def _window_sample(center, distance, size, u):
    """Uniform draw from [center - distance, center + distance] clipped to [0, size)."""
    lo = center - distance
    if lo < 0:
        lo = 0
    hi = center + distance
    if hi > size - 1:
        hi = size - 1
    r = lo + int(u * (hi - lo + 1))
    if r > hi:
        r = hi
    return r


@njit(parallel=True, cache=True)
def _init_kernel(hq, wq, hk, wk, priors, separation, causal, uniforms, out):
    n_keys = hk * wk
    failed = np.zeros(hq * wq, dtype=np.bool_)
    for p in prange(hq * wq):
        y = p // wq
        x = p % wq
        limit = n_keys
        if causal:
            limit = p if p < n_keys else n_keys
        out[y, x, 0] = -1
        out[y, x, 1] = -1
        if limit <= 0:
            failed[p] = True
            continue
        found = False
        j = 0
        for r in range(uniforms.shape[2]):
            j = int(uniforms[y, x, r] * limit)
            if j >= limit:
                j = limit - 1
            if _is_valid(j // wk, j % wk, y, x, priors, separation, causal, wk, wq):
                found = True
                break
        if not found:
            start = j
            for t in range(limit):
                jj = (start + t) % limit
                if _is_valid(jj // wk, jj % wk, y, x, priors, separation, causal, wk, wq):
                    j = jj
                    found = True
                    break
        if found:
            out[y, x, 0] = j // wk
            out[y, x, 1] = j % wk
        else:
            failed[p] = True
    return failed


@njit(parallel=True, cache=True)
def _iteration_kernel(q, k, hq, wq, hk, wk, cur, nxt, priors, separation, causal,
                      jumps, directions, unshifted, distances, uniforms):
    for p in prange(hq * wq):
        y = p // wq
        x = p % wq
        u = cur[y, x, 0]
        v = cur[y, x, 1]
        if u < 0:
            nxt[y, x, 0] = u
            nxt[y, x, 1] = v
            continue
        best = _score(q, k, p, u * wk + v)

        # propagation
        for ji in range(jumps.shape[0]):
            jump = jumps[ji]
            for di in range(directions.shape[0]):
                dy = directions[di, 0]
                dx = directions[di, 1]
                if causal and (dy > 0 or dx > 0):
                    continue
                ny = y + dy * jump
                nx = x + dx * jump
                if ny < 0 or ny >= hq or nx < 0 or nx >= wq:
                    continue
                mu = cur[ny, nx, 0]
                mv = cur[ny, nx, 1]
                if mu < 0:
                    continue
                ru = mu - dy * jump
                rv = mv - dx * jump
                if 0 <= ru < hk and 0 <= rv < wk:
                    if _is_valid(ru, rv, y, x, priors, separation, causal, wk, wq):
                        s = _score(q, k, p, ru * wk + rv)
                        if s > best:
                            best = s
                            u = ru
                            v = rv
                if unshifted:
                    if _is_valid(mu, mv, y, x, priors, separation, causal, wk, wq):
                        s = _score(q, k, p, mu * wk + mv)
                        if s > best:
                            best = s
                            u = mu
                            v = mv

        # random search around the current best
        for si in range(distances.shape[0]):
            d = distances[si]
            ru = _window_sample(u, d, hk, uniforms[y, x, si, 0])
            rv = _window_sample(v, d, wk, uniforms[y, x, si, 1])
            if _is_valid(ru, rv, y, x, priors, separation, causal, wk, wq):
                s = _score(q, k, p, ru * wk + rv)
                if s > best:
                    best = s
                    u = ru
                    v = rv

        nxt[y, x, 0] = u
        nxt[y, x, 1] = v


# ─────────────────────────────────────────────────────────────
# Public operations
# ─────────────────────────────────────────────────────────────

def is_index_valid(candidate: PixelIndex, pos: PixelIndex, priors: Sequence[NeighbourField],
                   policy: ValidityPolicy, causal: bool = False,
                   key_width: int = 0, query_width: int = 0) -> bool:
    """
    MaxNonDuplicate: candidate differs from every prior entry at `pos`.
    ModeSeparated(L): Chebyshev distance to every prior entry at `pos` exceeds L.
    Under `causal` the candidate must also precede `pos` in row-major order.
    """
    for prior in priors:
        entry = prior.entry(pos)
        if entry is not None and candidate.chebyshev(entry) <= policy.kernel_separation:
            return False
    if causal:
        if key_width < 1 or query_width < 1:
            raise DimensionError("causal validity needs key_width and query_width")
        return candidate.flat(key_width) < pos.flat(query_width)
    return True


def propagate_candidate(pos: PixelIndex, direction: Direction, jump: int,
                        current: NeighbourField) -> Optional[PixelIndex]:
    """
    The match of the neighbour `jump` pixels away in `direction`, displaced
    back by the same offset; None off either raster or if the neighbour is unmatched.
    """
    if jump < 1:
        raise DimensionError("jump must be >= 1")
    dy, dx = direction.offset
    ny, nx = pos.y + dy * jump, pos.x + dx * jump
    if not (0 <= ny < current.height and 0 <= nx < current.width):
        return None
    match = current.entry(PixelIndex(ny, nx))
    if match is None:
        return None
    hk, wk = current.key_shape
    ru, rv = match.y - dy * jump, match.x - dx * jump
    if not (0 <= ru < hk and 0 <= rv < wk):
        return None
    return PixelIndex(ru, rv)


def random_search_candidates(best: PixelIndex, key_shape: Tuple[int, int],
                             rng: np.random.Generator) -> List[PixelIndex]:
    """One uniform draw per distance R, R/2, ..., 1 from the clipped square around `best`."""
    hk, wk = key_shape
    if not (0 <= best.y < hk and 0 <= best.x < wk):
        raise DimensionError(f"{best} is outside the {hk}x{wk} key raster")
    out = []
    for d in search_distances(max(hk, wk)):
        uy, ux = rng.random(2)
        out.append(PixelIndex(
            int(_window_sample(best.y, int(d), hk, float(uy))),
            int(_window_sample(best.x, int(d), wk, float(ux))),
        ))
    return out


def init_random(height: int, width: int, key_shape: Tuple[int, int], policy: ValidityPolicy,
                priors: Sequence[NeighbourField], rng: np.random.Generator,
                causal: bool = False, retries: int = 16) -> NeighbourField:
    """
    Uniformly random valid match per position: rejection sampling with
    `retries` draws, then a wrapped linear scan.
    """
    hk, wk = key_shape
    if causal and (height, width) != (hk, wk):
        raise DimensionError("causal masking needs query and key rasters of the same shape")
    stacked = _stack_priors(priors, height, width)
    uniforms = rng.random((height, width, max(1, retries)))
    entries = np.empty((height, width, 2), dtype=np.int64)
    failed = _init_kernel(height, width, hk, wk, stacked, policy.kernel_separation,
                          causal, uniforms, entries)
    if failed.any():
        first = int(np.flatnonzero(failed)[0])
        pos = PixelIndex.from_flat(first, width)
        if not causal:
            raise InfeasiblePolicyError(
                f"no key satisfies the {policy.name} policy at query {tuple(pos)}",
                position=tuple(pos),
            )
        logger.debug(f"{int(failed.sum())} causal positions have no valid past key")
    return NeighbourField(entries=entries, key_shape=(hk, wk))


def patchmatch_pass(Q: FieldImage, K: FieldImage, config: PatchMatchConfig,
                    policy: ValidityPolicy, priors: Sequence[NeighbourField] = (),
                    run_index: int = 0, causal: bool = False,
                    on_iteration: Optional[Callable[[int, NeighbourField], None]] = None) -> NeighbourField:
    """
    One constrained argmax search: random init, then `config.iterations`
    rounds of jump-flood propagation and random search. A candidate replaces
    the stored match only if it scores strictly higher and is valid.
    """
    if Q.depth != K.depth:
        raise DimensionError(f"query depth {Q.depth} != key depth {K.depth}")
    if causal and Q.shape != K.shape:
        raise DimensionError("causal masking needs query and key rasters of the same shape")

    hq, wq = Q.shape
    hk, wk = K.shape
    field = init_random(hq, wq, (hk, wk), policy, priors,
                        _stream(config.seed, run_index, _STAGE_INIT), causal=causal,
                        retries=config.init_retries)
    stacked = _stack_priors(priors, hq, wq)
    q64 = np.ascontiguousarray(Q.flat(), dtype=np.float64)
    k64 = np.ascontiguousarray(K.flat(), dtype=np.float64)
    jumps = np.array(config.jumps, dtype=np.int64)
    distances = search_distances(max(hk, wk))

    cur = field.entries
    nxt = np.empty_like(cur)
    for t in range(config.iterations):
        uniforms = _stream(config.seed, run_index, _STAGE_SEARCH, t).random((hq, wq, distances.size, 2))
        _iteration_kernel(q64, k64, hq, wq, hk, wk, cur, nxt, stacked,
                          policy.kernel_separation, causal, jumps, DIRECTION_OFFSETS,
                          config.propagate_unshifted, distances, uniforms)
        cur, nxt = nxt, cur
        if on_iteration is not None:
            on_iteration(t, NeighbourField(entries=cur.copy(), key_shape=(hk, wk)))

    patchmatch_passes.labels(variant=policy.name).inc()
    return NeighbourField(entries=cur, key_shape=(hk, wk))


def top_kappa(Q: FieldImage, K: FieldImage, kappa: int, policy: ValidityPolicy,
              config: PatchMatchConfig, causal: bool = False) -> List[NeighbourField]:
    """kappa sequential passes; pass r sees passes 0..r-1 as priors."""
    if kappa < 1:
        raise ConfigError("kappa must be >= 1")
    fields: List[NeighbourField] = []
    for run in range(kappa):
        fields.append(patchmatch_pass(Q, K, config, policy, fields, run_index=run, causal=causal))
    logger.debug(f"top-{kappa} {policy.name} PatchMatch done on {Q.height}x{Q.width}")
    return fields


# ─────────────────────────────────────────────────────────────
# Diagnostics
# ─────────────────────────────────────────────────────────────

def match_scores(Q: FieldImage, K: FieldImage, field: NeighbourField) -> np.ndarray:
    """Compatibility of each query with its match; NaN where unmatched."""
    flat = field.flat_indices()
    out = np.full(flat.shape, np.nan)
    ok = flat >= 0
    q = Q.flat()[ok].astype(np.float64)
    k = K.flat()[flat[ok]].astype(np.float64)
    out[ok] = np.sum(q * k, axis=1) / np.sqrt(Q.depth)
    return out


def nnf_objective(Q: FieldImage, K: FieldImage, field: NeighbourField) -> float:
    """sum_i compat(q_i, k_j(i)) over matched queries."""
    return float(np.nansum(match_scores(Q, K, field)))


def count_violations(fields: Sequence[NeighbourField], policy: ValidityPolicy,
                     causal: bool = False) -> int:
    """Exhaustive check of every field entry against all earlier fields."""
    violations = 0
    for r, field in enumerate(fields):
        u = field.entries[..., 0]
        v = field.entries[..., 1]
        matched = u >= 0
        hk, wk = field.key_shape
        violations += int(np.sum(matched & ((u >= hk) | (v >= wk) | (v < 0))))
        if causal:
            hq, wq = u.shape
            qidx = np.arange(hq * wq).reshape(hq, wq)
            violations += int(np.sum(matched & (u * wk + v >= qidx)))
        for prior in fields[:r]:
            pu = prior.entries[..., 0]
            pv = prior.entries[..., 1]
            both = matched & (pu >= 0)
            cheb = np.maximum(np.abs(u - pu), np.abs(v - pv))
            violations += int(np.sum(both & (cheb <= policy.kernel_separation)))
    return violations
