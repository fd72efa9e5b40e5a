"""
scram_core/estimators.py

Monte Carlo refinement of sparse attention.

  snis_estimate -> self-normalised importance sampling from a mixture of
                   RBF bumps at the PatchMatch modes and a uniform floor
  mh_estimate   -> Metropolis-Hastings chains started at the modes

Weights and acceptance ratios are handled in log space. The RBF over the
key raster is separable, so its normalisation over all n pixels is the
product of two 1-D normalisations.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from config import Config
from scram_core.attention import _check_qkv, compatibility
from scram_core.errors import ConfigError, DimensionError
from scram_core.fields import AttentionOutput, FieldImage, PixelIndex
from scram_core.patchmatch import NeighbourField, top_kappa
from scram_core.scram import ScramConfig
from services.metrics_service import degenerate_rows, forward_seconds

logger = logging.getLogger(__name__)

_STAGE_SNIS = 2
_STAGE_MH = 3


@dataclass
class ModeSet:
    """(n_queries, m, 2) mode centres per query on a key raster."""
    centers: np.ndarray
    key_shape: Tuple[int, int]

    @property
    def n_modes(self) -> int:
        return self.centers.shape[1]

    def row(self, i: int) -> np.ndarray:
        c = self.centers[i]
        return c[c[:, 0] >= 0]

    @classmethod
    def broadcast(cls, modes: Sequence[PixelIndex], n_queries: int, key_shape: Tuple[int, int]) -> "ModeSet":
        arr = np.array([[m.y, m.x] for m in modes], dtype=np.int64).reshape(-1, 2)
        return cls(np.tile(arr[None], (n_queries, 1, 1)), key_shape)


@dataclass(frozen=True)
class SnisConfig:
    samples: int = 9
    alpha: float = 0.9
    phi: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("SNIS needs at least one sample per query")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"mixture weight alpha must lie in [0, 1], got {self.alpha}")
        if not self.phi > 0:
            raise ConfigError("RBF length-scale phi must be positive")

    @classmethod
    def for_budget(cls, kappa: int, b: int, seed: int = 0, **overrides) -> "SnisConfig":
        """Same per-query key budget as a kappa, b sparse run."""
        values = Config.get_estimator_config()
        values.update(overrides)
        values.setdefault('samples', kappa * (2 * b + 1) ** 2)
        return cls(seed=seed, **values)


@dataclass(frozen=True)
class MhConfig:
    chains: Optional[int] = None  # None: one chain per mode
    steps: int = 100
    phi: float = 2.0
    seed: int = 0
    burn_in: int = 0

    def __post_init__(self):
        if self.chains is not None and self.chains < 1:
            raise ConfigError("MH needs at least one chain")
        if self.steps < 1:
            raise ConfigError("MH needs at least one step")
        if not self.phi > 0:
            raise ConfigError("proposal length-scale phi must be positive")
        if self.burn_in != 0:
            raise ConfigError("chains are used from their first state; burn_in must be 0")


def modes_from_fields(fields: Sequence[NeighbourField]) -> ModeSet:
    if not fields:
        raise DimensionError("no neighbour fields to take modes from")
    centers = np.stack([f.entries.reshape(-1, 2) for f in fields], axis=1).astype(np.int64)
    return ModeSet(centers, fields[0].key_shape)


def _stream(seed: int, stage: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stage, key])))


# ─────────────────────────────────────────────────────────────
# Target and importance distribution
# ─────────────────────────────────────────────────────────────

def log_unnormalized_target(q, k, d_k: Optional[int] = None) -> float:
    return compatibility(q, k, d_k)


def unnormalized_target(q, k, d_k: Optional[int] = None) -> float:
    """exp(compatibility(q, k))"""
    return math.exp(log_unnormalized_target(q, k, d_k))


def rbf_axis_pmf(centers: np.ndarray, size: int, phi: float) -> np.ndarray:
    """(m, size) discrete RBF along one axis, each row normalised."""
    t = np.arange(size, dtype=np.float64)[None, :]
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 1)
    log_g = -((t - c) ** 2) / (2.0 * phi * phi)
    log_g -= log_g.max(axis=1, keepdims=True)
    g = np.exp(log_g)
    return g / g.sum(axis=1, keepdims=True)


def importance_table(modes: np.ndarray, alpha: float, phi: float, key_shape: Tuple[int, int]) -> np.ndarray:
    """
    r(j) = alpha / m * sum_m g(j; theta_m, phi) + (1 - alpha) / n over the whole
    key raster, as an (H, W) table.
    """
    h, w = key_shape
    n = h * w
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
    if alpha > 0 and modes.shape[0] == 0:
        raise ConfigError("the mode mixture needs at least one mode when alpha > 0")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    table = np.full((h, w), (1.0 - alpha) / n)
    if alpha > 0:
        gy = rbf_axis_pmf(modes[:, 0], h, phi)
        gx = rbf_axis_pmf(modes[:, 1], w, phi)
        table += (alpha / modes.shape[0]) * np.einsum('my,mx->yx', gy, gx)
    return table


def importance_pmf(j: PixelIndex, modes: Sequence[PixelIndex], alpha: float, phi: float,
                   key_shape: Tuple[int, int]) -> float:
    arr = np.array([[m.y, m.x] for m in modes], dtype=np.int64).reshape(-1, 2)
    return float(importance_table(arr, alpha, phi, key_shape)[j.y, j.x])


# ─────────────────────────────────────────────────────────────
# SNIS
# ─────────────────────────────────────────────────────────────

def _sample_mixture(rng: np.random.Generator, modes: np.ndarray, alpha: float, phi: float,
                    key_shape: Tuple[int, int], samples: int) -> np.ndarray:
    h, w = key_shape
    n = h * w
    flat = rng.integers(0, n, size=samples)
    if alpha > 0 and modes.shape[0] > 0:
        from_mode = rng.random(samples) < alpha
        comp = rng.integers(0, modes.shape[0], size=samples)
        cdf_y = np.cumsum(rbf_axis_pmf(modes[:, 0], h, phi), axis=1)
        cdf_x = np.cumsum(rbf_axis_pmf(modes[:, 1], w, phi), axis=1)
        uy = rng.random(samples)
        ux = rng.random(samples)
        ys = np.minimum((cdf_y[comp] < uy[:, None]).sum(axis=1), h - 1)
        xs = np.minimum((cdf_x[comp] < ux[:, None]).sum(axis=1), w - 1)
        flat = np.where(from_mode, ys * w + xs, flat)
    return flat


def _sample_table(rng: np.random.Generator, pmf: np.ndarray, samples: int) -> np.ndarray:
    cdf = np.cumsum(pmf)
    return np.minimum(np.searchsorted(cdf, rng.random(samples) * cdf[-1], side='right'), pmf.size - 1)


def snis_estimate(Q: FieldImage, K: FieldImage, V: FieldImage, modes: ModeSet,
                  config: SnisConfig, causal: bool = False) -> AttentionOutput:
    """
    Per query: draw `samples` keys from the mode mixture, weight by
    p_u / r, and report the self-normalised mean, ESS, delta-method variance
    (normalised weights) and the log of the raw weight sum.

    With `causal` the mixture is restricted to keys before the query and
    renormalised there; query 0 has no such key and is flagged degenerate.
    """
    _check_qkv(Q, K, V, causal)
    if modes.centers.shape[0] != Q.n or tuple(modes.key_shape) != K.shape:
        raise DimensionError("mode set does not match the query/key rasters")
    q64 = Q.flat().astype(np.float64)
    k64 = K.flat().astype(np.float64)
    v64 = V.flat().astype(np.float64)
    scale = 1.0 / math.sqrt(Q.depth)
    h, w = K.shape

    out = np.zeros((Q.n, V.depth))
    variance = np.zeros((Q.n, V.depth))
    ess = np.full(Q.n, np.nan)
    log_wsum = np.full(Q.n, -np.inf)
    degenerate = np.zeros(Q.n, dtype=bool)

    for i in range(Q.n):
        if causal and i == 0:
            degenerate[i] = True
            continue
        rng = _stream(config.seed, _STAGE_SNIS, i)
        centres = modes.row(i)
        alpha = config.alpha if centres.shape[0] else 0.0
        table = importance_table(centres, alpha, config.phi, (h, w)).ravel()
        if causal:
            table = table[:i] / table[:i].sum()
            js = _sample_table(rng, table, config.samples)
        else:
            js = _sample_mixture(rng, centres, alpha, config.phi, (h, w), config.samples)
        log_w = (k64[js] @ q64[i]) * scale - np.log(table[js])
        lse = logsumexp(log_w)
        wn = np.exp(log_w - lse)
        vs = v64[js]
        # shift by the first sample so a constant V is reproduced exactly
        centred = vs - vs[0]
        est = vs[0] + (wn @ centred) / wn.sum()
        out[i] = est
        variance[i] = (wn ** 2) @ ((vs - est) ** 2)
        ess[i] = np.clip(1.0 / np.sum(wn ** 2), 1.0, float(config.samples))
        log_wsum[i] = lse

    return AttentionOutput(
        values=out.reshape(Q.height, Q.width, V.depth),
        degenerate=degenerate,
        ess=ess,
        variance=variance.reshape(Q.height, Q.width, V.depth),
        log_weight_sum=log_wsum,
    )


# ─────────────────────────────────────────────────────────────
# Metropolis-Hastings
# ─────────────────────────────────────────────────────────────

def offset_pmf(size: int, phi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric RBF over offsets -(size-1)..(size-1); returns (offsets, pmf)."""
    offsets = np.arange(-(size - 1), size)
    log_g = -(offsets.astype(np.float64) ** 2) / (2.0 * phi * phi)
    g = np.exp(log_g - log_g.max())
    return offsets, g / g.sum()


def mh_proposal_matrix(height: int, width: int, phi: float) -> np.ndarray:
    """
    q(j -> j') for the random-walk proposal. Off-raster proposals leave the
    chain where it is, so that mass sits on the diagonal.
    """
    offs_y, py = offset_pmf(height, phi)
    offs_x, px = offset_pmf(width, phi)
    ys, xs = np.divmod(np.arange(height * width), width)
    dy = ys[None, :] - ys[:, None]
    dx = xs[None, :] - xs[:, None]
    prop = py[dy + height - 1] * px[dx + width - 1]
    np.fill_diagonal(prop, 0.0)
    np.fill_diagonal(prop, 1.0 - prop.sum(axis=1))
    return prop


def mh_transition_matrix(q, K: FieldImage, phi: float) -> np.ndarray:
    """Full MH kernel for one query vector `q` against the key raster."""
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size != K.depth:
        raise DimensionError(f"query has {q.size} channels, keys have {K.depth}")
    log_p = (K.flat().astype(np.float64) @ q) / math.sqrt(K.depth)
    prop = mh_proposal_matrix(K.height, K.width, phi)
    accept = np.exp(np.minimum(0.0, log_p[None, :] - log_p[:, None]))
    kernel = prop * accept
    np.fill_diagonal(kernel, 0.0)
    np.fill_diagonal(kernel, 1.0 - kernel.sum(axis=1))
    return kernel


def _chain_starts(modes: ModeSet, chains: int, causal: bool) -> Tuple[np.ndarray, np.ndarray]:
    """(n_queries, chains, 2) start states cycling over each query's matched modes."""
    n_q = modes.centers.shape[0]
    starts = np.zeros((n_q, chains, 2), dtype=np.int64)
    dead = np.zeros(n_q, dtype=bool)
    for i in range(n_q):
        matched = modes.row(i)
        if matched.shape[0] == 0:
            if not causal:
                raise DimensionError(f"query {i} has no matched mode to start its chains")
            dead[i] = True
            continue
        starts[i] = matched[np.arange(chains) % matched.shape[0]]
    return starts, dead


def mh_estimate(Q: FieldImage, K: FieldImage, V: FieldImage, modes: ModeSet, config: MhConfig,
                record_visits: bool = False, causal: bool = False) -> AttentionOutput:
    """
    Chains start at the modes (cycling when there are more chains than modes)
    and every visited state, including the first, enters the average.
    `acceptance_rate` is (n_queries, chains): accepted / in-support proposals.

    Each query's uniforms come from its own stream, so a query's estimate does
    not depend on the rest of the batch. With `causal` proposals at or after
    the query are treated like off-raster ones; queries without a matched
    mode are flagged degenerate and output zero.
    """
    _check_qkv(Q, K, V, causal)
    if modes.centers.shape[0] != Q.n or tuple(modes.key_shape) != K.shape:
        raise DimensionError("mode set does not match the query/key rasters")
    if modes.n_modes < 1:
        raise DimensionError("every query needs matched modes to start its chains")
    h, w = K.shape
    n_q = Q.n
    chains = config.chains or modes.n_modes
    q64 = Q.flat().astype(np.float64)
    k64 = K.flat().astype(np.float64)
    v64 = V.flat().astype(np.float64)
    scale = 1.0 / math.sqrt(Q.depth)
    draws = np.stack([
        _stream(config.seed, _STAGE_MH, i).random((config.steps, 3, chains)) for i in range(n_q)
    ], axis=1)

    offs_y, py = offset_pmf(h, config.phi)
    offs_x, px = offset_pmf(w, config.phi)
    cdf_y, cdf_x = np.cumsum(py), np.cumsum(px)

    start, dead = _chain_starts(modes, chains, causal)
    y = start[..., 0].copy()
    x = start[..., 1].copy()
    rows = np.arange(n_q)[:, None]
    limit = np.where(dead, 0, np.arange(n_q))[:, None] if causal else None

    def log_target(yy, xx):
        return np.einsum('qcd,qd->qc', k64[yy * w + xx], q64) * scale

    current = log_target(y, x)
    total = v64[y * w + x].sum(axis=1)
    accepted = np.zeros((n_q, chains), dtype=np.int64)
    proposed = np.zeros((n_q, chains), dtype=np.int64)
    visits = np.zeros((n_q, h * w), dtype=np.int64) if record_visits else None
    if visits is not None:
        np.add.at(visits, (np.broadcast_to(rows, y.shape), y * w + x), 1)

    for step in range(config.steps):
        u = draws[step]
        ny = y + offs_y[np.minimum(np.searchsorted(cdf_y, u[:, 0], side='right'), offs_y.size - 1)]
        nx = x + offs_x[np.minimum(np.searchsorted(cdf_x, u[:, 1], side='right'), offs_x.size - 1)]
        in_support = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        if limit is not None:
            in_support &= ny * w + nx < limit
        cy = np.where(in_support, ny, y)
        cx = np.where(in_support, nx, x)
        candidate = log_target(cy, cx)
        accept = in_support & (u[:, 2] < np.exp(np.minimum(0.0, candidate - current)))
        y = np.where(accept, cy, y)
        x = np.where(accept, cx, x)
        current = np.where(accept, candidate, current)
        accepted += accept
        proposed += in_support
        total += v64[y * w + x].sum(axis=1)
        if visits is not None:
            np.add.at(visits, (np.broadcast_to(rows, y.shape), y * w + x), 1)

    states = chains * (config.steps + 1)
    values = total / states
    values[dead] = 0.0
    rate = np.where(proposed > 0, accepted / np.maximum(proposed, 1), 1.0)
    low = float(np.mean(rate[~dead] < 0.05)) if (~dead).any() else 0.0
    if low > 0:
        logger.warning(f"{low:.1%} of MH chains accept fewer than 5% of proposals")
    result = AttentionOutput(
        values=values.reshape(Q.height, Q.width, V.depth),
        degenerate=dead,
        acceptance_rate=rate,
    )
    if visits is not None:
        visits[dead] = 0
        result.extras['visits'] = visits
    return result


# ─────────────────────────────────────────────────────────────
# Pipelines
# ─────────────────────────────────────────────────────────────

def _count_degenerate(result: AttentionOutput) -> None:
    n_dead = int(result.degenerate.sum())
    if n_dead:
        degenerate_rows.inc(n_dead)


def scram_snis_forward(Q: FieldImage, K: FieldImage, V: FieldImage, config: ScramConfig,
                       snis: Optional[SnisConfig] = None) -> AttentionOutput:
    """Mode search by PatchMatch, then SNIS around the modes."""
    started = time.perf_counter()
    snis = snis or SnisConfig.for_budget(config.kappa, config.b, seed=config.patchmatch.seed)
    fields = top_kappa(Q, K, config.kappa, config.policy, config.patchmatch, causal=config.causal)
    result = snis_estimate(Q, K, V, modes_from_fields(fields), snis, causal=config.causal)
    _count_degenerate(result)
    result.extras['fields'] = fields
    forward_seconds.labels(method='snis').observe(time.perf_counter() - started)
    return result


def scram_mh_forward(Q: FieldImage, K: FieldImage, V: FieldImage, config: ScramConfig,
                     mh: Optional[MhConfig] = None) -> AttentionOutput:
    """Mode search by PatchMatch, then MH chains from the modes."""
    started = time.perf_counter()
    if mh is None:
        steps = max(1, (2 * config.b + 1) ** 2 - 1)
        mh = MhConfig(steps=steps, phi=Config.RBF_PHI, seed=config.patchmatch.seed)
    fields = top_kappa(Q, K, config.kappa, config.policy, config.patchmatch, causal=config.causal)
    result = mh_estimate(Q, K, V, modes_from_fields(fields), mh, causal=config.causal)
    _count_degenerate(result)
    result.extras['fields'] = fields
    forward_seconds.labels(method='mh').observe(time.perf_counter() - started)
    return result
