"""
Synthetic attention inputs
==========================
Generators for the query/key/value rasters the harness and tests run on.

Supports:
  - Low-rank SVD factorisation of a score matrix into Q and K
  - Smooth score matrices built from Gaussian-filtered noise factors
  - Gaussian blob key fields with recorded peak positions
  - Uniform random fields

Everything is deterministic given the seed.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from scram_core.errors import DimensionError
from scram_core.fields import FieldImage, PixelIndex

logger = logging.getLogger(__name__)


class SyntheticKind(Enum):
    LOWRANK = "lowrank"
    BLOBS = "blobs"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class SyntheticSpec:
    kind: SyntheticKind
    height: int
    width: int
    seed: int = 0
    depth: int = 4
    count: int = 3
    amplitude: float = 1.0
    blob_width: float = 2.0
    centers: Optional[Tuple[Tuple[int, int], ...]] = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.depth < 1:
            raise DimensionError("synthetic rasters need positive dimensions")
        if self.count < 0:
            raise DimensionError("blob count must be >= 0")
        if self.centers is not None:
            for cy, cx in self.centers:
                if not (0 <= cy < self.height and 0 <= cx < self.width):
                    raise DimensionError(f"blob centre {(cy, cx)} is outside the raster")


@dataclass
class LowRankFactors:
    Q: FieldImage
    K: FieldImage
    singular_values: np.ndarray
    rank: int
    rank_deficient: bool


@dataclass
class BlobField:
    field: FieldImage
    centers: List[PixelIndex] = field(default_factory=list)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5CA])))


# ─────────────────────────────────────────────────────────────
# Low-rank family
# ─────────────────────────────────────────────────────────────

def gen_lowrank_qk(source: np.ndarray, d_k: int,
                   query_shape: Optional[Tuple[int, int]] = None,
                   key_shape: Optional[Tuple[int, int]] = None) -> LowRankFactors:
    """
    Rank-d_k truncated SVD of `source` (n_queries x n_keys) split as
    Q = U sqrt(S), K = V sqrt(S), so Q K^T is the truncated reconstruction.
    A source of lower rank fills the missing channels with zeros.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2:
        raise DimensionError("source must be a 2-D matrix")
    m, n = source.shape
    if d_k < 1 or m < d_k or n < d_k:
        raise DimensionError(f"a {m}x{n} source cannot give {d_k} channels")
    query_shape = query_shape or (m, 1)
    key_shape = key_shape or (n, 1)
    if query_shape[0] * query_shape[1] != m or key_shape[0] * key_shape[1] != n:
        raise DimensionError("raster shapes do not match the source matrix")

    u, s, vt = np.linalg.svd(source, full_matrices=False)
    tol = s[0] * max(m, n) * np.finfo(np.float64).eps if s.size else 0.0
    available = int(np.sum(s > tol))
    rank = min(d_k, available)
    rank_deficient = rank < d_k
    if rank_deficient:
        logger.warning(f"source has rank {available} < d_k={d_k}; padding with zero channels")

    # fix SVD signs so the largest entry of each left vector is positive
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    flip[flip == 0] = 1.0
    u = u * flip
    vt = vt * flip[:, None]

    root = np.sqrt(s[:rank])
    q = np.zeros((m, d_k))
    k = np.zeros((n, d_k))
    q[:, :rank] = u[:, :rank] * root
    k[:, :rank] = vt[:rank].T * root
    return LowRankFactors(
        Q=FieldImage(q.reshape(query_shape[0], query_shape[1], d_k)),
        K=FieldImage(k.reshape(key_shape[0], key_shape[1], d_k)),
        singular_values=s,
        rank=rank,
        rank_deficient=rank_deficient,
    )


def smooth_noise(height: int, width: int, channels: int, seed: int, sigma: float = 2.0) -> np.ndarray:
    """Gaussian-filtered white noise, each channel scaled to unit max-abs."""
    noise = _rng(seed).standard_normal((channels, height, width))
    out = np.stack([gaussian_filter(c, sigma=sigma, mode='reflect') for c in noise], axis=-1)
    peak = np.max(np.abs(out), axis=(0, 1), keepdims=True)
    peak[peak == 0] = 1.0
    return out / peak


def gen_smooth_source(height: int, width: int, seed: int, factors: int = 6,
                      sigma: float = 2.0, contrast: float = 12.0) -> np.ndarray:
    """
    Smooth (n x n) score matrix over an H x W raster: a sum of `factors`
    outer products of smooth query and key fields with decaying weights,
    scaled so its largest entry has magnitude `contrast`.
    """
    a = smooth_noise(height, width, factors, seed, sigma).reshape(-1, factors)
    b = smooth_noise(height, width, factors, seed + 7919, sigma).reshape(-1, factors)
    weights = 0.7 ** np.arange(factors)
    source = (a * weights) @ b.T
    top = np.max(np.abs(source))
    return source * (contrast / top) if top > 0 else source


def smooth_field(height: int, width: int, depth: int, seed: int, sigma: float = 2.0) -> FieldImage:
    return FieldImage(smooth_noise(height, width, depth, seed, sigma))


def lowrank_family(height: int, width: int, seed: int, d_k: int = 4, d_v: int = 3,
                   contrast: float = 12.0) -> Tuple[FieldImage, FieldImage, FieldImage]:
    """Spatially coherent Q, K from a low-rank smooth source, plus smooth values."""
    source = gen_smooth_source(height, width, seed, contrast=contrast)
    factors = gen_lowrank_qk(source, d_k, (height, width), (height, width))
    return factors.Q, factors.K, smooth_field(height, width, d_v, seed + 1)


# ─────────────────────────────────────────────────────────────
# Blobs and uniform noise
# ─────────────────────────────────────────────────────────────

def _blob_centers(spec: SyntheticSpec, rng: np.random.Generator) -> List[PixelIndex]:
    if spec.centers is not None:
        return [PixelIndex(int(y), int(x)) for y, x in spec.centers]
    spacing = int(np.ceil(3 * spec.blob_width))
    centers: List[PixelIndex] = []
    for _ in range(1000 * max(1, spec.count)):
        if len(centers) == spec.count:
            break
        c = PixelIndex(int(rng.integers(spec.height)), int(rng.integers(spec.width)))
        if all(c.chebyshev(o) > spacing for o in centers):
            centers.append(c)
    while len(centers) < spec.count:
        c = PixelIndex(int(rng.integers(spec.height)), int(rng.integers(spec.width)))
        logger.warning(f"could not keep blob {len(centers)} {spacing} px from the others")
        centers.append(c)
    return centers


def gen_blobs(spec: SyntheticSpec) -> BlobField:
    """Sum of isotropic Gaussian bumps, broadcast to `spec.depth` channels."""
    rng = _rng(spec.seed)
    centers = _blob_centers(spec, rng)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    total = np.zeros((spec.height, spec.width))
    for c in centers:
        d2 = (ys - c.y) ** 2 + (xs - c.x) ** 2
        total += spec.amplitude * np.exp(-d2 / (2.0 * spec.blob_width ** 2))
    data = np.repeat(total[:, :, None], spec.depth, axis=2)
    return BlobField(field=FieldImage(data), centers=centers)


def gen_uniform(height: int, width: int, depth: int, seed: int,
                low: float = -1.0, high: float = 1.0) -> FieldImage:
    return FieldImage(_rng(seed).uniform(low, high, size=(height, width, depth)))


def blob_family(spec: SyntheticSpec, d_v: int = 3) -> Tuple[FieldImage, FieldImage, FieldImage, List[PixelIndex]]:
    """Constant positive queries over a blob key raster: every query sees the same peaks."""
    blobs = gen_blobs(spec)
    Q = FieldImage(np.ones((spec.height, spec.width, spec.depth)))
    V = smooth_field(spec.height, spec.width, d_v, spec.seed + 1)
    return Q, blobs.field, V, blobs.centers


def generate(spec: SyntheticSpec) -> FieldImage:
    """Single raster for the CLI `gen` subcommand."""
    if spec.kind is SyntheticKind.BLOBS:
        return gen_blobs(spec).field
    if spec.kind is SyntheticKind.UNIFORM:
        return gen_uniform(spec.height, spec.width, spec.depth, spec.seed)
    return smooth_field(spec.height, spec.width, spec.depth, spec.seed)


def generate_lowrank_pair(height: int, width: int, d_k: int, seed: int) -> Tuple[FieldImage, FieldImage]:
    factors = gen_lowrank_qk(gen_smooth_source(height, width, seed), d_k, (height, width), (height, width))
    return factors.Q, factors.K


def peak_positions(fields: Sequence[FieldImage]) -> List[PixelIndex]:
    """Argmax of channel 0 of each raster."""
    out = []
    for f in fields:
        y, x = np.unravel_index(int(np.argmax(f.data[:, :, 0])), f.shape)
        out.append(PixelIndex(int(y), int(x)))
    return out
