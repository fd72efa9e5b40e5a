"""
scram_core/fields.py

Raster types shared by every kernel: FieldImage (an H x W grid of feature
vectors), PixelIndex and AttentionOutput.
"""
from dataclasses import dataclass, field
from typing import Optional, NamedTuple, Tuple

import numpy as np

from scram_core.errors import DimensionError


class PixelIndex(NamedTuple):
    """(y, x) position, row-major, 0-based."""
    y: int
    x: int

    def flat(self, width: int) -> int:
        return self.y * width + self.x

    @classmethod
    def from_flat(cls, index: int, width: int) -> "PixelIndex":
        return cls(int(index) // width, int(index) % width)

    def chebyshev(self, other: "PixelIndex") -> int:
        return max(abs(self.y - other.y), abs(self.x - other.x))


@dataclass(frozen=True)
class FieldImage:
    """H x W raster of d-vectors stored as float32, row-major (y, x, channel)."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionError(f"field data must be H x W x d, got shape {data.shape}")
        h, w, d = data.shape
        if h < 1 or w < 1 or d < 1:
            raise DimensionError(f"field dimensions must be >= 1, got {h}x{w}x{d}")
        if not np.all(np.isfinite(data)):
            raise DimensionError("field contains NaN or Inf values")
        data = np.ascontiguousarray(data, dtype=np.float32)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @classmethod
    def zeros(cls, height: int, width: int, depth: int) -> "FieldImage":
        return cls(np.zeros((height, width, depth), dtype=np.float32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def n(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        """(n, d) float32 view."""
        return self.data.reshape(self.n, self.depth)

    def contains(self, pos: PixelIndex) -> bool:
        return 0 <= pos.y < self.height and 0 <= pos.x < self.width


@dataclass
class AttentionOutput:
    """
    H x W raster of d_v output vectors (float64) plus optional diagnostics.

    `degenerate` flags queries whose effective key set was empty; their output
    row is zero.
    """
    values: np.ndarray
    degenerate: np.ndarray
    weights: Optional[np.ndarray] = None
    log_normalizer: Optional[np.ndarray] = None
    ess: Optional[np.ndarray] = None
    variance: Optional[np.ndarray] = None
    log_weight_sum: Optional[np.ndarray] = None
    acceptance_rate: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[2])

    def to_field(self) -> FieldImage:
        return FieldImage(self.values.astype(np.float32))