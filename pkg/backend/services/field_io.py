"""
services/field_io.py

Raster files: SCRF1 (float32 vectors), grayscale PGM (P5) and heatmap export.

SCRF1 layout, little-endian:

  offset  size  content
  0       5     b"SCRF1"
  5       4     H (uint32)
  9       4     W (uint32)
  13      4     d (uint32)
  17      2     dtype tag b"f4"
  19      1     endianness tag b"<"
  20      ...   H*W*d float32 values, row-major (y, x, channel)

Every write goes to a temporary file in the target directory that is
renamed into place once complete.
"""
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from scram_core.errors import (
    BadMagicError,
    DimensionError,
    DimensionOverflowError,
    FieldFormatError,
    TruncatedPayloadError,
)
from scram_core.fields import FieldImage
from scram_core.patchmatch import NeighbourField

logger = logging.getLogger(__name__)

MAGIC = b"SCRF1"
DTYPE_TAG = b"f4"
ENDIAN_TAG = b"<"
_DIMS = struct.Struct("<III")
HEADER_SIZE = len(MAGIC) + _DIMS.size + len(DTYPE_TAG) + len(ENDIAN_TAG)
MAX_PAYLOAD_BYTES = 2 ** 34


@contextmanager
def atomic_output(path: str, mode: str = "wb", **kwargs) -> Iterator:
    """Yield a handle on a temp file next to `path`; rename over `path` on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{os.path.basename(path)}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ─────────────────────────────────────────────────────────────
# SCRF1
# ─────────────────────────────────────────────────────────────

def encode_header(height: int, width: int, depth: int) -> bytes:
    return MAGIC + _DIMS.pack(height, width, depth) + DTYPE_TAG + ENDIAN_TAG


def parse_header(header: bytes) -> Tuple[int, int, int]:
    """Validate an SCRF1 header and return (H, W, d)."""
    if len(header) < len(MAGIC) or header[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not an SCRF1 file", offset=0)
    if len(header) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header ends after {len(header)} bytes", offset=len(header))
    h, w, d = _DIMS.unpack_from(header, len(MAGIC))
    for name, value, offset in (("H", h, 5), ("W", w, 9), ("d", d, 13)):
        if value < 1:
            raise FieldFormatError(f"dimension {name} must be >= 1, got {value}", offset=offset)
    if h * w * d * 4 > MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(f"{h}x{w}x{d} float32 payload is too large", offset=5)
    tag_at = len(MAGIC) + _DIMS.size
    if header[tag_at:tag_at + 2] != DTYPE_TAG:
        raise FieldFormatError(f"unsupported dtype tag {header[tag_at:tag_at + 2]!r}", offset=tag_at)
    if header[tag_at + 2:tag_at + 3] != ENDIAN_TAG:
        raise FieldFormatError("only little-endian payloads are supported", offset=tag_at + 2)
    return h, w, d


def write_field(field: FieldImage, path: str) -> None:
    payload = field.data.astype("<f4", copy=False).tobytes(order="C")
    with atomic_output(path) as fh:
        fh.write(encode_header(field.height, field.width, field.depth))
        fh.write(payload)
    logger.debug(f"wrote {field.height}x{field.width}x{field.depth} field to {path}")


def _read_scrf(fh) -> FieldImage:
    h, w, d = parse_header(fh.read(HEADER_SIZE))
    expected = h * w * d * 4
    payload = fh.read(expected)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} of {expected} bytes", offset=HEADER_SIZE + len(payload)
        )
    if fh.read(1):
        raise FieldFormatError("trailing bytes after the payload", offset=HEADER_SIZE + expected)
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    return FieldImage(data)


def read_field(path: str) -> FieldImage:
    """SCRF1 raster, or a grayscale P5 PGM mapped to [0, 1] with one channel."""
    with open(path, "rb") as fh:
        if fh.read(2) == b"P5":
            fh.seek(0)
            return FieldImage(read_pgm_fh(fh))
        fh.seek(0)
        return _read_scrf(fh)


# ─────────────────────────────────────────────────────────────
# PGM
# ─────────────────────────────────────────────────────────────

def _pgm_tokens(raw: bytes, count: int) -> Tuple[List[int], int]:
    """First `count` whitespace separated header integers and the payload offset."""
    tokens: List[int] = []
    pos = 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FieldFormatError("malformed PGM header", offset=pos)
        tokens.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FieldFormatError("PGM header must end with one whitespace byte", offset=pos)
    return tokens, pos + 1


def read_pgm_fh(fh) -> np.ndarray:
    raw = fh.read()
    if raw[:2] != b"P5":
        raise BadMagicError("not a binary PGM (P5) file", offset=0)
    (width, height, maxval), start = _pgm_tokens(raw, 3)
    if width < 1 or height < 1:
        raise FieldFormatError(f"PGM dimensions must be >= 1, got {width}x{height}", offset=2)
    if not 0 < maxval < 65536:
        raise FieldFormatError(f"PGM maxval {maxval} out of range", offset=start - 1)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    payload = raw[start:start + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"PGM payload has {len(payload)} of {expected} bytes", offset=start + len(payload)
        )
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def read_pgm(path: str) -> np.ndarray:
    """(H, W) float64 image scaled to [0, 1]."""
    with open(path, "rb") as fh:
        return read_pgm_fh(fh)


def write_pgm(pixels: np.ndarray, path: str) -> None:
    """8-bit grayscale P5 with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.size == 0:
        raise DimensionError(f"PGM needs a non-empty 2-D image, got shape {pixels.shape}")
    height, width = pixels.shape
    with atomic_output(path) as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def heatmap_pixels(values) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray 128."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DimensionError("cannot export an empty heatmap")
    if not np.all(np.isfinite(arr)):
        raise DimensionError("heatmap values must be finite")
    if arr.ndim == 1:
        arr = arr[None, :]
    elif arr.ndim != 2:
        raise DimensionError(f"heatmap must be 1-D or 2-D, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full(arr.shape, 128, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_heatmap(values, path: str, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Write a weight row or coverage map as a PGM; returns the pixels written."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        if arr.size != shape[0] * shape[1]:
            raise DimensionError(f"{arr.size} values cannot fill a {shape[0]}x{shape[1]} heatmap")
        arr = arr.reshape(shape)
    pixels = heatmap_pixels(arr)
    write_pgm(pixels, path)
    return pixels


# ─────────────────────────────────────────────────────────────
# Neighbour fields
# ─────────────────────────────────────────────────────────────

def write_neighbour_fields(fields: Sequence[NeighbourField], path: str) -> None:
    """kappa fields as one SCRF1 raster with channels (u_0, v_0, u_1, v_1, ...)."""
    if not fields:
        raise DimensionError("no neighbour fields to write")
    stacked = np.concatenate([f.entries for f in fields], axis=2).astype(np.float32)
    write_field(FieldImage(stacked), path)


def read_neighbour_fields(path: str, key_shape: Tuple[int, int]) -> List[NeighbourField]:
    field = read_field(path)
    if field.depth % 2:
        raise FieldFormatError(f"neighbour file has an odd channel count {field.depth}", offset=13)
    entries = field.data.astype(np.int64)
    return [
        NeighbourField(entries=np.ascontiguousarray(entries[:, :, 2 * r:2 * r + 2]), key_shape=tuple(key_shape))
        for r in range(field.depth // 2)
    ]
