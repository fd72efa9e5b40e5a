"""
scram_core/errors.py

Exception hierarchy for the attention kernels. Library code raises these;
the CLI maps them onto exit codes.
"""
from typing import Optional, Tuple


class ScramError(Exception):
    """Root of every error raised by scram_core and the services."""


class ConfigError(ScramError, ValueError):
    pass


class DimensionError(ScramError, ValueError):
    """Vector lengths, depths or raster shapes do not line up."""


class DegenerateRowError(ScramError, ValueError):
    """Every entry of a softmax row is masked (-inf)."""

    def __init__(self, message: str, query: Optional[int] = None):
        super().__init__(message)
        self.query = query


class DegenerateNormalizerError(ScramError, ValueError):
    def __init__(self, message: str, query: Optional[int] = None):
        super().__init__(message)
        self.query = query


class InfeasiblePolicyError(ScramError):
    """No key index satisfies the validity policy at some query position."""

    def __init__(self, message: str, position: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.position = position


class InfeasibleSeparationError(InfeasiblePolicyError):
    pass


class OracleGuardError(ScramError):
    """Field too large for the dense O(n^2) oracle."""


class FieldFormatError(ScramError):
    """Malformed raster file. `offset` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


class DimensionOverflowError(FieldFormatError):
    pass
