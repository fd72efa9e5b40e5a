import os
import logging
from typing import Dict, Any, Tuple

try:
    from dotenv import load_dotenv
except Exception:
    # dotenv is optional for tests/environments where python-dotenv is not installed
    def load_dotenv(path=None):
        return None

load_dotenv()

logger = logging.getLogger(__name__)


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"{name}={raw!r} is not an integer, using {default}")
        return default


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"{name}={raw!r} is not a number, using {default}")
        return default


def _jumps_env(name: str, default: Tuple[int, ...]) -> Tuple[int, ...]:
    raw = os.getenv(name)
    if not raw:
        return default
    try:
        return tuple(int(part) for part in raw.split(',') if part.strip())
    except ValueError:
        logger.warning(f"{name}={raw!r} is not a comma separated list, using {default}")
        return default


class Config:
    """Centralized configuration for the SCRAM attention kernels"""

    # System Info
    VERSION = "0.4.0"
    LOG_LEVEL = os.getenv('SCRAM_LOG_LEVEL', 'INFO')
    LOG_DIR = os.getenv('SCRAM_LOG_DIR')  # unset: stderr only
    THREADS = _int_env('SCRAM_THREADS', 0)  # 0 keeps numba's default

    # PatchMatch
    PATCHMATCH_ITERATIONS = _int_env('SCRAM_PM_ITERATIONS', 8)
    JUMP_SEQUENCE = _jumps_env('SCRAM_JUMPS', (8, 4, 2, 1))
    INIT_RETRIES = _int_env('SCRAM_INIT_RETRIES', 16)

    # Dense oracle
    BLOCK_ROWS = _int_env('SCRAM_BLOCK_ROWS', 256)
    ORACLE_MAX_N = _int_env('SCRAM_ORACLE_MAX_N', 2 ** 14)

    # Monte Carlo estimators
    SNIS_ALPHA = _float_env('SCRAM_SNIS_ALPHA', 0.9)
    RBF_PHI = _float_env('SCRAM_RBF_PHI', 2.0)

    # Harness
    BENCH_TIMEOUT_SECONDS = _float_env('SCRAM_BENCH_TIMEOUT', 120.0)
    COVERAGE_GATE = _float_env('SCRAM_COVERAGE_GATE', 0.5)

    @classmethod
    def get_patchmatch_config(cls) -> Dict[str, Any]:
        return {
            'iterations': cls.PATCHMATCH_ITERATIONS,
            'jumps': cls.JUMP_SEQUENCE,
            'init_retries': cls.INIT_RETRIES,
        }

    @classmethod
    def get_estimator_config(cls) -> Dict[str, Any]:
        return {
            'alpha': cls.SNIS_ALPHA,
            'phi': cls.RBF_PHI,
        }

    @classmethod
    def get_bench_config(cls) -> Dict[str, Any]:
        return {
            'timeout_seconds': cls.BENCH_TIMEOUT_SECONDS,
            'coverage_gate': cls.COVERAGE_GATE,
            'oracle_max_n': cls.ORACLE_MAX_N,
            'threads': cls.THREADS,
        }
