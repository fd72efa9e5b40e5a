"""
Attention Benchmark Engine
==========================
Wall-clock scaling runs and approximation-quality tables for the attention
methods in scram_core.

Supports:
  - Registry of forward passes: full, scram, snis, mh, local
  - Scaling runs over ascending raster sizes with a log-log slope fit
  - Quality tables against the exact oracle (L2 / L-inf error, attention
    mass coverage, argmax hit rate)
  - CSV and gnuplot outputs

Design:
  - Input generation is outside the timed region; one untimed warmup run
    absorbs JIT compilation.
  - A run slower than the timeout ceiling is recorded, flagged and left out
    of the fit; larger sizes of that method are skipped.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numba import get_num_threads

from config import Config
from scram_core.attention import _as_f64, _blocks, causal_block_mask, full_attention, score_block
from scram_core.errors import ConfigError, DimensionError, OracleGuardError
from scram_core.estimators import scram_mh_forward, scram_snis_forward
from scram_core.fields import AttentionOutput, FieldImage
from scram_core.patchmatch import PatchMatchConfig, configure_threads, max_non_duplicate, mode_separated
from scram_core.scram import ScramConfig, SparseIndexSet, local_window_attention, scram_forward, sparse_attention_output
from services.field_io import atomic_output
from services.synthetic_data import gen_uniform

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "method", "n", "H", "W", "d_k", "kappa", "b", "variant",
    "seconds_mean", "seconds_std", "reps", "threads", "seed",
]


@dataclass(frozen=True)
class BenchParams:
    kappa: int = 2
    b: int = 1
    variant: str = "max"
    separation: int = 2
    d_k: int = 3
    d_v: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("max", "mode"):
            raise ConfigError(f"unknown policy variant {self.variant!r}")

    def scram_config(self) -> ScramConfig:
        policy = mode_separated(self.separation) if self.variant == "mode" else max_non_duplicate()
        return ScramConfig(
            kappa=self.kappa,
            b=self.b,
            policy=policy,
            patchmatch=PatchMatchConfig.from_config(seed=self.seed),
        )


MethodFn = Callable[[FieldImage, FieldImage, FieldImage, BenchParams], AttentionOutput]

METHODS: Dict[str, MethodFn] = {
    "full": lambda Q, K, V, p: full_attention(Q, K, V),
    "scram": lambda Q, K, V, p: scram_forward(Q, K, V, p.scram_config()),
    "snis": lambda Q, K, V, p: scram_snis_forward(Q, K, V, p.scram_config()),
    "mh": lambda Q, K, V, p: scram_mh_forward(Q, K, V, p.scram_config()),
    "local": lambda Q, K, V, p: local_window_attention(Q, K, V, p.b),
}


def get_method(name: str) -> MethodFn:
    try:
        return METHODS[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}, available: {', '.join(METHODS)}") from None


@dataclass
class BenchRecord:
    method: str
    n: int
    H: int
    W: int
    d_k: int
    kappa: int
    b: int
    variant: str
    seconds_mean: float
    seconds_std: float
    reps: int
    threads: int
    seed: int
    timed_out: bool = False

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("a bench record needs at least one repetition")
        if not self.seconds_mean > 0:
            raise ConfigError(f"non-positive timing {self.seconds_mean} for {self.method}")

    def to_row(self) -> Dict[str, object]:
        row = asdict(self)
        row.pop("timed_out")
        return row


@dataclass
class BenchResult:
    records: List[BenchRecord] = field(default_factory=list)
    exponents: Dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.records], columns=CSV_COLUMNS)

    def timed_out(self) -> List[BenchRecord]:
        return [r for r in self.records if r.timed_out]

    def summary_lines(self) -> List[str]:
        lines = [f"slope {name} {slope:.3f}" for name, slope in self.exponents.items()]
        for r in self.timed_out():
            lines.append(f"timeout {r.method} n={r.n} excluded from fit")
        return lines


def bench_inputs(height: int, width: int, params: BenchParams) -> Tuple[FieldImage, FieldImage, FieldImage]:
    Q = gen_uniform(height, width, params.d_k, params.seed)
    K = gen_uniform(height, width, params.d_k, params.seed + 1)
    V = gen_uniform(height, width, params.d_v, params.seed + 2)
    return Q, K, V


def time_method(fn: MethodFn, Q: FieldImage, K: FieldImage, V: FieldImage, params: BenchParams,
                reps: int, timeout: float,
                clock: Callable[[], float] = time.perf_counter) -> Tuple[List[float], bool]:
    """Warmup once, then up to `reps` timed runs; stops early past `timeout`."""
    started = clock()
    fn(Q, K, V, params)
    warmup = clock() - started
    if warmup > timeout:
        return [warmup], True
    times: List[float] = []
    for _ in range(reps):
        started = clock()
        fn(Q, K, V, params)
        elapsed = clock() - started
        times.append(elapsed)
        if elapsed > timeout:
            return times, True
    return times, False


def fit_exponent(ns: Sequence[int], seconds: Sequence[float]) -> float:
    """Least-squares slope of log(seconds) against log(n); NaN with fewer than two points."""
    if len(ns) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(np.asarray(ns, dtype=np.float64)),
                          np.log(np.asarray(seconds, dtype=np.float64)), 1)
    return float(slope)


def run_scaling_bench(methods: Sequence[str], sizes: Sequence[Tuple[int, int]], reps: int = 5,
                      seed: int = 0, threads: int = 0, params: Optional[BenchParams] = None,
                      timeout: Optional[float] = None,
                      clock: Callable[[], float] = time.perf_counter) -> BenchResult:
    if reps < 3:
        raise ConfigError("scaling runs need reps >= 3")
    if not sizes:
        raise ConfigError("no sizes to benchmark")
    ns = [h * w for h, w in sizes]
    if any(a >= b for a, b in zip(ns, ns[1:])):
        raise ConfigError(f"sizes must be strictly ascending in n, got {list(sizes)}")
    fns = {name: get_method(name) for name in methods}
    params = params or BenchParams(seed=seed)
    timeout = Config.get_bench_config()['timeout_seconds'] if timeout is None else timeout
    configure_threads(threads)
    used_threads = get_num_threads()

    result = BenchResult()
    for name, fn in fns.items():
        for h, w in sizes:
            Q, K, V = bench_inputs(h, w, params)
            times, timed_out = time_method(fn, Q, K, V, params, reps, timeout, clock)
            record = BenchRecord(
                method=name, n=h * w, H=h, W=w, d_k=params.d_k,
                kappa=params.kappa, b=params.b, variant=params.variant,
                seconds_mean=float(np.mean(times)), seconds_std=float(np.std(times)),
                reps=len(times), threads=used_threads, seed=params.seed, timed_out=timed_out,
            )
            result.records.append(record)
            logger.info(f"{name} {h}x{w}: {record.seconds_mean:.4f}s +- {record.seconds_std:.4f}s")
            if timed_out:
                logger.warning(f"{name} exceeded {timeout}s at {h}x{w}; skipping larger sizes")
                break
        kept = [r for r in result.records if r.method == name and not r.timed_out]
        result.exponents[name] = fit_exponent([r.n for r in kept], [r.seconds_mean for r in kept])
    return result


def exponents_consistent(result: BenchResult, dense: str = "full", sparse: str = "scram") -> bool:
    """The dense method must scale strictly worse than the sparse one."""
    a = result.exponents.get(dense, float("nan"))
    b = result.exponents.get(sparse, float("nan"))
    return bool(a > b)


def check_determinism(method: str, Q: FieldImage, K: FieldImage, V: FieldImage,
                      params: BenchParams, threads: int = 0) -> bool:
    """Output at `threads` threads equals the single-threaded output bitwise."""
    fn = get_method(method)
    previous = get_num_threads()
    try:
        configure_threads(threads)
        parallel = fn(Q, K, V, params).values
        configure_threads(1)
        serial = fn(Q, K, V, params).values
    finally:
        configure_threads(previous)
    return parallel.tobytes() == serial.tobytes()


def write_bench_csv(result: BenchResult, path: str) -> None:
    with atomic_output(path, "w", encoding="utf-8", newline="") as fh:
        result.to_frame().to_csv(fh, index=False, lineterminator="\n")


def write_gnuplot(result: BenchResult, path: str) -> None:
    """One index block per method: n, mean seconds, std seconds."""
    blocks = []
    for name in dict.fromkeys(r.method for r in result.records):
        lines = [f"# method {name} slope {result.exponents.get(name, float('nan')):.4f}",
                 "# n seconds_mean seconds_std timed_out"]
        for r in result.records:
            if r.method == name:
                lines.append(f"{r.n} {r.seconds_mean:.9g} {r.seconds_std:.9g} {int(r.timed_out)}")
        blocks.append("\n".join(lines))
    with atomic_output(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n\n\n".join(blocks) + "\n")


# ─────────────────────────────────────────────────────────────
# Quality against the exact oracle
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QualityCase:
    """One row of a quality table. `sets` bypasses the search with a fixed support."""
    name: str
    method: str = "scram"
    config: ScramConfig = field(default_factory=ScramConfig)
    sets: Optional[SparseIndexSet] = None


@dataclass
class QualityReport:
    table: pd.DataFrame
    per_query: Dict[str, pd.DataFrame]
    coverage_gate: float


def _block_support(sets: SparseIndexSet, start: int, stop: int, n_keys: int) -> np.ndarray:
    mask = np.zeros((stop - start, n_keys), dtype=bool)
    counts = sets.counts[start:stop]
    rows = np.repeat(np.arange(stop - start), counts)
    idx = sets.indices[start:stop]
    mask[rows, idx[idx >= 0]] = True
    return mask


def support_diagnostics(Q: FieldImage, K: FieldImage, sets: SparseIndexSet,
                        causal: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Per query: exact attention mass inside the support, and whether the exact argmax is in it."""
    q64, k64 = _as_f64(Q), _as_f64(K)
    coverage = np.full(Q.n, np.nan)
    hits = np.zeros(Q.n, dtype=bool)
    for start, stop in _blocks(Q.n):
        scores = score_block(q64[start:stop], k64)
        if causal:
            scores[causal_block_mask(start, stop, K.n)] = -np.inf
        top = scores.max(axis=1)
        live = top > -np.inf
        e = np.exp(scores[live] - top[live, None])
        p = e / e.sum(axis=1, keepdims=True)
        support = _block_support(sets, start, stop, K.n)[live]
        rows = np.flatnonzero(live) + start
        coverage[rows] = np.sum(p * support, axis=1)
        hits[rows] = support[np.arange(rows.size), np.argmax(p, axis=1)]
    return coverage, hits


def _run_case(case: QualityCase, Q: FieldImage, K: FieldImage, V: FieldImage
              ) -> Tuple[AttentionOutput, Optional[SparseIndexSet]]:
    causal = case.config.causal
    if case.sets is not None:
        return sparse_attention_output(Q, K, V, case.sets, causal=causal), case.sets
    if case.method == "scram":
        out = scram_forward(Q, K, V, case.config)
    elif case.method == "local":
        out = local_window_attention(Q, K, V, case.config.b, causal=causal)
    elif case.method == "snis":
        out = scram_snis_forward(Q, K, V, case.config)
    elif case.method == "mh":
        out = scram_mh_forward(Q, K, V, case.config)
    else:
        raise ConfigError(f"unknown quality method {case.method!r}")
    return out, out.extras.get("sets")


def quality_report(Q: FieldImage, K: FieldImage, V: FieldImage, cases: Sequence[QualityCase],
                   coverage_gate: Optional[float] = None, max_n: Optional[int] = None) -> QualityReport:
    """
    Error of each case against full attention. Coverage and argmax hits need a
    support set, so they are NaN for the Monte Carlo methods.
    """
    defaults = Config.get_bench_config()
    max_n = defaults['oracle_max_n'] if max_n is None else max_n
    gate = defaults['coverage_gate'] if coverage_gate is None else coverage_gate
    if max(Q.n, K.n) > max_n:
        raise OracleGuardError(
            f"quality needs the exact oracle; n={max(Q.n, K.n)} exceeds the limit {max_n}"
        )
    if not cases:
        raise DimensionError("no quality cases given")

    exact: Dict[bool, np.ndarray] = {}
    rows = []
    per_query: Dict[str, pd.DataFrame] = {}
    for case in cases:
        causal = case.config.causal
        if causal not in exact:
            exact[causal] = full_attention(Q, K, V, causal=causal).flat()
        out, sets = _run_case(case, Q, K, V)
        diff = out.flat() - exact[causal]
        l2 = np.linalg.norm(diff, axis=1)
        linf = np.max(np.abs(diff), axis=1)
        if sets is not None:
            coverage, hits = support_diagnostics(Q, K, sets, causal)
            hit_rate = float(np.mean(hits))
        else:
            coverage = np.full(Q.n, np.nan)
            hits = np.zeros(Q.n, dtype=bool)
            hit_rate = float("nan")
        median_cov = float(np.nanmedian(coverage)) if np.any(np.isfinite(coverage)) else float("nan")
        per_query[case.name] = pd.DataFrame({"l2": l2, "linf": linf, "coverage": coverage, "argmax_hit": hits})
        rows.append({
            "config": case.name,
            "method": "sets" if case.sets is not None else case.method,
            "kappa": case.config.kappa,
            "b": case.config.b,
            "variant": case.config.policy.name,
            "l2_median": float(np.median(l2)),
            "l2_max": float(np.max(l2)),
            "linf_max": float(np.max(linf)),
            "coverage_median": median_cov,
            "coverage_min": float(np.nanmin(coverage)) if not math.isnan(median_cov) else float("nan"),
            "argmax_hit_rate": hit_rate,
            "coverage_gate": gate,
            "passed": bool(median_cov >= gate) if not math.isnan(median_cov) else False,
        })
        logger.info(f"quality {case.name}: median L2 {rows[-1]['l2_median']:.3e}, coverage {median_cov:.3f}")
    return QualityReport(table=pd.DataFrame(rows), per_query=per_query, coverage_gate=gate)


def write_quality_csv(report: QualityReport, path: str) -> None:
    with atomic_output(path, "w", encoding="utf-8", newline="") as fh:
        report.table.to_csv(fh, index=False, lineterminator="\n")
