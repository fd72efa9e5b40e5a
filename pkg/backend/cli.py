"""
Command-line entry point.

  attend      sparse or exact attention of SCRF1 rasters
  patchmatch  top-kappa neighbour fields
  bench       scaling run, CSV + gnuplot data
  quality     error table against the exact oracle
  gen         synthetic rasters
  heatmap     full and sparse attention maps of one query as PGM

Exit codes: 0 ok, 1 usage, 2 data/format/dimension, 3 infeasible policy or
degenerate row. Diagnostics go to stderr; tables go to stdout unless -o is given.
"""
import argparse
import logging
import sys
from typing import List, Optional, Sequence, Tuple

from config import Config
from scram_core.attention import attention_row, full_attention
from scram_core.errors import (
    ConfigError,
    DegenerateNormalizerError,
    DegenerateRowError,
    InfeasiblePolicyError,
    ScramError,
)
from scram_core.estimators import MhConfig, SnisConfig, scram_mh_forward, scram_snis_forward
from scram_core.fields import PixelIndex
from scram_core.patchmatch import (
    PatchMatchConfig,
    configure_threads,
    count_violations,
    max_non_duplicate,
    mode_separated,
    nnf_objective,
    top_kappa,
)
from scram_core.scram import (
    ScramConfig,
    expand_neighbourhood,
    local_window_attention,
    scram_forward,
    sparse_attention_row,
)
from services import benchmark_engine as bench
from services.field_io import (
    atomic_output,
    export_heatmap,
    read_field,
    read_pgm,
    write_field,
    write_neighbour_fields,
)
from services.logger_service import configure_logging
from services.metrics_service import get_metrics_text, infeasible_policy
from services.synthetic_data import (
    SyntheticKind,
    SyntheticSpec,
    gen_lowrank_qk,
    gen_smooth_source,
    generate,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INFEASIBLE = 3


class UsageError(Exception):
    pass


def parse_size(text: str) -> Tuple[int, int]:
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def parse_sizes(text: str) -> List[Tuple[int, int]]:
    return [parse_size(part) for part in text.split(",") if part]


def parse_position(text: str) -> PixelIndex:
    try:
        y, x = (int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"position must look like y,x, got {text!r}") from None
    return PixelIndex(y, x)


def parse_jumps(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part)
    except ValueError:
        raise argparse.ArgumentTypeError(f"jumps must be comma separated integers, got {text!r}") from None


# ─────────────────────────────────────────────────────────────
# Parser
# ─────────────────────────────────────────────────────────────

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=Config.THREADS, help="0 keeps the numba default")
    p.add_argument("--metrics-file", help="write Prometheus metrics here on exit")
    p.add_argument("--log-level", default=Config.LOG_LEVEL)
    p.add_argument("--log-dir", default=Config.LOG_DIR, help="also log to <dir>/scram.log")


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=["max", "mode"], default="max")
    p.add_argument("--kappa", type=int, default=1)
    p.add_argument("-L", "--separation", type=int, default=2, help="mode separation (variant mode)")
    p.add_argument("--b", type=int, default=0, help="neighbourhood half-width")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--iterations", type=int, default=Config.PATCHMATCH_ITERATIONS)
    p.add_argument("--jumps", type=parse_jumps, default=Config.JUMP_SEQUENCE)
    p.add_argument("--no-unshifted", action="store_true", help="only propagate shifted neighbour matches")


def _estimator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, help="SNIS samples per query (default kappa*(2b+1)^2)")
    p.add_argument("--alpha", type=float, default=Config.SNIS_ALPHA)
    p.add_argument("--phi", type=float, default=Config.RBF_PHI)
    p.add_argument("--chains", type=int, help="MH chains per query (default one per mode)")
    p.add_argument("--steps", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scram", description="Sparse attention by PatchMatch")
    parser.add_argument("--version", action="version", version=f"%(prog)s {Config.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attend", help="attention output of Q, K, V rasters")
    p.add_argument("-q", "--queries", required=True)
    p.add_argument("-k", "--keys", required=True)
    p.add_argument("-v", "--values", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--method", choices=sorted(bench.METHODS), default="scram")
    _policy_flags(p)
    _estimator_flags(p)
    _common(p)

    p = sub.add_parser("patchmatch", help="top-kappa neighbour fields")
    p.add_argument("-q", "--queries", required=True)
    p.add_argument("-k", "--keys", required=True)
    p.add_argument("-o", "--output", required=True)
    _policy_flags(p)
    _common(p)

    p = sub.add_parser("bench", help="wall-clock scaling run")
    p.add_argument("--methods", default="full,scram")
    p.add_argument("--sizes", type=parse_sizes, default=[(32, 32), (64, 64), (128, 128)])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--d-k", type=int, default=3)
    p.add_argument("--timeout", type=float, default=Config.BENCH_TIMEOUT_SECONDS)
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.add_argument("--gnuplot", help="gnuplot data file")
    _policy_flags(p)
    _common(p)

    p = sub.add_parser("quality", help="error table against full attention")
    p.add_argument("-q", "--queries", required=True)
    p.add_argument("-k", "--keys", required=True)
    p.add_argument("-v", "--values", required=True)
    p.add_argument("--methods", default="scram")
    p.add_argument("--coverage-gate", type=float, default=Config.COVERAGE_GATE)
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    _policy_flags(p)
    _common(p)

    p = sub.add_parser("gen", help="synthetic rasters")
    p.add_argument("--kind", choices=[k.value for k in SyntheticKind], required=True)
    p.add_argument("--size", type=parse_size, default=(32, 32))
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--blob-width", type=float, default=2.0)
    p.add_argument("--source", help="PGM whose pixels form the score matrix (lowrank)")
    p.add_argument("--key-output", help="key raster path (lowrank); -o receives the queries")
    p.add_argument("-o", "--output", required=True)
    _common(p)

    p = sub.add_parser("heatmap", help="full and sparse attention maps of one query")
    p.add_argument("-q", "--queries", required=True)
    p.add_argument("-k", "--keys", required=True)
    p.add_argument("--query", type=parse_position, required=True, help="y,x")
    p.add_argument("--full-output", required=True)
    p.add_argument("--sparse-output")
    _policy_flags(p)
    _common(p)
    return parser


# ─────────────────────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────────────────────

def scram_config_from(args) -> ScramConfig:
    policy = mode_separated(args.separation) if args.variant == "mode" else max_non_duplicate()
    patchmatch = PatchMatchConfig(
        iterations=args.iterations,
        jumps=args.jumps,
        seed=args.seed,
        init_retries=Config.INIT_RETRIES,
        propagate_unshifted=not args.no_unshifted,
    )
    return ScramConfig(kappa=args.kappa, b=args.b, policy=policy, patchmatch=patchmatch, causal=args.causal)


def cmd_attend(args) -> int:
    Q, K, V = read_field(args.queries), read_field(args.keys), read_field(args.values)
    config = scram_config_from(args)
    if args.method == "full":
        out = full_attention(Q, K, V, causal=args.causal)
    elif args.method == "local":
        out = local_window_attention(Q, K, V, args.b, causal=args.causal)
    elif args.method == "snis":
        overrides = {"alpha": args.alpha, "phi": args.phi}
        if args.samples is not None:
            overrides["samples"] = args.samples
        out = scram_snis_forward(Q, K, V, config, SnisConfig.for_budget(args.kappa, args.b, args.seed, **overrides))
    elif args.method == "mh":
        mh = MhConfig(chains=args.chains, steps=args.steps, phi=args.phi, seed=args.seed)
        out = scram_mh_forward(Q, K, V, config, mh)
    else:
        out = scram_forward(Q, K, V, config)
    if out.degenerate.any():
        logger.warning(f"{int(out.degenerate.sum())} queries had no keys to attend to; their output is zero")
    write_field(out.to_field(), args.output)
    logger.info(f"{args.method} attention written to {args.output}")
    return EXIT_OK


def cmd_patchmatch(args) -> int:
    Q, K = read_field(args.queries), read_field(args.keys)
    config = scram_config_from(args)
    fields = top_kappa(Q, K, config.kappa, config.policy, config.patchmatch, causal=config.causal)
    write_neighbour_fields(fields, args.output)
    for r, f in enumerate(fields):
        logger.info(f"pass {r}: objective {nnf_objective(Q, K, f):.6g}")
    violations = count_violations(fields, config.policy, config.causal)
    if violations:
        logger.error(f"{violations} neighbour field entries break the {config.policy.name} policy")
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_bench(args) -> int:
    params = bench.BenchParams(kappa=args.kappa, b=args.b, variant=args.variant,
                               separation=args.separation, d_k=args.d_k, seed=args.seed)
    methods = [m for m in args.methods.split(",") if m]
    result = bench.run_scaling_bench(methods, args.sizes, reps=args.reps, seed=args.seed,
                                     threads=args.threads, params=params, timeout=args.timeout)
    if args.output:
        bench.write_bench_csv(result, args.output)
    else:
        result.to_frame().to_csv(sys.stdout, index=False, lineterminator="\n")
    if args.gnuplot:
        bench.write_gnuplot(result, args.gnuplot)
    for line in result.summary_lines():
        print(line, file=sys.stderr)
    if "full" in result.exponents and "scram" in result.exponents and not bench.exponents_consistent(result):
        logger.warning("full attention did not scale worse than scram on this run")
    return EXIT_OK


def cmd_quality(args) -> int:
    Q, K, V = read_field(args.queries), read_field(args.keys), read_field(args.values)
    config = scram_config_from(args)
    cases = [bench.QualityCase(name=m, method=m, config=config) for m in args.methods.split(",") if m]
    report = bench.quality_report(Q, K, V, cases, coverage_gate=args.coverage_gate)
    if args.output:
        bench.write_quality_csv(report, args.output)
    else:
        report.table.to_csv(sys.stdout, index=False, lineterminator="\n")
    return EXIT_OK


def cmd_gen(args) -> int:
    h, w = args.size
    kind = SyntheticKind(args.kind)
    if kind is SyntheticKind.LOWRANK:
        if not args.key_output:
            raise UsageError("gen --kind lowrank needs --key-output for the key raster")
        if args.source:
            source = read_pgm(args.source)
            shapes = ((source.shape[0], 1), (source.shape[1], 1))
        else:
            source = gen_smooth_source(h, w, args.seed)
            shapes = ((h, w), (h, w))
        factors = gen_lowrank_qk(source, args.depth, *shapes)
        write_field(factors.Q, args.output)
        write_field(factors.K, args.key_output)
        if factors.rank_deficient:
            logger.warning(f"source rank {factors.rank} < d_k={args.depth}; padded with zero channels")
        return EXIT_OK
    spec = SyntheticSpec(kind=kind, height=h, width=w, seed=args.seed, depth=args.depth,
                         count=args.count, amplitude=args.amplitude, blob_width=args.blob_width)
    write_field(generate(spec), args.output)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    Q, K = read_field(args.queries), read_field(args.keys)
    if not Q.contains(args.query):
        raise UsageError(f"query {tuple(args.query)} is outside the {Q.height}x{Q.width} raster")
    export_heatmap(attention_row(Q, K, args.query, causal=args.causal), args.full_output)
    if args.sparse_output:
        config = scram_config_from(args)
        fields = top_kappa(Q, K, config.kappa, config.policy, config.patchmatch, causal=config.causal)
        sets = expand_neighbourhood(fields, config.b, K.height, K.width, causal=config.causal)
        export_heatmap(sparse_attention_row(Q, K, sets, args.query, causal=config.causal), args.sparse_output)
    return EXIT_OK


COMMANDS = {
    "attend": cmd_attend,
    "patchmatch": cmd_patchmatch,
    "bench": cmd_bench,
    "quality": cmd_quality,
    "gen": cmd_gen,
    "heatmap": cmd_heatmap,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level, args.log_dir)
    configure_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except InfeasiblePolicyError as exc:
        infeasible_policy.inc()
        logger.error(f"infeasible policy: {exc}")
        return EXIT_INFEASIBLE
    except (DegenerateRowError, DegenerateNormalizerError) as exc:
        logger.error(f"degenerate row: {exc}")
        return EXIT_INFEASIBLE
    except (ScramError, ValueError, OSError) as exc:
        logger.error(f"data error: {exc}")
        return EXIT_DATA
    finally:
        if args.metrics_file:
            with atomic_output(args.metrics_file) as fh:
                fh.write(get_metrics_text())


if __name__ == "__main__":
    sys.exit(main())
