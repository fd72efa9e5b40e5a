"""
services/metrics_service.py

Prometheus counters and timings for the attention kernels.
"""
from prometheus_client import Counter, Histogram, generate_latest, CONTENT_TYPE_LATEST
from prometheus_client import CollectorRegistry

registry = CollectorRegistry()

patchmatch_passes = Counter('scram_patchmatch_passes_total', 'PatchMatch passes run', ['variant'], registry=registry)
forward_seconds = Histogram('scram_forward_seconds', 'Forward pass wall time in seconds', ['method'], registry=registry)
degenerate_rows = Counter('scram_degenerate_rows_total', 'Queries with no unmasked keys', registry=registry)
infeasible_policy = Counter('scram_infeasible_policy_total', 'PatchMatch runs rejected by an infeasible policy', registry=registry)


def get_metrics_text() -> bytes:
    return generate_latest(registry)


def metrics_content_type() -> str:
    return CONTENT_TYPE_LATEST
