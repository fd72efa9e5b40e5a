import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from scram_core.fields import FieldImage
from scram_core.patchmatch import PatchMatchConfig, max_non_duplicate, top_kappa
from scram_core.scram import ScramConfig, scram_forward
from services.metrics_service import get_metrics_text, metrics_content_type, registry


def test_patchmatch_passes_are_counted():
    before = registry.get_sample_value('scram_patchmatch_passes_total', {'variant': 'max'}) or 0.0
    Q = FieldImage(np.random.default_rng(0).normal(size=(4, 4, 2)))
    top_kappa(Q, Q, 2, max_non_duplicate(), PatchMatchConfig(iterations=1))
    after = registry.get_sample_value('scram_patchmatch_passes_total', {'variant': 'max'})
    assert after == before + 2


def test_forward_and_degenerate_metrics_exported():
    Q = FieldImage(np.random.default_rng(1).normal(size=(3, 3, 2)))
    scram_forward(Q, Q, Q, ScramConfig(kappa=1, b=1, causal=True))
    text = get_metrics_text().decode()
    assert 'scram_forward_seconds_count{method="scram"}' in text
    assert registry.get_sample_value('scram_degenerate_rows_total') >= 1
    assert 'scram_infeasible_policy_total' in text


def test_content_type():
    assert metrics_content_type().startswith('text/plain')
