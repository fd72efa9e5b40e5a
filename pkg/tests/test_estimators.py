import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from scram_core.attention import attention_row, full_attention
from scram_core.errors import ConfigError, DimensionError
from scram_core.estimators import (
    MhConfig,
    ModeSet,
    SnisConfig,
    importance_pmf,
    importance_table,
    log_unnormalized_target,
    mh_estimate,
    mh_proposal_matrix,
    mh_transition_matrix,
    modes_from_fields,
    rbf_axis_pmf,
    scram_mh_forward,
    scram_snis_forward,
    snis_estimate,
    unnormalized_target,
)
from scram_core.fields import FieldImage, PixelIndex
from scram_core.patchmatch import PatchMatchConfig, mode_separated, top_kappa
from scram_core.scram import ScramConfig


def random_field(h, w, d, seed, spread=1.0):
    return FieldImage(np.random.default_rng(seed).uniform(-spread, spread, size=(h, w, d)))


def test_target_known_values():
    assert log_unnormalized_target([0, 0], [5, 5]) == 0.0
    assert unnormalized_target([0, 0], [5, 5]) == 1.0
    assert unnormalized_target([2.0], [1.0]) == pytest.approx(math.e ** 2)


def test_importance_pmf_is_uniform_without_modes_weight():
    modes = [PixelIndex(1, 1)]
    for j in (PixelIndex(0, 0), PixelIndex(3, 2)):
        assert importance_pmf(j, modes, 0.0, 2.0, (4, 4)) == pytest.approx(1 / 16)


def test_importance_table_sums_to_one():
    table = importance_table(np.array([[0, 0], [5, 6]]), 0.9, 1.5, (7, 8))
    assert table.sum() == pytest.approx(1.0)
    assert np.all(table > 0)
    assert np.unravel_index(np.argmax(table), table.shape) in ((0, 0), (5, 6))


def test_importance_table_rejects_missing_modes():
    with pytest.raises(ConfigError):
        importance_table(np.zeros((0, 2)), 0.5, 2.0, (3, 3))


def test_rbf_axis_pmf_peaks_at_centre():
    pmf = rbf_axis_pmf(np.array([3]), 8, 1.0)
    assert pmf.shape == (1, 8)
    assert np.argmax(pmf[0]) == 3
    assert pmf.sum() == pytest.approx(1.0)


def test_snis_config_validation():
    with pytest.raises(ConfigError):
        SnisConfig(samples=0)
    with pytest.raises(ConfigError):
        SnisConfig(alpha=1.5)
    assert SnisConfig.for_budget(2, 1).samples == 18


def test_mh_config_validation():
    with pytest.raises(ConfigError):
        MhConfig(chains=0)
    with pytest.raises(ConfigError):
        MhConfig(burn_in=5)


def test_snis_single_sample_returns_a_value():
    Q, K, V = random_field(3, 3, 2, 0), random_field(3, 3, 2, 1), random_field(3, 3, 2, 2)
    modes = ModeSet.broadcast([PixelIndex(1, 1)], Q.n, K.shape)
    out = snis_estimate(Q, K, V, modes, SnisConfig(samples=1, seed=3))
    values = V.flat().astype(np.float64)
    for row in out.flat():
        assert any(np.array_equal(row, v) for v in values)
    np.testing.assert_array_equal(out.ess, 1.0)
    np.testing.assert_array_equal(out.variance, 0.0)


def test_snis_constant_values_are_exact():
    Q, K = random_field(4, 4, 3, 3), random_field(4, 4, 3, 4)
    V = FieldImage(np.full((4, 4, 2), -0.75))
    modes = ModeSet.broadcast([PixelIndex(0, 0), PixelIndex(3, 3)], Q.n, K.shape)
    out = snis_estimate(Q, K, V, modes, SnisConfig(samples=50, seed=1))
    np.testing.assert_array_equal(out.values, -0.75)
    np.testing.assert_array_equal(out.variance, 0.0)


def test_snis_uniform_importance_is_consistent():
    Q, K, V = random_field(8, 8, 3, 5), random_field(8, 8, 3, 6), random_field(8, 8, 3, 7)
    exact = full_attention(Q, K, V).flat()
    samples = int(10 * 64 * math.log(64))
    modes = ModeSet.broadcast([], Q.n, K.shape)
    inside, total = 0, 0
    for seed in range(32):
        out = snis_estimate(Q, K, V, modes, SnisConfig(samples=samples, alpha=0.0, seed=seed))
        assert np.all(out.ess >= 1.0) and np.all(out.ess <= samples)
        se = np.sqrt(out.variance.reshape(Q.n, -1))
        inside += int(np.sum(np.abs(out.flat() - exact) <= 3 * se))
        total += exact.size
    assert inside / total >= 0.95


def test_snis_rejects_mismatched_modes():
    Q = random_field(2, 2, 2, 0)
    with pytest.raises(DimensionError):
        snis_estimate(Q, Q, Q, ModeSet.broadcast([PixelIndex(0, 0)], 3, Q.shape), SnisConfig())


def test_proposal_matrix_is_symmetric_and_stochastic():
    prop = mh_proposal_matrix(4, 5, 1.5)
    np.testing.assert_allclose(prop.sum(axis=1), 1.0, atol=1e-12)
    off = prop - np.diag(np.diag(prop))
    np.testing.assert_array_equal(off, off.T)


def test_transition_kernel_leaves_attention_stationary():
    K = random_field(4, 4, 3, 8, spread=2.0)
    q = np.array([0.5, -1.0, 0.8])
    log_p = (K.flat().astype(np.float64) @ q) / math.sqrt(3)
    p = np.exp(log_p - log_p.max())
    p /= p.sum()
    kernel = mh_transition_matrix(q, K, 2.0)
    assert np.all(kernel >= 0)
    np.testing.assert_allclose(kernel.sum(axis=1), 1.0, atol=1e-12)
    assert np.abs(p @ kernel - p).sum() <= 1e-9


def test_mh_visits_match_attention_distribution():
    Q = FieldImage(np.array([[[0.9, -0.4, 1.1]]]))
    K = random_field(8, 8, 3, 9, spread=2.0)
    V = random_field(8, 8, 2, 10)
    exact = attention_row(Q, K, PixelIndex(0, 0)).ravel()
    corners = [PixelIndex(0, 0), PixelIndex(0, 7), PixelIndex(7, 0), PixelIndex(7, 7)]
    modes = ModeSet.broadcast(corners, 1, K.shape)
    out = mh_estimate(Q, K, V, modes, MhConfig(chains=4, steps=2000, seed=2), record_visits=True)
    visits = out.extras['visits'][0]
    assert visits.sum() == 4 * 2001
    empirical = visits / visits.sum()
    assert 0.5 * np.abs(empirical - exact).sum() <= 0.1
    assert out.acceptance_rate.shape == (1, 4)
    assert np.all(out.acceptance_rate > 0.05)


def test_mh_constant_values_are_exact():
    Q, K = random_field(3, 3, 2, 11), random_field(3, 3, 2, 12)
    V = FieldImage(np.full((3, 3, 1), 2.0))
    modes = ModeSet.broadcast([PixelIndex(1, 1)], Q.n, K.shape)
    out = mh_estimate(Q, K, V, modes, MhConfig(steps=20, seed=0))
    np.testing.assert_allclose(out.values, 2.0, atol=1e-12)


def test_mh_needs_matched_modes():
    Q = random_field(2, 2, 2, 0)
    modes = ModeSet(np.full((4, 1, 2), -1, dtype=np.int64), Q.shape)
    with pytest.raises(DimensionError):
        mh_estimate(Q, Q, Q, modes, MhConfig())


def test_modes_from_fields_stacks_passes():
    Q, K = random_field(6, 6, 2, 13), random_field(6, 6, 2, 14)
    fields = top_kappa(Q, K, 2, mode_separated(1), PatchMatchConfig(seed=1))
    modes = modes_from_fields(fields)
    assert modes.centers.shape == (36, 2, 2)
    np.testing.assert_array_equal(modes.centers[:, 0], fields[0].entries.reshape(-1, 2))


def test_pipelines_are_deterministic_and_finite():
    Q, K, V = random_field(6, 6, 3, 15), random_field(6, 6, 3, 16), random_field(6, 6, 2, 17)
    config = ScramConfig(kappa=2, b=1, policy=mode_separated(1), patchmatch=PatchMatchConfig(seed=3))
    a = scram_snis_forward(Q, K, V, config)
    b = scram_snis_forward(Q, K, V, config)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.all(np.isfinite(a.values))
    mh = scram_mh_forward(Q, K, V, config)
    assert np.all(np.isfinite(mh.values))
    assert mh.acceptance_rate.shape == (36, 2)


def test_causal_pipelines_ignore_the_future():
    Q, K, V = random_field(6, 6, 3, 18), random_field(6, 6, 3, 19), random_field(6, 6, 2, 20)
    config = ScramConfig(kappa=2, b=1, patchmatch=PatchMatchConfig(seed=6), causal=True)
    k = K.data.reshape(-1, 3).copy()
    v = V.data.reshape(-1, 2).copy()
    k[20:] = 0.5
    v[20:] = -3.0
    K2, V2 = FieldImage(k.reshape(6, 6, 3)), FieldImage(v.reshape(6, 6, 2))
    for forward in (scram_snis_forward, scram_mh_forward):
        base = forward(Q, K, V, config)
        changed = forward(Q, K2, V2, config)
        assert base.degenerate[0]
        np.testing.assert_array_equal(base.flat()[0], 0.0)
        assert changed.flat()[:20].tobytes() == base.flat()[:20].tobytes()


def test_causal_snis_samples_only_past_keys():
    Q, K = random_field(3, 3, 2, 21), random_field(3, 3, 2, 22)
    V = FieldImage(np.arange(9, dtype=np.float64).reshape(3, 3, 1))
    modes = ModeSet.broadcast([PixelIndex(0, 0)], Q.n, K.shape)
    out = snis_estimate(Q, K, V, modes, SnisConfig(samples=40, seed=2), causal=True)
    assert out.degenerate[0] and not out.degenerate[1:].any()
    for i in range(1, 9):
        assert -1e-9 <= out.flat()[i, 0] <= i - 1 + 1e-9
    np.testing.assert_array_equal(out.flat()[1], 0.0)


def test_causal_mh_stays_before_the_query():
    Q, K = random_field(3, 3, 2, 23), random_field(3, 3, 2, 24)
    V = random_field(3, 3, 1, 25)
    modes = ModeSet.broadcast([PixelIndex(0, 0)], Q.n, K.shape)
    out = mh_estimate(Q, K, V, modes, MhConfig(chains=2, steps=50, seed=1), record_visits=True, causal=True)
    visits = out.extras['visits']
    for i in range(9):
        assert visits[i, i:].sum() == 0
    assert out.degenerate[0]


def test_query_estimates_do_not_depend_on_the_batch():
    K, V = random_field(6, 6, 3, 26), random_field(6, 6, 2, 27)
    batch = random_field(1, 4, 3, 28)
    pair = FieldImage(batch.data[:, :2])
    centres = [PixelIndex(1, 1), PixelIndex(4, 4)]
    mh = MhConfig(chains=2, steps=30, seed=5)
    alone = mh_estimate(pair, K, V, ModeSet.broadcast(centres, 2, K.shape), mh)
    together = mh_estimate(batch, K, V, ModeSet.broadcast(centres, 4, K.shape), mh)
    assert alone.flat().tobytes() == together.flat()[:2].tobytes()
    snis = SnisConfig(samples=25, seed=5)
    alone = snis_estimate(pair, K, V, ModeSet.broadcast(centres, 2, K.shape), snis)
    together = snis_estimate(batch, K, V, ModeSet.broadcast(centres, 4, K.shape), snis)
    assert alone.flat().tobytes() == together.flat()[:2].tobytes()


def test_importance_pmf_collapses_to_the_mode():
    mode = PixelIndex(2, 3)
    assert importance_pmf(mode, [mode], 1.0, 1e-3, (5, 6)) == pytest.approx(1.0)
    assert importance_pmf(PixelIndex(2, 4), [mode], 1.0, 1e-3, (5, 6)) < 1e-12


def test_mh_constant_keys_accept_everything():
    Q = random_field(3, 3, 2, 29)
    K = FieldImage(np.full((5, 5, 2), 0.4))
    V = random_field(5, 5, 1, 30)
    modes = ModeSet.broadcast([PixelIndex(0, 0), PixelIndex(4, 4)], Q.n, K.shape)
    out = mh_estimate(Q, K, V, modes, MhConfig(steps=40, seed=3))
    np.testing.assert_array_equal(out.acceptance_rate, 1.0)


def test_mh_single_step_averages_the_visited_states():
    Q, K, V = random_field(2, 2, 2, 31), random_field(6, 6, 2, 32), random_field(6, 6, 3, 33)
    modes = ModeSet.broadcast([PixelIndex(1, 1), PixelIndex(4, 4)], Q.n, K.shape)
    out = mh_estimate(Q, K, V, modes, MhConfig(chains=2, steps=1, seed=4), record_visits=True)
    visits = out.extras['visits']
    np.testing.assert_array_equal(visits.sum(axis=1), 4)
    assert np.all(np.count_nonzero(visits, axis=1) <= 4)
    expected = visits @ V.flat().astype(np.float64) / 4
    np.testing.assert_allclose(out.flat(), expected, atol=1e-12)


def test_snis_error_shrinks_as_samples_double():
    Q, K, V = random_field(8, 8, 3, 34), random_field(8, 8, 3, 35), random_field(8, 8, 2, 36)
    exact = full_attention(Q, K, V).flat()
    modes = ModeSet.broadcast([], Q.n, K.shape)
    errors = []
    for samples in (16, 32, 64, 128):
        per_seed = []
        for seed in range(8):
            out = snis_estimate(Q, K, V, modes, SnisConfig(samples=samples, alpha=0.0, seed=seed))
            per_seed.append(np.median(np.linalg.norm(out.flat() - exact, axis=1)))
        errors.append(np.mean(per_seed))
    assert all(a > b for a, b in zip(errors, errors[1:]))
