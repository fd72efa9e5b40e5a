import math
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from scram_core.attention import (
    attention_row,
    compatibility,
    delta_kernel,
    exp_compatibility_kernel,
    full_attention,
    gaussian_kernel,
    nonlocal_mean,
    softmax_row,
    top_k_exact,
    top_k_mode_exact,
    uniform_kernel,
)
from scram_core.errors import (
    DegenerateNormalizerError,
    DegenerateRowError,
    DimensionError,
    InfeasibleSeparationError,
    OracleGuardError,
)
from scram_core.fields import FieldImage, PixelIndex


def random_field(h, w, d, seed, low=-1.0, high=1.0):
    return FieldImage(np.random.default_rng(seed).uniform(low, high, size=(h, w, d)))


def dense_reference(Q, K, V, causal=False):
    q = Q.flat().astype(np.float64)
    k = K.flat().astype(np.float64)
    v = V.flat().astype(np.float64)
    s = q @ k.T / math.sqrt(Q.depth)
    if causal:
        s[np.triu_indices(s.shape[0], 0, s.shape[1])] = -np.inf
    return s, v


def test_compatibility_known_values():
    assert compatibility([1, 0, 0, 0], [1, 0, 0, 0]) == pytest.approx(0.5)
    assert compatibility([1, 1], [1, -1]) == 0.0
    assert compatibility([3.0], [2.0], d_k=1) == 6.0


def test_compatibility_dimension_mismatch():
    with pytest.raises(DimensionError):
        compatibility([1, 2, 3], [1, 2])
    with pytest.raises(DimensionError):
        compatibility([1, 2], [1, 2], d_k=3)


def test_softmax_known_values():
    np.testing.assert_allclose(softmax_row([0, 0]), [0.5, 0.5])
    p = softmax_row([1000, 0])
    assert p[0] == pytest.approx(1.0)
    assert p[1] < 1e-300
    np.testing.assert_allclose(softmax_row([-np.inf, 0.0]), [0.0, 1.0])


def test_softmax_errors():
    with pytest.raises(DimensionError):
        softmax_row([])
    with pytest.raises(DimensionError):
        softmax_row([np.nan, 0.0])
    with pytest.raises(DegenerateRowError):
        softmax_row([-np.inf, -np.inf])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=40))
def test_softmax_is_a_distribution(scores):
    p = softmax_row(scores)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert p[int(np.argmax(scores))] == p.max()


def test_single_key_returns_its_value():
    Q = random_field(3, 3, 2, 0)
    K = random_field(1, 1, 2, 1)
    V = FieldImage(np.array([[[4.0, -2.0, 0.5]]]))
    out = full_attention(Q, K, V)
    np.testing.assert_allclose(out.flat(), np.tile([4.0, -2.0, 0.5], (9, 1)), atol=1e-6)


def test_constant_values_are_reproduced():
    Q = random_field(4, 4, 3, 2)
    K = random_field(4, 4, 3, 3)
    V = FieldImage(np.full((4, 4, 2), 1.5))
    np.testing.assert_allclose(full_attention(Q, K, V).values, 1.5, atol=1e-6)


def test_zero_queries_give_the_value_mean():
    Q = FieldImage.zeros(3, 3, 2)
    K = random_field(3, 3, 2, 4)
    V = random_field(3, 3, 4, 5)
    expected = V.flat().astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(full_attention(Q, K, V).flat(), np.tile(expected, (9, 1)), atol=1e-6)


def test_full_attention_matches_dense_reference():
    Q, K, V = random_field(5, 6, 3, 6), random_field(5, 6, 3, 7), random_field(5, 6, 2, 8)
    s, v = dense_reference(Q, K, V)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    out = full_attention(Q, K, V, return_weights=True)
    np.testing.assert_allclose(out.flat(), p @ v, atol=1e-10)
    np.testing.assert_allclose(out.weights.sum(axis=1), 1.0, atol=1e-12)


def test_full_attention_with_small_blocks_is_unchanged(monkeypatch):
    from config import Config
    Q, K, V = random_field(6, 6, 3, 9), random_field(6, 6, 3, 10), random_field(6, 6, 3, 11)
    reference = full_attention(Q, K, V).values
    monkeypatch.setattr(Config, 'BLOCK_ROWS', 5)
    np.testing.assert_allclose(full_attention(Q, K, V).values, reference, atol=1e-12)


def test_causal_first_query_is_degenerate():
    Q, K, V = random_field(4, 4, 2, 12), random_field(4, 4, 2, 13), random_field(4, 4, 3, 14)
    out = full_attention(Q, K, V, causal=True)
    assert out.degenerate[0]
    assert not out.degenerate[1:].any()
    np.testing.assert_array_equal(out.flat()[0], 0.0)
    np.testing.assert_allclose(out.flat()[1], V.flat()[0], atol=1e-6)


def test_causal_needs_matching_rasters():
    with pytest.raises(DimensionError):
        full_attention(random_field(2, 3, 2, 0), random_field(3, 2, 2, 1), random_field(3, 2, 1, 2), causal=True)


def test_weights_guard(monkeypatch):
    import scram_core.attention as attention
    monkeypatch.setattr(attention, 'MAX_WEIGHT_ENTRIES', 10)
    Q = random_field(2, 2, 2, 0)
    with pytest.raises(OracleGuardError):
        full_attention(Q, Q, Q, return_weights=True)


def test_depth_mismatch_is_rejected():
    with pytest.raises(DimensionError):
        full_attention(random_field(2, 2, 3, 0), random_field(2, 2, 2, 1), random_field(2, 2, 2, 2))


def test_attention_row_matches_weights():
    Q, K, V = random_field(4, 5, 3, 15), random_field(4, 5, 3, 16), random_field(4, 5, 1, 17)
    weights = full_attention(Q, K, V, return_weights=True).weights
    row = attention_row(Q, K, PixelIndex(2, 3))
    assert row.shape == (4, 5)
    np.testing.assert_allclose(row.ravel(), weights[2 * 5 + 3], atol=1e-12)


def test_nonlocal_mean_with_exp_kernel_is_attention():
    Q, K, V = random_field(4, 4, 3, 18), random_field(4, 4, 3, 19), random_field(4, 4, 2, 20)
    np.testing.assert_allclose(
        nonlocal_mean(Q, K, V, exp_compatibility_kernel).values,
        full_attention(Q, K, V).values,
        atol=1e-9,
    )


def test_nonlocal_mean_uniform_and_delta_kernels():
    Q, K, V = random_field(3, 3, 2, 21), random_field(3, 3, 2, 22), random_field(3, 3, 2, 23)
    mean = V.flat().astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(nonlocal_mean(Q, K, V, uniform_kernel).flat(), np.tile(mean, (9, 1)), atol=1e-6)
    picked = nonlocal_mean(Q, K, V, delta_kernel(4)).flat()
    np.testing.assert_allclose(picked, np.tile(V.flat()[4], (9, 1)), atol=1e-6)


def test_nonlocal_mean_gaussian_kernel_is_a_weighted_average():
    Q, K, V = random_field(3, 3, 2, 24), random_field(3, 3, 2, 25), random_field(3, 3, 1, 26)
    out = nonlocal_mean(Q, K, V, gaussian_kernel(0.8)).flat()
    assert np.all(out <= V.flat().max() + 1e-9)
    assert np.all(out >= V.flat().min() - 1e-9)


def test_nonlocal_mean_zero_normalizer():
    def zero_kernel(queries, keys):
        return np.zeros((queries.shape[0], keys.shape[0]))

    Q = random_field(2, 2, 2, 0)
    with pytest.raises(DegenerateNormalizerError):
        nonlocal_mean(Q, Q, Q, zero_kernel)


def test_top_k_exact_known_values():
    K = FieldImage(np.array([[[1.0], [3.0], [2.0]]]))
    Q = FieldImage(np.array([[[1.0]]]))
    np.testing.assert_array_equal(top_k_exact(Q, K, 2), [[1, 2]])
    np.testing.assert_array_equal(top_k_exact(Q, K, 3), [[1, 2, 0]])


def test_top_k_exact_breaks_ties_by_index():
    K = FieldImage(np.ones((2, 2, 1)))
    Q = FieldImage(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(top_k_exact(Q, K, 3), [[0, 1, 2]])


def test_top_k_exact_kappa_bounds():
    Q = random_field(2, 2, 2, 0)
    with pytest.raises(DimensionError):
        top_k_exact(Q, Q, 0)
    with pytest.raises(DimensionError):
        top_k_exact(Q, Q, 5)


def test_top_k_mode_exact_separates_picks():
    K = FieldImage(np.arange(25, dtype=np.float64).reshape(5, 5, 1))
    Q = FieldImage(np.ones((1, 1, 1)))
    picks = top_k_mode_exact(Q, K, 2, separation=2)[0]
    first, second = (PixelIndex.from_flat(j, 5) for j in picks)
    assert first == PixelIndex(4, 4)
    assert first.chebyshev(second) > 2
    assert second == PixelIndex(4, 1)


def test_top_k_mode_exact_infeasible():
    Q = FieldImage(np.ones((1, 1, 1)))
    K = random_field(3, 3, 1, 0)
    with pytest.raises(InfeasibleSeparationError):
        top_k_mode_exact(Q, K, 2, separation=3)


def test_key_permutation_leaves_output_unchanged():
    Q, K, V = random_field(5, 6, 3, 12), random_field(5, 6, 3, 13), random_field(5, 6, 2, 14)
    perm = np.random.default_rng(15).permutation(30)
    K2 = FieldImage(K.flat()[perm].reshape(5, 6, 3))
    V2 = FieldImage(V.flat()[perm].reshape(5, 6, 2))
    np.testing.assert_allclose(full_attention(Q, K2, V2).values, full_attention(Q, K, V).values, atol=1e-9)


def test_row_offsets_leave_output_unchanged():
    # an extra key channel of ones turns the matching query channel into a per-row score offset
    Q, K, V = random_field(4, 4, 2, 16), random_field(4, 4, 2, 17), random_field(4, 4, 2, 18)
    ones = np.ones((4, 4, 1))
    offsets = np.random.default_rng(19).uniform(-5, 5, size=(4, 4, 1))
    K1 = FieldImage(np.concatenate([K.data, ones], axis=2))
    shifted = full_attention(FieldImage(np.concatenate([Q.data, offsets], axis=2)), K1, V).values
    plain = full_attention(FieldImage(np.concatenate([Q.data, 0 * ones], axis=2)), K1, V).values
    np.testing.assert_allclose(shifted, plain, atol=1e-6)
    scores = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax_row(scores + 7.5), softmax_row(scores), atol=1e-12)


def test_top_k_exact_matches_full_sort():
    Q, K = random_field(8, 8, 3, 3), random_field(8, 8, 3, 4)
    s, _ = dense_reference(Q, K, K)
    expected = np.argsort(-s, axis=1, kind='stable')[:, :4]
    np.testing.assert_array_equal(top_k_exact(Q, K, 4), expected)


def test_top_k_exact_ties_at_the_cut():
    K = FieldImage(np.array([[[1.0], [2.0], [2.0], [2.0], [0.0], [2.0]]]))
    Q = FieldImage(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(top_k_exact(Q, K, 2), [[1, 2]])
    np.testing.assert_array_equal(top_k_exact(Q, K, 5), [[1, 2, 3, 5, 0]])


def test_top_k_mode_exact_matches_exhaustive_greedy():
    Q, K = random_field(8, 8, 3, 3), random_field(8, 8, 3, 5)
    s, _ = dense_reference(Q, K, K)
    found = top_k_mode_exact(Q, K, 3, 2)
    for i in range(Q.n):
        picked = []
        for j in np.argsort(-s[i], kind='stable'):
            pos = PixelIndex.from_flat(j, 8)
            if all(pos.chebyshev(PixelIndex.from_flat(p, 8)) > 2 for p in picked):
                picked.append(int(j))
            if len(picked) == 3:
                break
        assert list(found[i]) == picked
