import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_model
from eftwrbm import enhanced as ei
from eftwrbm.model import FactorModel, ShapeError, hidden_conditional, input_mean
from eftwrbm.training import context_step


def sort_oracle(lambdas, n_t):
    """Indices of the n_t smallest values, ties to the lowest index, in column order."""
    ranked = sorted(range(len(lambdas)), key=lambda i: (lambdas[i], i))
    return sorted(ranked[:n_t])


# -- shrink_select -------------------------------------------------------------------

def test_shrink_select_examples():
    pooled = np.array([[10.0, 20.0, 30.0]])
    np.testing.assert_array_equal(ei.shrink_select(pooled, np.array([3.0, 1.0, 2.0]), 2), [[20.0, 30.0]])
    np.testing.assert_array_equal(ei.shrink_select(pooled, np.ones(3), 2), [[10.0, 20.0]])


def test_shrink_select_matches_sort_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_cols = int(rng.integers(1, 12))
        n_t = int(rng.integers(1, n_cols + 1))
        # few distinct values so ties, also at the cut, are frequent
        lambdas = rng.integers(0, 4, n_cols).astype(float)
        pooled = rng.standard_normal((3, n_cols))
        out = ei.shrink_select(pooled, lambdas, n_t)
        np.testing.assert_array_equal(out, pooled[:, sort_oracle(lambdas, n_t)])


@given(hnp.arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 100)), st.data())
def test_shrink_select_properties(lambdas, data):
    n_t = data.draw(st.integers(1, lambdas.size))
    pooled = np.arange(2 * lambdas.size, dtype=float).reshape(2, -1)
    out = ei.shrink_select(pooled, lambdas, n_t)
    assert out.shape == (2, n_t)
    kept = [int(c) for c in out[0] // 1]  # column index is recoverable from row 0
    assert kept == sorted(kept)
    assert sorted(lambdas[kept]) == sorted(lambdas)[:n_t]


def test_shrink_select_errors():
    with pytest.raises(ValueError):
        ei.shrink_select(np.zeros((2, 3)), np.zeros(3), 4)
    with pytest.raises(ShapeError):
        ei.shrink_select(np.zeros((2, 3)), np.zeros(2), 1)


# -- alpha -----------------------------------------------------------------------------

def alpha_oracle(model, pooled, y, h):
    n_bins, n_cols = pooled.shape
    mu = input_mean(model, y, h)
    out = np.empty_like(pooled)
    for c in range(n_cols):
        for b in range(n_bins):
            i = c * n_bins + b
            r = pooled[b, c] - mu[i]
            out[b, c] = math.exp(-r * r / (2 * model.sigma_x[i] ** 2))
    return out


def spectro_model(rng, n_bins=4, n_t=2, scale=0.5):
    model = random_model(rng, n_bins * (n_t + 1), n_bins, 3, 3, scale=scale)
    model.n_t = n_t
    return model


def test_alpha_is_one_for_perfect_reconstruction():
    rng = np.random.default_rng(0)
    model = spectro_model(rng)
    y, h = rng.standard_normal(4), rng.random(3)
    pooled = ei.unflatten_pooled(input_mean(model, y, h), 4)
    np.testing.assert_array_equal(ei.compute_alpha(model, pooled, y, h), np.ones((4, 3)))


def test_alpha_one_sigma_residual():
    model = FactorModel.initialize(2, 2, 1, 1, init_std=0.0)
    alpha = ei.compute_alpha(model, np.array([[1.0], [0.0]]), np.zeros(2), np.zeros(1))
    assert alpha[0, 0] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert alpha[0, 0] == pytest.approx(0.606531, abs=1e-6)
    assert alpha[1, 0] == 1.0


@given(st.integers(0, 2 ** 32 - 1))
def test_alpha_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    model = spectro_model(rng)
    pooled, y, h = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.random(3)
    np.testing.assert_allclose(ei.compute_alpha(model, pooled, y, h),
                               alpha_oracle(model, pooled, y, h), rtol=1e-13)


def test_alpha_range_and_unit_iff_zero_residual():
    rng = np.random.default_rng(1)
    for _ in range(300):
        model = spectro_model(rng)
        y, h = rng.standard_normal(4), rng.random(3)
        mu = ei.unflatten_pooled(input_mean(model, y, h), 4)
        pooled = rng.standard_normal((4, 3)) * rng.choice([1e-9, 1.0, 50.0])
        exact = rng.random((4, 3)) < 0.3
        pooled[exact] = mu[exact]
        alpha = ei.compute_alpha(model, pooled, y, h)
        assert np.all(alpha > 0) and np.all(alpha <= 1)
        np.testing.assert_array_equal(alpha == 1.0, (pooled - mu) == 0.0)


def test_alpha_shape_mismatch():
    model = spectro_model(np.random.default_rng(2))
    with pytest.raises(ShapeError):
        ei.compute_alpha(model, np.zeros((4, 2)), np.zeros(4), np.zeros(3))


# -- distances ---------------------------------------------------------------------------

def test_column_distance_examples():
    y = np.zeros(4)
    d = ei.column_distances(np.column_stack([y, np.ones(4)]), y)
    np.testing.assert_array_equal(d, [0.0, 2.0])


def test_column_distance_oracle():
    rng = np.random.default_rng(3)
    cols, y = rng.standard_normal((5, 4)), rng.standard_normal(5)
    expected = [math.sqrt(sum((cols[b, c] - y[b]) ** 2 for b in range(5))) for c in range(4)]
    np.testing.assert_allclose(ei.column_distances(cols, y), expected, rtol=1e-14)


# -- state recursion ---------------------------------------------------------------------

def test_flatten_round_trip_column_major():
    pooled = np.arange(6.0).reshape(2, 3)
    flat = ei.flatten_pooled(pooled)
    np.testing.assert_array_equal(flat, [0, 3, 1, 4, 2, 5])
    np.testing.assert_array_equal(ei.unflatten_pooled(flat, 2), pooled)
    with pytest.raises(ShapeError):
        ei.unflatten_pooled(np.zeros(5), 2)


def test_state_reset_and_build():
    state = ei.EnhancedInputState(3, 2)
    assert not state.initialized
    with pytest.raises(RuntimeError):
        ei.build_pooled(state)
    state.reset(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(ei.build_pooled(state), np.repeat([[1.0], [2.0], [3.0]], 3, axis=1))
    with pytest.raises(ShapeError):
        state.reset(np.zeros(4))


def test_two_identity_advances_slide_the_window():
    """Hand-traced: frames a, b, c on a 1-bin toy with n_t = 2."""
    state = ei.EnhancedInputState(1, 2)
    state.reset(np.array([1.0]))  # a
    ei.slide(state, np.array([2.0]))  # b arrives
    np.testing.assert_array_equal(ei.build_pooled(state), [[1.0, 1.0, 2.0]])
    ei.slide(state, np.array([3.0]))  # c arrives
    np.testing.assert_array_equal(ei.build_pooled(state), [[1.0, 2.0, 3.0]])


def test_advance_checks_shape():
    state = ei.EnhancedInputState(2, 2)
    state.reset(np.zeros(2))
    with pytest.raises(ShapeError):
        ei.advance(state, np.zeros((2, 3)), np.zeros(2))


def test_context_step_matches_manual_recursion():
    rng = np.random.default_rng(4)
    model = spectro_model(rng)
    frames = rng.standard_normal((4, 5))
    state = ei.EnhancedInputState(4, 2)
    state.reset(frames[:, 0])
    manual = ei.EnhancedInputState(4, 2)
    manual.reset(frames[:, 0])
    for t in range(1, 5):
        y = frames[:, t]
        got = context_step(model, state, y)
        pooled = ei.build_pooled(manual)
        h = hidden_conditional(model, ei.flatten_pooled(pooled), y)
        alpha = ei.compute_alpha(model, pooled, y, h)
        weighted = alpha * pooled
        h2 = hidden_conditional(model, ei.flatten_pooled(weighted), y)
        recon = ei.unflatten_pooled(input_mean(model, y, h2), 4)
        keep = sort_oracle(ei.column_distances(recon, y), 2)
        ei.advance(manual, pooled[:, keep], y)
        np.testing.assert_array_equal(got, ei.flatten_pooled(weighted))
        np.testing.assert_array_equal(state.x_hat, manual.x_hat)
        # retained columns are untouched copies of pooled columns
        for c in range(2):
            assert any(np.array_equal(state.x_hat[:, c], pooled[:, j]) for j in range(3))
        np.testing.assert_array_equal(state.last_frame, y)


def test_self_retention_of_column_equal_to_current_frame():
    """A pooled column whose reconstruction equals y has distance 0 and is kept."""
    model = FactorModel.for_spectrogram(n_bins=3, n_t=2, n_hidden=2, n_factors=2, init_std=0.0)
    y = np.array([0.3, -0.2, 0.1])
    model.bias_x = np.concatenate([np.full(3, 5.0), np.full(3, 7.0), y])
    state = ei.EnhancedInputState(3, 2, x_hat=np.array([[1.0, 2.0]] * 3), last_frame=np.full(3, 9.0))
    context_step(model, state, y)
    lambdas = ei.column_distances(ei.unflatten_pooled(model.bias_x, 3), y)
    assert lambdas[2] == 0.0
    # nearest reconstruction is column 0 (bias 5), then the zero-distance column 2
    np.testing.assert_array_equal(state.x_hat, [[1.0, 9.0]] * 3)


def test_plain_mode_is_a_sliding_window():
    model = FactorModel.for_spectrogram(n_bins=2, n_t=2, n_hidden=2, n_factors=2, rng=0)
    state = ei.EnhancedInputState(2, 2)
    state.reset(np.array([1.0, 1.0]))
    x = context_step(model, state, np.array([2.0, 2.0]), enhanced=False)
    np.testing.assert_array_equal(x, np.ones(6))
    np.testing.assert_array_equal(ei.build_pooled(state), [[1, 1, 2], [1, 1, 2]])
