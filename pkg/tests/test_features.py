import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, rel_err
from stabdyn.errors import ParameterError
from stabdyn.features import (
    eval_feature_derivative,
    eval_features,
    eval_scalar_feature_derivative,
    eval_scalar_features,
    make_input_features,
    make_matrix_features,
    make_scalar_features,
)

states = arrays(np.float64, 6, elements=st.floats(-20, 20))


def test_default_pvtol_feature_dimension():
    fmap = make_matrix_features(6, 48, 6.0, 0)
    assert eval_features(fmap, np.zeros(6)).shape == (576, 6)


def test_zero_state_layout():
    fmap = make_matrix_features(3, 5, 2.0, 0)
    Phi = eval_features(fmap, np.zeros(3))
    z = Phi[:, 0].reshape(-1, 3)[:, 0]  # scalar factor, one entry per (cos, sin) slot
    expect = np.tile([1.0, 0.0], 5) / np.sqrt(5)
    np.testing.assert_array_equal(z, expect)
    # Kronecker layout: row k*n + i carries z_k in column i only
    np.testing.assert_array_equal(Phi, np.kron(expect[:, None], np.eye(3)))


@settings(max_examples=100, deadline=None)
@given(states)
def test_gram_is_identity(x):
    fmap = make_matrix_features(6, 48, 6.0, 0)
    Phi = eval_features(fmap, x)
    np.testing.assert_allclose(Phi.T @ Phi, np.eye(6), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(states, states)
def test_cross_gram_is_scaled_identity(x, z):
    fmap = make_matrix_features(6, 16, 3.0, 4)
    K = eval_features(fmap, x).T @ eval_features(fmap, z)
    k = K[0, 0]
    np.testing.assert_allclose(K, k * np.eye(6), atol=1e-14)
    assert abs(k) <= 1 + 1e-12


def test_monte_carlo_kernel_limit():
    # independent closed form: exp(-|x - z|^2 / sigma^2) = e^-1
    fmap = make_matrix_features(2, 4096, 1.0, 0)
    k = (eval_features(fmap, np.zeros(2)).T @ eval_features(fmap, np.array([1.0, 0.0])))[0, 0]
    assert abs(k - np.exp(-1.0)) < 0.05


def test_seed_determinism():
    a = make_matrix_features(6, 48, 6.0, 3)
    b = make_matrix_features(6, 48, 6.0, 3)
    c = make_matrix_features(6, 48, 6.0, 4)
    x = np.linspace(-1, 1, 6)
    assert np.array_equal(eval_features(a, x), eval_features(b, x))
    assert not np.array_equal(a.omegas, c.omegas)


def test_matrix_derivative_finite_difference(rng):
    fmap = make_matrix_features(6, 48, 6.0, 0)
    for _ in range(20):
        x = rng.uniform(-5, 5, 6)
        j = int(rng.integers(6))
        e = np.zeros(6)
        e[j] = 1e-5
        fd = (eval_features(fmap, x + e) - eval_features(fmap, x - e)) / 2e-5
        assert rel_err(eval_feature_derivative(fmap, x, j), fd) < 1e-6


def test_zero_frequencies_give_zero_derivative():
    fmap = make_matrix_features(3, 4, 1.0, 0)
    flat = type(fmap)(fmap.n, fmap.s, fmap.sigma, fmap.seed, np.zeros_like(fmap.omegas))
    assert not np.any(eval_feature_derivative(flat, np.ones(3), 1))


def test_scalar_features_unit_norm(rng):
    fmap = make_scalar_features(6, 36, 15.0, 1)
    X = rng.uniform(-12, 12, (100, 6))
    np.testing.assert_allclose(np.sum(eval_scalar_features(fmap, X) ** 2, axis=1), 1.0, atol=1e-12)


def test_scalar_derivative_finite_difference(rng):
    for fmap in (make_scalar_features(6, 36, 15.0, 1), make_scalar_features(6, 36, 15.0, 2, active_dims=range(4))):
        for _ in range(20):
            x = rng.uniform(-5, 5, 6)
            J = central_difference(lambda y: eval_scalar_features(fmap, y), x)
            j = int(rng.integers(6))
            an = eval_scalar_feature_derivative(fmap, x, j)
            if np.linalg.norm(J[:, j]) == 0:
                assert not np.any(an)
            else:
                assert rel_err(an, J[:, j]) < 1e-6


@settings(max_examples=100, deadline=None)
@given(states, arrays(np.float64, 2, elements=st.floats(-50, 50)))
def test_restricted_map_ignores_input_coordinates(x, tail):
    hat = make_scalar_features(6, 36, 15.0, 2, active_dims=range(4))
    y = x.copy()
    y[4:] = tail
    assert np.array_equal(eval_scalar_features(hat, x), eval_scalar_features(hat, y))
    for j in (4, 5):
        assert not np.any(eval_scalar_feature_derivative(hat, x, j))


def test_input_map_column_sparsity():
    b = make_input_features(6, 2)
    assert b.matrix.shape == (2, 6)
    assert not np.any(b.matrix[:, :4])
    np.testing.assert_array_equal(b.matrix[:, 4:].T @ b.matrix[:, 4:], np.eye(2))


@pytest.mark.parametrize(
    "call",
    [
        lambda: make_matrix_features(0, 4, 1.0, 0),
        lambda: make_matrix_features(3, 0, 1.0, 0),
        lambda: make_matrix_features(3, 4, 0.0, 0),
        lambda: make_scalar_features(3, 4, -1.0, 0),
        lambda: make_scalar_features(3, 4, 1.0, 0, active_dims=[3]),
        lambda: make_input_features(3, 3),
        lambda: eval_features(make_matrix_features(3, 4, 1.0, 0), np.zeros(4)),
        lambda: eval_feature_derivative(make_matrix_features(3, 4, 1.0, 0), np.zeros(3), 3),
        lambda: eval_scalar_feature_derivative(make_scalar_features(3, 4, 1.0, 0), np.zeros(3), -1),
    ],
)
def test_invalid_arguments(call):
    with pytest.raises(ParameterError):
        call()
