import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from landaulab.kernel import (a_matrix, abs_pow, b_vector, check_gamma, norm, proj_perp, psd_sqrt,
                              sigma_apply, sigma_inner, sigma_matrix)

coord = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec = st.tuples(coord, coord, coord).map(np.array)
nonzero_vec = vec.filter(lambda x: norm(x) > 1e-3)
gammas = st.floats(1e-3, 1.0)


# -- closed-form examples ---------------------------------------------------

@pytest.mark.parametrize("x, expected", [
    ((1, 0, 0), np.diag([0.0, 1, 1])),
    ((0, 0, 2), np.diag([1.0, 1, 0])),
    ((1, 1, 0), np.array([[0.5, -0.5, 0], [-0.5, 0.5, 0], [0, 0, 1]])),
])
def test_proj_perp_examples(x, expected):
    np.testing.assert_allclose(proj_perp(x), expected, atol=1e-15)


def test_proj_perp_rejects_zero():
    with pytest.raises(ValueError):
        proj_perp([0.0, 0.0, 0.0])


def test_a_matrix_examples():
    np.testing.assert_array_equal(a_matrix([1.0, 0, 0], 1.0), np.diag([0.0, 1, 1]))
    np.testing.assert_array_equal(a_matrix([2.0, 0, 0], 1.0), np.diag([0.0, 8, 8]))
    for g in (0.1, 0.5, 1.0):
        np.testing.assert_array_equal(a_matrix([0.0, 0, 0], g), np.zeros((3, 3)))


def test_b_vector_examples():
    np.testing.assert_array_equal(b_vector([1.0, 0, 0], 1.0), [-2.0, 0, 0])
    np.testing.assert_allclose(b_vector([0.0, 3, 0], 0.5), [0, -6 * math.sqrt(3), 0], rtol=1e-15)
    np.testing.assert_array_equal(b_vector([0.0, 0, 0], 0.7), [0.0, 0, 0])


def test_sigma_matrix_examples():
    np.testing.assert_allclose(sigma_matrix([1.0, 0, 0], 1.0), np.diag([0.0, 1, 1]), atol=1e-15)
    S = sigma_matrix([2.0, 0, 0], 1.0)
    assert np.sum(S * S) == pytest.approx(16.0, rel=1e-14)
    np.testing.assert_array_equal(sigma_matrix([0.0, 0, 0], 0.3), np.zeros((3, 3)))


def test_sigma_inner_examples():
    assert sigma_inner([1.0, 0, 0], [1.0, 0, 0], 1.0) == pytest.approx(2.0, rel=1e-15)
    assert sigma_inner([1.0, 0, 0], [0.0, 1, 0], 1.0) == pytest.approx(1.0, rel=1e-15)
    # Frobenius product of 2^(3/2) diag(0,1,1) and diag(0,1,1)
    assert sigma_inner([2.0, 0, 0], [1.0, 0, 0], 1.0) == pytest.approx(4 * math.sqrt(2), rel=1e-14)
    assert sigma_inner([0.0, 0, 0], [1.0, 2, 3], 0.5) == 0.0


def test_psd_sqrt_examples():
    np.testing.assert_allclose(psd_sqrt(np.diag([0.0, 4, 9])), np.diag([0.0, 2, 3]), atol=1e-15)
    np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-15)
    x = np.array([1.0, 1, 0])
    np.testing.assert_allclose(psd_sqrt(a_matrix(x, 1.0)), sigma_matrix(x, 1.0), atol=1e-14)


def test_psd_sqrt_clamps_tiny_negative_eigenvalues():
    A = np.diag([-1e-12, 1.0, 4.0])
    np.testing.assert_allclose(psd_sqrt(A), np.diag([0.0, 1, 2]), atol=1e-15)


@pytest.mark.parametrize("A", [np.diag([-1e-3, 1.0, 1.0]),
                               np.array([[1.0, 0.5, 0], [0.0, 1, 0], [0, 0, 1]])])
def test_psd_sqrt_rejects_indefinite_or_asymmetric(A):
    with pytest.raises(ValueError):
        psd_sqrt(A)


@pytest.mark.parametrize("g", [0.0, -0.5, 1.5])
def test_gamma_outside_hard_potential_range_rejected(g):
    with pytest.raises(ValueError):
        check_gamma(g)


def test_abs_pow_zero_conventions():
    assert abs_pow(0.0, 0.0) == 1.0
    assert abs_pow(0.0, 0.5) == 0.0
    np.testing.assert_array_equal(abs_pow([0.0, 0.0], np.array([0.0, 2.0])), [1.0, 0.0])


# -- independent oracles ----------------------------------------------------

def test_psd_sqrt_matches_scipy_sqrtm(rng):
    for _ in range(50):
        M = rng.standard_normal((3, 3))
        A = M @ M.T
        np.testing.assert_allclose(psd_sqrt(A), scipy.linalg.sqrtm(A).real, rtol=1e-8, atol=1e-10)


def test_b_is_divergence_of_a(rng):
    # b_k = sum_l d a_kl / d x_l, by central differences
    h = 1e-6
    for g in (0.3, 1.0):
        for x in rng.standard_normal((20, 3)) * 2:
            div = np.zeros(3)
            for l in range(3):
                e = np.zeros(3)
                e[l] = h
                div += (a_matrix(x + e, g)[:, l] - a_matrix(x - e, g)[:, l]) / (2 * h)
            np.testing.assert_allclose(div, b_vector(x, g), rtol=1e-6, atol=1e-8)


def test_sigma_apply_matches_matrix_product(rng):
    x, y = rng.standard_normal((2, 100, 3))
    np.testing.assert_allclose(sigma_apply(x, y, 0.4),
                               np.einsum("nkl,nl->nk", sigma_matrix(x, 0.4), y), atol=1e-13)


def test_per_sample_gamma_broadcasts(rng):
    x = rng.standard_normal((5, 3))
    g = np.linspace(0.2, 1.0, 5)
    batched = a_matrix(x, g)
    for i in range(5):
        np.testing.assert_array_equal(batched[i], a_matrix(x[i], g[i]))


# -- properties --------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(nonzero_vec)
def test_projector_properties(x):
    P = proj_perp(x)
    np.testing.assert_allclose(P @ P, P, atol=1e-12)
    np.testing.assert_allclose(P, P.T, atol=1e-12)
    np.testing.assert_allclose(P @ x / norm(x), 0.0, atol=1e-12)
    assert np.trace(P) == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec, gammas)
def test_sigma_squares_to_a(x, g):
    S, A = sigma_matrix(x, g), a_matrix(x, g)
    # max-abs rather than the 2-norm, whose squares underflow for |x| ~ 1e-68
    scale = max(np.abs(A).max(), 1e-300)
    assert np.abs(S @ S - A).max() <= 1e-10 * scale
    assert np.trace(A) == pytest.approx(2 * norm(x) ** (g + 2), rel=1e-12, abs=1e-300)
    np.testing.assert_allclose(A @ x, 0.0, atol=1e-10 * scale * norm(x) + 1e-300)
    assert np.all(np.linalg.eigvalsh(A) >= -1e-10 * scale)


@settings(max_examples=200, deadline=None)
@given(vec, vec, gammas)
def test_drift_lipschitz(x, xt, g):
    lhs = norm(b_vector(x, g) - b_vector(xt, g))
    rhs = 2 * (norm(x) ** g + norm(xt) ** g) * norm(x - xt)
    assert lhs <= rhs * (1 + 1e-10) + 1e-300


@settings(max_examples=200, deadline=None)
@given(vec, vec, gammas)
def test_diffusion_difference_chain(x, xt, g):
    dS = sigma_matrix(x, g) - sigma_matrix(xt, g)
    l3 = np.sum(dS * dS)
    mid = 2 * norm(norm(x) ** (g / 2) * x - norm(xt) ** (g / 2) * xt) ** 2
    r4 = 2 * (norm(x) ** (g / 2) + norm(xt) ** (g / 2)) ** 2 * norm(x - xt) ** 2
    assert l3 <= mid * (1 + 1e-10) + 1e-12 * (l3 + mid)
    assert mid <= r4 * (1 + 1e-10) + 1e-300


@settings(max_examples=200, deadline=None)
@given(vec, vec, gammas)
def test_sigma_inner_closed_form_and_lower_bound(x, xt, g):
    S, St = sigma_matrix(x, g), sigma_matrix(xt, g)
    direct = np.sum(S * St)
    closed = sigma_inner(x, xt, g)
    assert closed == pytest.approx(direct, rel=1e-10, abs=1e-12 * (abs(direct) + 1))
    low = 2 * norm(x) ** (g / 2) * norm(xt) ** (g / 2) * np.dot(x, xt)
    assert low <= closed + 1e-10 * (abs(low) + abs(closed))


@settings(max_examples=300, deadline=None)
@given(st.one_of(st.just(0.0), st.floats(1e-6, 1e3)), st.floats(1e-6, 1e3), st.floats(1e-3, 0.999))
def test_power_difference_bound(a, b, alpha):
    lhs = abs(a ** alpha - b ** alpha)
    rhs = max(a, b) ** (alpha - 1) * abs(a - b)
    assert lhs <= rhs * (1 + 1e-10) + 1e-300


@settings(max_examples=200, deadline=None)
@given(vec, vec, gammas)
def test_sigma_sees_only_relative_velocity(v, vs, g):
    S = sigma_matrix(v - vs, g)
    scale = np.linalg.norm(S) * (norm(v) + norm(vs)) + 1e-300
    assert norm(S @ v - S @ vs) <= 1e-10 * scale
    # |sigma(v - v*) v| = |x|^(g/2) |v x v*|, so the constant 2 has room to spare
    assert norm(S @ v) <= 2 * norm(v - vs) ** (g / 2) * norm(v) * norm(vs) * (1 + 1e-10) + 1e-300
