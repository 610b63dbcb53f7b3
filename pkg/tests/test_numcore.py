import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from drcons import numcore
from drcons.errors import InvalidInputError, NumericError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def random_spd(rng, n, shift=0.1):
    A = rng.standard_normal((n, n))
    return A @ A.T + shift * np.eye(n)


# -- spd_solve -----------------------------------------------------------------

def test_spd_solve_identity():
    np.testing.assert_array_equal(numcore.spd_solve(np.eye(2), [3.0, -1.0]), [3.0, -1.0])


def test_spd_solve_diagonal():
    np.testing.assert_allclose(numcore.spd_solve(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])


def test_spd_solve_residual():
    rng = np.random.default_rng(0)
    L = random_spd(rng, 5)
    b = rng.standard_normal(5)
    x = numcore.spd_solve(L, b)
    assert np.linalg.norm(L @ x - b) < 1e-9


def test_spd_solve_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        numcore.spd_solve(np.eye(2), [np.nan, 1.0])


def test_spd_solve_names_failing_pivot():
    with pytest.raises(NumericError, match="leading minor 2"):
        numcore.spd_solve(np.diag([1.0, -1.0, 1.0]), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, (4, 4), elements=finite), hnp.arrays(float, 4, elements=finite))
def test_spd_solve_property(A, b):
    L = A @ A.T + np.eye(4)
    x = numcore.spd_solve(L, b)
    assert np.linalg.norm(L @ x - b) <= 1e-8 * max(1.0, np.linalg.norm(L) * np.linalg.norm(x))


# -- proj_weighted_ball --------------------------------------------------------

def test_projection_euclidean():
    np.testing.assert_allclose(numcore.proj_weighted_ball(np.eye(2), [2.0, 0.0], 1.0), [1.0, 0.0])


def test_projection_interior_unchanged():
    L = random_spd(np.random.default_rng(1), 2)
    z = np.array([0.3, -0.2])
    np.testing.assert_array_equal(numcore.proj_weighted_ball(L, z, 1.0), z)


def test_projection_weighted_frozen():
    # minimizer of 4(2 - x)^2 + (2 - y)^2 on the unit circle, by angle search plus Brent refinement
    z = numcore.proj_weighted_ball(np.diag([4.0, 1.0]), [2.0, 2.0], 1.0)
    np.testing.assert_allclose(z, [0.9333448087506743, 0.35898115267819736], atol=1e-7)


def test_projection_weighted_grid():
    L = np.diag([4.0, 1.0])
    zt = np.array([2.0, 2.0])
    z = numcore.proj_weighted_ball(L, zt, 1.0)
    xs = np.arange(-1.0, 1.0 + 5e-4, 1e-3)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    inside = X**2 + Y**2 <= 1.0
    grid = np.min(4 * (2 - X[inside]) ** 2 + (2 - Y[inside]) ** 2)
    obj = (zt - z) @ L @ (zt - z)
    assert obj - grid <= 1e-5


def test_projection_rejects_bad_radius():
    with pytest.raises(InvalidInputError):
        numcore.proj_weighted_ball(np.eye(2), [1.0, 1.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, (3, 3), elements=finite), hnp.arrays(float, 3, elements=finite),
       st.floats(0.1, 5.0))
def test_projection_feasible_and_optimal(A, zt, radius):
    L = A @ A.T + 0.1 * np.eye(3)
    z = numcore.proj_weighted_ball(L, zt, radius)
    assert np.linalg.norm(z) <= radius * (1 + 1e-12)
    if np.linalg.norm(zt) <= radius:
        np.testing.assert_array_equal(z, zt)
        return
    # first-order optimality on the sphere: L (zt - z) is a nonnegative multiple of z
    g = L @ (zt - z)
    cos = g @ z / (np.linalg.norm(g) * np.linalg.norm(z) + 1e-300)
    assert np.linalg.norm(g) < 1e-7 * max(1.0, np.linalg.norm(L @ zt)) or cos > 1 - 1e-6


def test_min_quadratic_flat_tiebreak():
    z = numcore.min_quadratic_on_ball(np.zeros((3, 3)), np.zeros(3), 1.0)
    np.testing.assert_array_equal(z, np.zeros(3))


def test_min_quadratic_grid():
    rng = np.random.default_rng(3)
    for _ in range(10):
        P = np.array([[rng.uniform(0.01, 2.0)]])
        q = np.array([rng.normal() * 2])
        z = numcore.min_quadratic_on_ball(P, q, 1.0)
        xs = np.linspace(-1, 1, 20001)
        vals = P[0, 0] * xs**2 - 2 * q[0] * xs
        assert abs(z[0] - xs[np.argmin(vals)]) <= 1e-4


def test_min_quadratic_indefinite():
    with pytest.raises(NumericError):
        numcore.min_quadratic_on_ball(np.diag([1.0, -1.0]), np.zeros(2), 1.0)


# -- op_norm -------------------------------------------------------------------

def test_op_norm_examples():
    assert numcore.op_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0)
    assert numcore.op_norm(np.zeros((2, 2))) == 0.0


def test_op_norm_eigen_oracle():
    M = np.random.default_rng(4).standard_normal((4, 3))
    oracle = math.sqrt(np.linalg.eigvalsh(M.T @ M)[-1])
    assert abs(numcore.op_norm(M) - oracle) <= 1e-7


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, (3, 2), elements=finite), hnp.arrays(float, (2, 3), elements=finite))
def test_op_norm_submultiplicative(A, B):
    assert numcore.op_norm(A @ B) <= numcore.op_norm(A) * numcore.op_norm(B) * (1 + 1e-12) + 1e-12


# -- spectral_radius_estimate --------------------------------------------------

def test_spectral_radius_diagonal():
    r = numcore.spectral_radius_estimate(np.diag([0.5, 0.2]), n_power=64)
    assert 0.5 <= r <= 0.5 * (1 + 1e-6)


def test_spectral_radius_zero():
    assert numcore.spectral_radius_estimate(np.zeros((3, 3))) == 0.0


def test_spectral_radius_constructed_spectrum():
    rng = np.random.default_rng(5)
    S = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    M = S @ np.diag([0.9, 0.3, 0.1]) @ np.linalg.inv(S)
    assert 0.9 <= numcore.spectral_radius_estimate(M) < 1.0


def test_spectral_radius_overflow_is_unstable():
    assert numcore.spectral_radius_estimate(np.diag([1e10, 0.1])) == math.inf


# -- eig_min_sym ---------------------------------------------------------------

def test_eig_min_examples():
    assert numcore.eig_min_sym(np.diag([2.0, -1.0])) == pytest.approx(-1.0)
    assert numcore.eig_min_sym(np.eye(3)) == pytest.approx(1.0)


def test_eig_min_charpoly_oracle():
    A = np.random.default_rng(6).standard_normal((5, 5))
    S = A + A.T
    roots = np.roots(np.poly(S))
    assert abs(numcore.eig_min_sym(S) - float(np.min(roots.real))) <= 1e-6


def test_eig_min_rejects_asymmetric():
    with pytest.raises(InvalidInputError):
        numcore.eig_min_sym(np.array([[1.0, 2.0], [0.0, 1.0]]))


# -- Rng -----------------------------------------------------------------------

def test_rng_deterministic():
    a = numcore.Rng(7, stream=(1, 2)).normal(100)
    b = numcore.Rng(7, stream=(1, 2)).normal(100)
    np.testing.assert_array_equal(a, b)


def test_rng_streams_differ():
    a = numcore.Rng(7, stream=1).normal(50)
    b = numcore.Rng(7, stream=2).normal(50)
    assert not np.array_equal(a, b)
    assert np.array_equal(numcore.Rng(7).spawn(1).normal(50), a)


def test_rng_moments():
    r = numcore.Rng(0)
    x = r.normal(200000)
    assert abs(x.mean()) < 0.01 and abs(x.var() - 1) < 0.02
    u = r.uniform(100000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.01
    s = r.rademacher(100000)
    assert set(np.unique(s)) == {-1.0, 1.0} and abs(s.mean()) < 0.02


def test_rng_shapes():
    r = numcore.Rng(1)
    assert r.normal((3, 4)).shape == (3, 4)
    assert isinstance(r.uniform(), float)
    assert r.normal(5).shape == (5,)
