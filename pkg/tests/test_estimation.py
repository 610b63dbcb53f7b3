import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drcons import control, estimation, numcore
from drcons.acceptance import nilpotent_plant
from drcons.errors import IdentifiabilityError, InvalidInputError
from drcons.ocoam import MarkovOperator


def test_exploration_length():
    assert estimation.exploration_length(3, 4096, 2, 1) == math.ceil(9 * 64 * 3)


def test_explore_empty():
    d = estimation.explore(control.random_system(3, 1, 2, 0), 0, seed=0)
    assert d.N == 0 and d.targets.shape == (0, 3)


def test_explore_deterministic():
    sys = control.random_system(3, 1, 2, 0)
    gen = control.DisturbanceGen("mixed", seed=1)
    a, b = estimation.explore(sys, 200, 5, gen), estimation.explore(sys, 200, 5, gen)
    np.testing.assert_array_equal(a.u_ex, b.u_ex)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.u_ex, estimation.explore(sys, 200, 6, gen).u_ex)


def test_explore_zero_gain_outputs_ignore_inputs():
    rng = numcore.Rng(0)
    A = 0.5 * np.eye(3)
    sys = control.LinearSystem(A, np.zeros((3, 1)), rng.normal((2, 3)), np.zeros((1, 2)))
    d = estimation.explore(sys, 4000, 3, control.DisturbanceGen("rademacher", 1.0, 0.1, seed=0))
    for lag in range(1, 4):
        for j in range(2):
            r = np.corrcoef(d.u_ex[:-lag, 0], d.y[lag:, j])[0, 1]
            assert abs(r) < 0.06


def test_design_matrix_loop_oracle():
    rng = np.random.default_rng(0)
    U = rng.standard_normal((10, 2))
    prob = estimation.LsProblem(3, U, rng.standard_normal((10, 4)))
    X, V = prob.design()
    assert X.shape == (7, 6) and V.shape == (7, 4)
    for r, t in enumerate(range(3, 10)):
        np.testing.assert_array_equal(X[r], np.concatenate([U[t - i] for i in range(1, 4)]))


def test_noiseless_nilpotent_recovery():
    sys = nilpotent_plant()
    d = estimation.explore(sys, 80, seed=2)
    G_hat = estimation.least_squares_markov(estimation.LsProblem(4, d.u_ex, d.targets))
    G = control.nominal_markov(sys, 4)
    assert np.max(np.abs(G_hat.blocks[1:] - G.blocks[1:])) <= 1e-8
    np.testing.assert_array_equal(G_hat.blocks[0], G.blocks[0])


def test_zero_targets_give_zero_estimate():
    U = numcore.Rng(0).normal((50, 1))
    G_hat = estimation.least_squares_markov(estimation.LsProblem(3, U, np.zeros((50, 3))))
    assert np.all(G_hat.blocks[1:] == 0)


def test_rank_deficient_design():
    U = np.zeros((40, 1))
    with pytest.raises(IdentifiabilityError) as ei:
        estimation.least_squares_markov(estimation.LsProblem(3, U, np.ones((40, 3))))
    assert ei.value.sigma_min == 0.0


def test_ls_problem_validation():
    with pytest.raises(InvalidInputError):
        estimation.LsProblem(3, np.zeros((3, 1)), np.zeros((3, 2)))
    with pytest.raises(InvalidInputError):
        estimation.LsProblem(2, np.zeros((10, 1)), np.zeros((9, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 2))
def test_ls_recovers_exact_linear_model(seed, h, du):
    # targets generated exactly by lags 1..h are fitted exactly
    rng = np.random.default_rng(seed)
    p, N = 3, 40 * h + 20
    U = rng.standard_normal((N, du))
    blocks = rng.standard_normal((h, p, du))
    V = np.zeros((N, p))
    for t in range(N):
        for i in range(1, h + 1):
            if t - i >= 0:
                V[t] += blocks[i - 1] @ U[t - i]
    G_hat = estimation.least_squares_markov(estimation.LsProblem(h, U, V))
    np.testing.assert_allclose(G_hat.blocks[1:], blocks, atol=1e-8)


def test_markov_error_examples():
    G = control.nominal_markov(control.random_system(3, 1, 2, 0), 5)
    assert estimation.markov_error(G, G) == 0.0
    D = np.zeros_like(G.blocks)
    D[2] = np.array([[0.1], [0.0], [0.0]])
    assert estimation.markov_error(MarkovOperator(G.blocks + D), G) == pytest.approx(0.1, abs=1e-15)


def test_markov_error_summation_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.standard_normal((4, 3, 2)), rng.standard_normal((6, 3, 2))
        diff = np.concatenate([a, np.zeros((2, 3, 2))]) - b
        oracle = sum(math.sqrt(np.linalg.eigvalsh(B.T @ B)[-1]) for B in diff)
        assert estimation.markov_error(MarkovOperator(a), MarkovOperator(b)) == pytest.approx(oracle, rel=1e-10)
