import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drcons import tradeoff
from drcons.errors import InvalidInputError
from drcons.tradeoff import EpochAdversary


def test_single_epoch_constant_signs():
    adv = EpochAdversary(T=64, E=64, epsilon=0.1, seed=3)
    assert np.all(adv.v == adv.v[0]) and abs(adv.v[0]) == 1


def test_epoch_structure_and_truncation():
    adv = EpochAdversary(T=100, E=30, epsilon=0.1, seed=1)
    assert adv.n_epochs == 4 and adv.v.shape == (100,)
    for k in range(4):
        assert np.all(adv.v[30 * k: 30 * (k + 1)] == adv.v[30 * k])


def test_from_mu_parameters():
    T, mu, c = 16384, 2.0, 0.5
    adv = EpochAdversary.from_mu(T, mu, c=c)
    k = math.floor((8 * T * c / mu) ** (2 / 3))
    assert adv.E == T // k
    assert adv.epsilon == pytest.approx(mu / (4 * (T // k)))


def test_adversary_deterministic():
    a, b = EpochAdversary(1000, 10, 0.1, seed=4), EpochAdversary(1000, 10, 0.1, seed=4)
    np.testing.assert_array_equal(a.v, b.v)
    assert not np.array_equal(a.v, EpochAdversary(1000, 10, 0.1, seed=5).v)


def test_adversary_validation():
    with pytest.raises(InvalidInputError):
        EpochAdversary(10, 0, 0.1)
    with pytest.raises(InvalidInputError):
        EpochAdversary(10, 2, 1.5)
    with pytest.raises(InvalidInputError):
        EpochAdversary.from_mu(10, 0.0)


def test_comparator_matches_grid():
    for seed in range(5):
        adv = EpochAdversary(400, 20, 0.3, seed=seed)
        z, val = adv.comparator()
        zs = np.linspace(-1, 1, 20001)
        vals = np.array([np.sum((adv.v - adv.epsilon * x) ** 2) for x in zs])
        assert val <= vals.min() + 1e-9
        assert abs(z - zs[np.argmin(vals)]) <= 1e-4


def test_adversary_losses_form():
    adv = EpochAdversary(20, 5, 0.2, seed=0)
    for (loss, v, H), vt in zip(tradeoff.adversary_losses(adv), adv.v):
        assert loss(v + H @ np.array([0.5])) == pytest.approx((vt - 0.1) ** 2)


# -- ONS and OGD ---------------------------------------------------------------

def test_ons_zero_gradient_fixed_point():
    st_ = tradeoff.ons_init(2, 1.0, 1.0, z0=[0.3, 0.1])
    tradeoff.ons_step(st_, np.zeros(2))
    np.testing.assert_array_equal(st_.z, [0.3, 0.1])


def test_ons_step_hand_example():
    # Lambda = 1 + 4 = 5, z = 0 - 2 * 2 / 5
    st_ = tradeoff.ons_init(1, 2.0, 1.0)
    tradeoff.ons_step(st_, [2.0])
    assert st_.Lambda[0, 0] == 5.0 and st_.z[0] == pytest.approx(-0.8)
    tradeoff.ons_step(st_, [-4.0])
    assert st_.Lambda[0, 0] == 21.0 and st_.z[0] == pytest.approx(-0.8 + 8.0 / 21.0)


def test_ons_defaults():
    G, tau, eta = tradeoff.ons_defaults(0.5)
    assert G == 1.5 and tau == pytest.approx(1 / 4.5)
    assert eta == pytest.approx(2 * max(4 * 1.5 * 2, 4.5))


def test_ogd_examples():
    np.testing.assert_array_equal(tradeoff.ogd_step([0.2], [0.0], 3, 1.0), [0.2])
    np.testing.assert_allclose(tradeoff.ogd_step([0.9], [-10.0], 1, 1.0), [1.0], rtol=1e-15)
    with pytest.raises(InvalidInputError):
        tradeoff.ogd_step([0.0], [1.0], 0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-5, 5), st.integers(1, 10_000), st.floats(0.1, 10))
def test_ogd_step_bound(z, g, t, alpha):
    z_new = tradeoff.ogd_step([z], [g], t, alpha)
    assert abs(z_new[0] - z) <= abs(g) / (alpha * t) + 1e-15
    assert abs(z_new[0]) <= 1.0


def test_regmu_examples():
    adv = EpochAdversary(256, 16, 0.1, seed=0)
    s = tradeoff.run_ons(adv, 1.0)
    assert tradeoff.regmu(s, 0.0) == s.oco_reg
    assert tradeoff.regmu(s, 2.0) == pytest.approx(s.oco_reg + 2.0 * s.euc_cost)
    still = tradeoff.run_ons(EpochAdversary(256, 256, 0.1, seed=0), 1.0, eta=1e-300)
    assert still.euc_cost < 1e-290 and tradeoff.regmu(still, 5.0) == pytest.approx(still.oco_reg)


# -- batched runners ------------------------------------------------------------

def test_batch_ons_matches_per_step():
    advs = [EpochAdversary(500, 25, 0.2, seed=s) for s in range(3)]
    lams = np.array([0.01, 0.3, 5.0])
    _, _, eta = tradeoff.ons_defaults(0.2)
    loss, move = tradeoff.batch_ons_scalar(np.stack([a.v for a in advs]), 0.2, lams, eta)
    for i, a in enumerate(advs):
        comp = a.comparator()[1]
        for j, lam in enumerate(lams):
            s = tradeoff.run_ons(a, lam)
            assert loss[i, j] - comp == pytest.approx(s.oco_reg, rel=1e-9, abs=1e-9)
            assert move[i, j] == pytest.approx(s.euc_cost, rel=1e-9, abs=1e-12)


def test_batch_semi_ons_matches_per_step():
    advs = [EpochAdversary(400, 20, 0.15, seed=s) for s in range(3)]
    loss, move = tradeoff.batch_semi_ons_lifted(np.stack([a.v for a in advs]), 0.15)
    for i, a in enumerate(advs):
        s = tradeoff.run_semi_ons_lifted(a)
        assert loss[i] - a.comparator()[1] == pytest.approx(s.memory_reg, rel=1e-9, abs=1e-9)
        assert move[i] == pytest.approx(s.euc_cost, rel=1e-9, abs=1e-12)
        assert s.move_diff == 0.0


def test_lambda_grid():
    G, _, eta = tradeoff.ons_defaults(0.01)
    grid = tradeoff.lambda_grid(G, eta, 1.0, 4096, n=9, decades=1.0)
    lam0 = tradeoff.balanced_lambda(eta, 1.0, 4096)
    assert grid.shape == (9,) and np.all(grid >= G * G)
    assert grid[4] == pytest.approx(max(lam0, G * G))
    assert np.all(np.diff(grid) >= 0)
