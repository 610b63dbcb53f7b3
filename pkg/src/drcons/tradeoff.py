"""Regret versus movement on a scalar epoch adversary.

The adversary plays ``f_t(z) = (v_t - eps z)^2`` on ``C = [-1, 1]`` where
``v_t`` is a Rademacher sign held constant over epochs of length ``E``. With
``k = floor((8 T c / mu)^{2/3})`` epochs and ``eps = mu / (4 E)`` any learner
must trade unary regret against ``mu`` times its total movement. Standard
ONS (gradient preconditioner) pays that price; Semi-ONS on the same losses
written with affine memory does not.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore
from .errors import InvalidInputError
from .ocoam import (
    AffineContext,
    LedgerSummary,
    MarkovOperator,
    QuadLoss,
    RegretLedger,
    ledger_finalize,
    semi_ons_init,
    semi_ons_step,
)

__all__ = [
    "EpochAdversary",
    "OnsState",
    "adversary_losses",
    "ons_init",
    "ons_step",
    "ons_defaults",
    "ogd_step",
    "regmu",
    "batch_ons_scalar",
    "run_ons",
    "run_semi_ons_lifted",
    "batch_semi_ons_lifted",
    "lambda_grid",
    "balanced_lambda",
]

RADIUS = 1.0


@dataclass
class EpochAdversary:
    """Piecewise-constant sign sequence.

    ``E`` need not divide ``T``: the last epoch is truncated at ``T``.
    """

    T: int
    E: int
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.E < 1:
            raise InvalidInputError("T and E must be positive")
        if not 0 < self.epsilon <= 1:
            raise InvalidInputError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        n_epochs = -(-self.T // self.E)
        # every (seed, T, E) cell draws its own independent stream
        signs = numcore.Rng(self.seed, stream=(23, self.T, self.E)).rademacher(n_epochs)
        self.v = np.repeat(signs, self.E)[: self.T]

    @classmethod
    def from_mu(cls, T, mu, seed=0, c=0.5):
        """Parameters of the lower-bound construction for movement weight ``mu``.

        ``k = max(1, floor((8 T c / mu)^{2/3}))`` epochs of length ``E = T // k``
        and ``eps = min(1, mu / (4 E))``.
        """
        if mu <= 0:
            raise InvalidInputError("mu must be positive")
        k = max(1, int(math.floor((8.0 * T * c / mu) ** (2.0 / 3.0))))
        k = min(k, T)
        E = T // k
        return cls(T=T, E=E, epsilon=min(1.0, mu / (4.0 * E)), seed=seed)

    @property
    def n_epochs(self):
        return -(-self.T // self.E)

    def comparator(self):
        """``(z_star, value)`` of the best fixed point in ``[-1, 1]``."""
        s = float(np.sum(self.v))
        z = float(np.clip(s / (self.T * self.epsilon), -RADIUS, RADIUS))
        r = self.v - self.epsilon * z
        return z, float(r @ r)


def adversary_losses(adv):
    """Per-round ``(QuadLoss, v, H)`` with ``f_t(z) = (v_t + H z)^2`` and ``H = -eps``."""
    loss = QuadLoss(np.eye(1))
    H = np.array([[-adv.epsilon]])
    return [(loss, np.array([vt]), H) for vt in adv.v]


# ---------------------------------------------------------------------------
# Standard ONS
# ---------------------------------------------------------------------------

@dataclass
class OnsState:
    z: np.ndarray
    Lambda: np.ndarray
    eta: float
    lam: float
    radius: float = RADIUS


def ons_defaults(eps, D=2.0):
    """``(G, tau, eta)`` for the epoch adversary.

    Gradients are bounded by ``G = 2 eps (1 + eps)``; ``f_t`` is
    ``tau = 1 / (2 (1 + eps)^2)`` exp-concave on ``[-1, 1]``; the step size is
    ``eta = 2 max(4 G D, 1 / tau)``.
    """
    G = 2.0 * eps * (1.0 + eps)
    tau = 1.0 / (2.0 * (1.0 + eps) ** 2)
    return G, tau, 2.0 * max(4.0 * G * D, 1.0 / tau)


def ons_init(d, eta, lam, radius=RADIUS, z0=None):
    if not (eta > 0 and lam > 0):
        raise InvalidInputError("eta and lam must be positive")
    z = np.zeros(d) if z0 is None else np.array(z0, dtype=float)
    return OnsState(z=z, Lambda=lam * np.eye(d), eta=float(eta), lam=float(lam), radius=float(radius))


def ons_step(state, grad):
    """One ONS round given ``grad`` at the current iterate; mutates and returns ``state``.

    The preconditioner absorbs ``grad grad^T`` first, then the Newton-like step
    is projected onto the ball in the preconditioner norm.
    """
    grad = np.atleast_1d(np.asarray(grad, dtype=float))
    state.Lambda += np.outer(grad, grad)
    z_tilde = state.z - state.eta * numcore.spd_solve(state.Lambda, grad)
    state.z = numcore.proj_weighted_ball(state.Lambda, z_tilde, state.radius)
    return state


def ogd_step(z, grad, t, alpha, radius=RADIUS):
    """``z - grad / (alpha t)`` clipped to the ball of radius ``radius``."""
    if not alpha > 0:
        raise InvalidInputError("alpha must be positive")
    if t < 1:
        raise InvalidInputError("t is 1-based")
    z_new = np.atleast_1d(np.asarray(z, dtype=float)) - np.asarray(grad, dtype=float) / (alpha * t)
    nrm = float(np.linalg.norm(z_new))
    return z_new * (radius / nrm) if nrm > radius else z_new


def regmu(summary, mu):
    """``OcoReg + mu * EucCost``."""
    return summary.oco_reg + mu * summary.euc_cost


def balanced_lambda(eta, mu, T, d=1, D=2.0):
    """Regularizer equating ``D^2 lam / (2 eta)`` with ``eta mu sqrt(T d log(1+T)) / sqrt(lam)``."""
    return (2.0 * eta * eta * mu * math.sqrt(T * d * math.log1p(T)) / (D * D)) ** (2.0 / 3.0)


def lambda_grid(G, eta, mu, T, *, n=17, decades=2.0, d=1, D=2.0):
    """``n`` log-spaced values within ``decades`` of :func:`balanced_lambda`, floored at ``G^2``."""
    lam0 = balanced_lambda(eta, mu, T, d, D)
    return np.maximum(G * G, lam0 * np.logspace(-decades, decades, n))


def _ledger_summary(T, F, euc, comparator):
    total = math.fsum(F)
    return LedgerSummary(T=T, memory_reg=total - comparator, oco_reg=total - comparator, move_diff=0.0,
                         euc_cost=math.fsum(euc), adap_cost=0.0, comparator=comparator, total_F=total,
                         total_f=total)


def run_ons(adv, lam, eta=None):
    """Standard ONS on the epoch adversary; returns a :class:`LedgerSummary`."""
    eps = adv.epsilon
    _, _, eta_d = ons_defaults(eps)
    st = ons_init(1, eta_d if eta is None else eta, lam)
    F, euc = [], []
    for vt in adv.v:
        z = st.z.copy()
        r = vt - eps * z[0]
        F.append(r * r)
        ons_step(st, np.array([-2.0 * eps * r]))
        euc.append(abs(st.z[0] - z[0]))
    _, comp = adv.comparator()
    return _ledger_summary(adv.T, F, euc, comp)


def batch_ons_scalar(v, eps, lams, eta):
    """Vectorized scalar ONS on ``[-1, 1]`` for many sign sequences and regularizers.

    Parameters
    ----------
    v : ndarray, shape (S, T)
        Adversary signs for ``S`` seeds.
    eps : float
    lams : ndarray, shape (L,)
    eta : float

    Returns
    -------
    total_loss, euc_cost : ndarray, shape (S, L)
    """
    v = np.asarray(v, dtype=float)
    lams = np.asarray(lams, dtype=float)
    S, T = v.shape
    z = np.zeros((S, lams.size))
    Lam = np.broadcast_to(lams, (S, lams.size)).copy()
    loss = np.zeros_like(z)
    move = np.zeros_like(z)
    for t in range(T):
        r = v[:, t:t + 1] - eps * z
        loss += r * r
        g = -2.0 * eps * r
        Lam += g * g
        # in one dimension the weighted projection is plain clipping
        z_new = np.clip(z - eta * g / Lam, -RADIUS, RADIUS)
        move += np.abs(z_new - z)
        z = z_new
    return loss, move


def run_semi_ons_lifted(adv, lam=None, eta=None):
    """Semi-ONS on the adversary written as an affine-memory instance.

    Memory length zero, ``G = {eps}``, ``Y_t = 1`` and offsets ``-v_t``, so
    ``f_t(z) = (eps z - v_t)^2``. Defaults: ``eta = 1/alpha`` with
    ``alpha = 2`` and ``lam = eps^2``.
    """
    eps = adv.epsilon
    G = MarkovOperator([eps])
    loss = QuadLoss(np.eye(1))
    st = semi_ons_init(1, 1.0 / loss.alpha if eta is None else eta, eps * eps if lam is None else lam, RADIUS)
    led = RegretLedger()
    Y = np.ones((1, 1))
    for vt in adv.v:
        z = st.z.copy()
        val = loss(np.array([eps * z[0] - vt]))
        semi_ons_step(st, loss, AffineContext(Y, np.array([-vt])), G)
        led.record(val, val, abs(st.z[0] - z[0]))
    _, comp = adv.comparator()
    return ledger_finalize(led, comp)


def batch_semi_ons_lifted(v, eps, lam=None, eta=0.5):
    """Vectorized :func:`run_semi_ons_lifted` over sign sequences ``v`` of shape ``(S, T)``.

    Returns per-sequence total loss and movement. The preconditioner grows by
    ``eps^2`` each round regardless of the data, which is what keeps the
    movement small.
    """
    v = np.asarray(v, dtype=float)
    lam = eps * eps if lam is None else lam
    S, T = v.shape
    z = np.zeros(S)
    loss = np.zeros(S)
    move = np.zeros(S)
    Lam = lam
    for t in range(T):
        r = eps * z - v[:, t]
        loss += r * r
        Lam = Lam + eps * eps
        z_new = np.clip(z - eta * (2.0 * eps * r) / Lam, -RADIUS, RADIUS)
        move += np.abs(z_new - z)
        z = z_new
    return loss, move

