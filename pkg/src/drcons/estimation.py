"""Least-squares identification of the nominal Markov operator.

During exploration the plant runs ``u_t = K y_t + u_ex_t`` with i.i.d.
standard Gaussian ``u_ex``. Superposition gives

    (y_t, u_t) = (y^K_t, u^K_t) + sum_{i>=0} G_K[i] u_ex_{t-i},

so regressing the observed pair on the ``h`` most recent past exogenous
inputs recovers blocks ``1..h`` of ``G_K``. The contemporaneous term
``G_K[0] u_ex_t = (0, u_ex_t)`` is known and is subtracted from the targets,
which makes noiseless recovery exact.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore
from .control import LossSequence, _disturbances, _Plant, nat_radius
from .errors import IdentifiabilityError, InvalidInputError
from .ocoam import MarkovOperator

__all__ = ["ExplorationData", "LsProblem", "explore", "least_squares_markov", "markov_error", "exploration_length"]


@dataclass
class ExplorationData:
    y: np.ndarray      # (N, dy)
    u: np.ndarray      # (N, du)
    u_ex: np.ndarray   # (N, du)

    @property
    def targets(self):
        """Regression targets ``(y_t, u_t - u_ex_t)``: the known lag-0 response is removed."""
        return np.hstack([self.y, self.u - self.u_ex])

    @property
    def N(self):
        return self.y.shape[0]


@dataclass
class LsProblem:
    """Regression data: horizon ``h``, exogenous inputs ``(N, du)``, targets ``(N, p)``."""

    h: int
    u_ex: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.u_ex = np.atleast_2d(np.asarray(self.u_ex, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.h < 1:
            raise InvalidInputError("h must be >= 1")
        if self.u_ex.shape[0] != self.targets.shape[0]:
            raise InvalidInputError("u_ex and targets must have the same number of rows")
        if self.u_ex.shape[0] <= self.h:
            raise InvalidInputError(f"need more than h={self.h} samples, got {self.u_ex.shape[0]}")

    @property
    def du(self):
        return self.u_ex.shape[1]

    @property
    def p(self):
        return self.targets.shape[1]

    def design(self):
        """Rows ``[u_ex_{t-1}, ..., u_ex_{t-h}]`` for ``t = h..N-1`` (0-based)."""
        N, h = self.u_ex.shape[0], self.h
        X = np.empty((N - h, h * self.du))
        for i in range(1, h + 1):
            X[:, (i - 1) * self.du: i * self.du] = self.u_ex[h - i: N - i]
        return X, self.targets[h:]


def exploration_length(h, T, dy, du):
    """``ceil(h^2 sqrt(T) (dy + du))``."""
    return int(math.ceil(h * h * math.sqrt(T) * (dy + du)))


def explore(sys, N, seed, gen=None, losses=None):
    """Run ``N`` rounds with Gaussian exogenous inputs and record the data.

    ``gen`` is a :class:`DisturbanceGen` or ``(W, E)`` arrays; ``None`` means
    no disturbances.
    """
    if N < 0:
        raise InvalidInputError("N must be >= 0")
    if N == 0:
        return ExplorationData(np.zeros((0, sys.dy)), np.zeros((0, sys.du)), np.zeros((0, sys.du)))
    if gen is None:
        gen = (np.zeros((N, sys.dx)), np.zeros((N, sys.dy)))
    W, E, w_max, e_max = _disturbances(gen, sys, N)
    if losses is None:
        losses = LossSequence(np.eye(sys.p))
    R_nat = nat_radius(sys, w_max, e_max)
    # Gaussian inputs are unbounded; allow for a few standard deviations of forced response
    plant = _Plant(sys, W, E, losses, 1e6 * max(R_nat, 1.0) * (1.0 + math.sqrt(sys.du)))
    rng = numcore.Rng(seed, stream=(17,))
    for _ in range(N):
        plant.observe()
        plant.act(rng.normal(sys.du))
    tr = plant.traj
    return ExplorationData(tr.y.copy(), tr.u.copy(), tr.u_ex.copy())


def least_squares_markov(prob, *, cond_tol=1e-8):
    """Least-squares estimate of blocks ``1..h``; block 0 is fixed at ``[0; I]``.

    Solves the normal equations. Raises :class:`IdentifiabilityError` if the
    smallest eigenvalue of the Gram matrix falls below ``cond_tol * N``.
    """
    X, V = prob.design()
    gram = X.T @ X
    ev = np.linalg.eigvalsh(gram)
    n_rows = X.shape[0]
    if not ev[0] >= cond_tol * n_rows:
        raise IdentifiabilityError(
            f"exploration design is rank deficient: eig_min {ev[0]:.3e} < {cond_tol:.0e} * {n_rows}",
            sigma_min=float(math.sqrt(max(ev[0], 0.0))))
    Theta = numcore.cho_solve(numcore.cholesky(gram), X.T @ V)  # (h du, p)
    h, du, p = prob.h, prob.du, prob.p
    blocks = np.zeros((h + 1, p, du))
    blocks[0, p - du:, :] = np.eye(du)
    for i in range(1, h + 1):
        blocks[i] = Theta[(i - 1) * du: i * du].T
    return MarkovOperator(blocks)


def markov_error(G_hat, G):
    """``||G_hat - G||_{l1,op}``, zero-padding the shorter operator."""
    return (G_hat - G).l1_op
