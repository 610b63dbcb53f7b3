"""Online convex optimization with affine memory.

The with-memory loss at round ``t`` is

    F_t(z_t, ..., z_{t-h}) = loss_t(v_t + sum_i G[i] @ Y_{t-i} @ z_{t-i})

and its unary specialization is ``f_t(z) = loss_t(v_t + H_t @ z)`` with
``H_t = sum_i G[i] @ Y_{t-i}``. Semi-ONS runs a Newton-style update on
``f_t`` whose preconditioner accumulates ``H_t^T H_t``.

Conventions
-----------
* Windows of past matrices/iterates are passed newest first:
  ``Ys[0] = Y_t, Ys[1] = Y_{t-1}, ...``. Missing entries are treated as zero.
* The constraint set is the Euclidean ball of radius ``radius`` centred at the
  origin.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numcore
from .errors import InvalidInputError, NumericError

__all__ = [
    "QuadLoss",
    "MarkovOperator",
    "AffineContext",
    "SemiOnsState",
    "RegretLedger",
    "LedgerSummary",
    "QuadraticAccumulator",
    "make_H",
    "unary_eval",
    "unary_grad",
    "memory_eval",
    "semi_ons_init",
    "semi_ons_step",
    "semi_ons_update",
    "kappa_lower_bound",
    "decay_psi",
    "covariance_domination_gap",
    "best_in_hindsight",
    "ledger_finalize",
    "effective_lipschitz",
]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

class QuadLoss:
    """Quadratic loss ``l(v) = (v - g)^T Q (v - g)`` with ``Q`` symmetric positive definite."""

    def __init__(self, Q, g=None, *, check=True):
        Q = np.asarray(Q, dtype=float)
        if Q.ndim == 0:
            Q = Q.reshape(1, 1)
        p = Q.shape[0]
        g = np.zeros(p) if g is None else np.atleast_1d(np.asarray(g, dtype=float))
        if check:
            if Q.shape != (p, p) or g.shape != (p,):
                raise InvalidInputError(f"shape mismatch: Q {Q.shape}, g {g.shape}")
            if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(g))):
                raise InvalidInputError("QuadLoss has non-finite entries")
            if np.max(np.abs(Q - Q.T)) > 1e-10 * max(1.0, np.max(np.abs(Q))):
                raise InvalidInputError("Q must be symmetric")
            if numcore.eig_min_sym(Q) <= 0:
                raise InvalidInputError("Q must be positive definite")
        self.Q = Q
        self.g = g

    @property
    def dim(self):
        return self.g.shape[0]

    @cached_property
    def alpha(self):
        """Strong-convexity modulus, ``2 * eig_min(Q)``."""
        return 2.0 * numcore.eig_min_sym(self.Q)

    @cached_property
    def smooth(self):
        """Smoothness constant, ``2 * ||Q||_op``."""
        return 2.0 * numcore.op_norm(self.Q)

    def __call__(self, v):
        r = v - self.g
        return float(r @ self.Q @ r)

    def grad(self, v):
        return 2.0 * (self.Q @ (v - self.g))

    def __repr__(self):
        return f"QuadLoss(p={self.dim}, alpha={self.alpha:.3g}, L={self.smooth:.3g})"


class MarkovOperator:
    """Finite sequence of matrices ``G[0], ..., G[h]`` acting by convolution.

    Parameters
    ----------
    blocks : array_like, shape (h+1, p, d_in)
        The blocks. A list of equally shaped matrices is accepted too.
    """

    def __init__(self, blocks):
        b = np.array(blocks, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1, 1)
        if b.ndim != 3 or b.shape[0] < 1:
            raise InvalidInputError(f"blocks must stack to shape (h+1, p, d_in), got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise InvalidInputError("MarkovOperator has non-finite blocks")
        b.setflags(write=False)
        self.blocks = b
        self.block_norms = np.array([numcore.op_norm(B) for B in b])
        self.l1_op = float(self.block_norms.sum())
        # [G[h], ..., G[0]] side by side, matching a time-ordered window of inputs
        self._flat_rev = np.ascontiguousarray(np.concatenate(b[::-1], axis=1))

    @property
    def h_len(self):
        return self.blocks.shape[0] - 1

    @property
    def p(self):
        return self.blocks.shape[1]

    @property
    def d_in(self):
        return self.blocks.shape[2]

    def __len__(self):
        return self.blocks.shape[0]

    def __getitem__(self, i):
        return self.blocks[i]

    def truncated(self, h):
        """Operator with blocks ``0..h`` (zero-padded if ``h`` exceeds ``h_len``)."""
        if h <= self.h_len:
            return MarkovOperator(self.blocks[: h + 1])
        pad = np.zeros((h - self.h_len, self.p, self.d_in))
        return MarkovOperator(np.concatenate([self.blocks, pad]))

    def apply_window(self, window):
        """``sum_i G[i] @ window[-1-i]`` for a time-ordered window (oldest first).

        ``window`` has shape ``(h+1, d_in, ...)``; the trailing axes are kept.
        """
        w = np.asarray(window, dtype=float)
        tail = w.shape[2:]
        return (self._flat_rev @ w.reshape((-1,) + tail)).reshape((self.p,) + tail)

    def __sub__(self, other):
        h = max(self.h_len, other.h_len)
        return MarkovOperator(self.truncated(h).blocks - other.truncated(h).blocks)

    def __add__(self, other):
        h = max(self.h_len, other.h_len)
        return MarkovOperator(self.truncated(h).blocks + other.truncated(h).blocks)

    def __repr__(self):
        return f"MarkovOperator(h={self.h_len}, p={self.p}, d_in={self.d_in}, l1_op={self.l1_op:.4g})"


@dataclass
class AffineContext:
    """Per-round data revealed to the learner: ``Y_t``, the offset ``v_t``, and optionally its estimate."""

    Y: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray = None

    def offset(self, approximate=False):
        if approximate and self.v_hat is not None:
            return self.v_hat
        return self.v


# ---------------------------------------------------------------------------
# Loss evaluation
# ---------------------------------------------------------------------------

def _window(Ys, n, shape):
    """Stack up to ``n`` newest-first matrices into a time-ordered array, zero-padding the past."""
    out = np.zeros((n,) + shape)
    k = min(n, len(Ys))
    for j in range(k):
        Y = Ys[j].Y if isinstance(Ys[j], AffineContext) else Ys[j]
        Y = np.asarray(Y, dtype=float)
        if Y.shape != shape:
            raise InvalidInputError(f"window entry {j} has shape {Y.shape}, expected {shape}")
        out[n - 1 - j] = Y
    return out


def make_H(G, Ys):
    """``H_t = sum_{i=0}^h G[i] @ Y_{t-i}`` from a newest-first window of contexts.

    ``Ys`` holds matrices (or :class:`AffineContext`) with ``Ys[0] = Y_t``.
    Entries older than the window are zero.
    """
    if len(Ys) == 0:
        raise InvalidInputError("need at least the current context")
    Y0 = Ys[0].Y if isinstance(Ys[0], AffineContext) else Ys[0]
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    if Y0.shape[0] != G.d_in:
        raise InvalidInputError(f"Y has {Y0.shape[0]} rows but G expects d_in={G.d_in}")
    W = _window([np.atleast_2d(np.asarray(Y.Y if isinstance(Y, AffineContext) else Y, dtype=float)) for Y in Ys],
                G.h_len + 1, Y0.shape)
    return G.apply_window(W)


def unary_eval(loss, v, H, z):
    """``f(z) = loss(v + H z)``."""
    return loss(v + H @ z)


def unary_grad(loss, v, H, z):
    """``grad f(z) = H^T grad loss(v + H z)``."""
    return H.T @ loss.grad(v + H @ z)


def memory_eval(loss, G, Ys, zs, v):
    """With-memory loss ``loss(v + sum_i G[i] Y_{t-i} z_{t-i})``.

    ``Ys`` and ``zs`` are newest first and must have the same length (at most
    ``h+1`` entries are used).
    """
    if len(Ys) != len(zs):
        raise InvalidInputError("Ys and zs must have equal length")
    acc = np.array(v, dtype=float)
    for i in range(min(len(Ys), G.h_len + 1)):
        acc = acc + G[i] @ (np.atleast_2d(Ys[i]) @ zs[i])
    return loss(acc)


# ---------------------------------------------------------------------------
# Semi-ONS
# ---------------------------------------------------------------------------

@dataclass
class SemiOnsState:
    """Mutable Semi-ONS state.

    ``Lambda`` equals ``lambda_reg * I + sum_s H_s^T H_s`` over processed rounds.
    ``Y_hist`` holds the most recent ``h+1`` context matrices, newest first.
    """

    z: np.ndarray
    Lambda: np.ndarray
    eta: float
    lambda_reg: float
    radius: float
    t: int = 0
    Y_hist: deque = field(default_factory=deque)
    last_H: np.ndarray = None

    @property
    def dim(self):
        return self.z.shape[0]


def semi_ons_init(d, eta, lambda_reg, radius, z0=None, h=0):
    """Fresh Semi-ONS state at ``z0`` (default: the origin)."""
    if not (eta > 0 and lambda_reg > 0 and radius > 0):
        raise InvalidInputError("eta, lambda_reg and radius must be positive")
    z = np.zeros(d) if z0 is None else np.array(z0, dtype=float)
    if np.linalg.norm(z) > radius * (1 + 1e-9):
        raise InvalidInputError("initial iterate lies outside the constraint ball")
    return SemiOnsState(z=z, Lambda=lambda_reg * np.eye(d), eta=float(eta),
                        lambda_reg=float(lambda_reg), radius=float(radius),
                        Y_hist=deque(maxlen=h + 1))


def semi_ons_step(state, loss, ctx, G_used, *, approximate=False):
    """One Semi-ONS round; updates ``state`` in place and returns it.

    The context ``ctx`` is pushed onto the window, ``H_t`` is formed with
    ``G_used`` (the true operator, or an estimate in approximate mode), the
    preconditioner absorbs ``H_t^T H_t`` before the step, and the Newton-like
    step is projected back onto the ball in the ``Lambda_t`` norm. In
    approximate mode the offset ``ctx.v_hat`` replaces ``ctx.v``.
    """
    if state.Y_hist.maxlen != G_used.h_len + 1:
        state.Y_hist = deque(state.Y_hist, maxlen=G_used.h_len + 1)
    state.Y_hist.appendleft(np.atleast_2d(np.asarray(ctx.Y, dtype=float)))
    H = make_H(G_used, list(state.Y_hist))
    return semi_ons_update(state, loss, ctx.offset(approximate), H)


def semi_ons_update(state, loss, v, H):
    """Semi-ONS update for the unary loss ``loss(v + H z)`` with ``H`` already formed."""
    state.Lambda += H.T @ H
    grad = unary_grad(loss, v, H, state.z)
    z_tilde = state.z - state.eta * numcore.spd_solve(state.Lambda, grad)
    state.z = numcore.proj_weighted_ball(state.Lambda, z_tilde, state.radius)
    state.last_H = H
    state.t += 1
    return state


def default_semi_ons_params(alpha, h, R_Y, R_G, *, T=None, eps_G=None):
    """``(eta, lambda)`` defaults.

    Exact mode (``eps_G`` is None): ``eta = 1/alpha``, ``lambda = 6 h R_Y^2 R_G^2``.
    Approximate mode: ``eta = 3/alpha``, ``lambda = T eps_G^2 + h R_G^2``.
    """
    if eps_G is None:
        return 1.0 / alpha, max(6.0 * h * R_Y**2 * R_G**2, 1e-12)
    if T is None:
        raise InvalidInputError("approximate-mode defaults need the horizon T")
    return 3.0 / alpha, T * eps_G**2 + max(h, 1) * R_G**2


# ---------------------------------------------------------------------------
# Invertibility modulus and decay
# ---------------------------------------------------------------------------

def kappa_lower_bound(G, grid_points=512):
    """Grid estimate of ``min_{|z|=1} sigma_min(sum_i G[i] z^{-i})^2``, capped at 1.

    The transfer function is sampled at ``grid_points`` equispaced points on
    the unit circle. The grid minimum is never below the true circle minimum,
    which in turn lower-bounds the invertibility modulus.
    """
    if grid_points < 16:
        raise InvalidInputError("grid_points must be >= 16")
    b = G.blocks
    if G.p < G.d_in:
        return 0.0
    if len(b) <= grid_points:
        Z = np.fft.fft(b, n=grid_points, axis=0)
    else:
        theta = 2.0 * np.pi * np.arange(grid_points) / grid_points
        ph = np.exp(-1j * np.outer(theta, np.arange(len(b))))
        Z = np.tensordot(ph, b, axes=(1, 0))
    s = np.linalg.svd(Z, compute_uv=False)
    return float(min(1.0, np.min(s[:, -1]) ** 2))


def decay_psi(G, n):
    """Tail sum ``sum_{i >= n} ||G[i]||_op``."""
    if n < 0:
        raise InvalidInputError("n must be >= 0")
    return float(G.block_norms[n:].sum())


def covariance_domination_gap(H_seq, Y_seq, kappa, h, R_H, t=None, *, G=None, R_G=None):
    """Smallest eigenvalue of ``sum H^T H - (kappa/2) sum Y^T Y + 5 h R_H^2 c_psi I``.

    ``H_seq`` covers rounds ``1..t``; ``Y_seq`` covers rounds ``1-h..t``. A
    non-negative result certifies the covariance domination inequality on
    this instance. ``c_psi = max(1, t psi_G(h+1)^2 / (h R_G^2))`` when ``G`` is
    supplied, else 1.
    """
    H_seq = [np.atleast_2d(H) for H in H_seq]
    Y_seq = [np.atleast_2d(Y) for Y in Y_seq]
    if t is None:
        t = len(H_seq)
    if len(H_seq) != t or len(Y_seq) != t + h:
        raise InvalidInputError(f"expected {t} H's and {t + h} Y's, got {len(H_seq)} and {len(Y_seq)}")
    d = H_seq[0].shape[1] if H_seq else Y_seq[0].shape[1]
    if any(H.shape[1] != d for H in H_seq) or any(Y.shape[1] != d for Y in Y_seq):
        raise InvalidInputError("column dimension mismatch")
    c_psi = 1.0
    if G is not None and h > 0:
        if R_G is None:
            R_G = max(1.0, G.l1_op)
        c_psi = max(1.0, t * decay_psi(G, h + 1) ** 2 / (h * R_G**2))
    S = np.zeros((d, d))
    for H in H_seq:
        S += H.T @ H
    for Y in Y_seq:
        S -= 0.5 * kappa * (Y.T @ Y)
    S += 5.0 * h * R_H**2 * c_psi * np.eye(d)
    return numcore.eig_min_sym(0.5 * (S + S.T))


def effective_lipschitz(L_smooth, R_v, R_G, R_YC):
    """``L * max(1, R_v + R_G R_{Y,C})``."""
    return L_smooth * max(1.0, R_v + R_G * R_YC)


# ---------------------------------------------------------------------------
# Comparator and ledger
# ---------------------------------------------------------------------------

class QuadraticAccumulator:
    """Running ``sum_t f_t(z) = z^T P z - 2 q^T z + r`` for quadratic unary losses."""

    def __init__(self, d):
        self.P = np.zeros((d, d))
        self.q = np.zeros(d)
        self.r = 0.0
        self.count = 0

    def add(self, loss, v, H):
        QH = loss.Q @ H
        res = v - loss.g
        self.P += H.T @ QH
        self.q -= QH.T @ res
        self.r += float(res @ loss.Q @ res)
        self.count += 1

    def value(self, z):
        return float(z @ self.P @ z - 2.0 * self.q @ z + self.r)

    def minimize(self, radius):
        """Exact constrained minimizer and optimal value (min-norm tie-break)."""
        if self.count == 0:
            raise InvalidInputError("no losses accumulated")
        z = numcore.min_quadratic_on_ball(self.P, self.q, radius)
        return z, self.value(z)


def best_in_hindsight(losses, radius):
    """Minimizer of ``sum_t f_t`` over the ball, and its value.

    ``losses`` is a sequence of ``(QuadLoss, v, H)`` triples.
    """
    losses = list(losses)
    if not losses:
        raise InvalidInputError("need at least one loss")
    d = np.atleast_2d(losses[0][2]).shape[1]
    acc = QuadraticAccumulator(d)
    for loss, v, H in losses:
        acc.add(loss, np.asarray(v, dtype=float), np.atleast_2d(H))
    return acc.minimize(radius)


@dataclass
class LedgerSummary:
    T: int
    memory_reg: float
    oco_reg: float
    move_diff: float
    euc_cost: float
    adap_cost: float
    comparator: float
    total_F: float
    total_f: float

    def as_dict(self):
        return dict(self.__dict__)


class RegretLedger:
    """Per-round bookkeeping of with-memory and unary losses and iterate movement."""

    def __init__(self):
        self.F = []
        self.f = []
        self.euc = []
        self.adap = []
        self.accumulator = None

    def record(self, F, f, euc_step, adap_step=0.0):
        self.F.append(float(F))
        self.f.append(float(f))
        self.euc.append(float(euc_step))
        self.adap.append(float(adap_step))

    def __len__(self):
        return len(self.F)


def ledger_finalize(ledger, comparator_value):
    """Regret and movement totals for a completed ledger."""
    F = math.fsum(ledger.F)
    f = math.fsum(ledger.f)
    move = math.fsum(a - b for a, b in zip(ledger.F, ledger.f))
    return LedgerSummary(
        T=len(ledger),
        memory_reg=F - comparator_value,
        oco_reg=f - comparator_value,
        move_diff=move,
        euc_cost=math.fsum(ledger.euc),
        adap_cost=math.fsum(ledger.adap),
        comparator=float(comparator_value),
        total_F=F,
        total_f=f,
    )
