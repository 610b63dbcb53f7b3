"""Online control of a partially observed linear system via DRC-ONS.

Plant::

    x_{t+1} = A x_t + B u_t + w_t,     y_t = C x_t + e_t,     x_1 = 0

Inputs are ``u_t = K y_t + u_ex_t`` for a fixed stabilizing gain ``K``. The
exogenous part is chosen by a disturbance-response controller (DRC) acting on
the recovered nominal outputs ``y^K`` (the outputs the loop would produce with
``u_ex = 0``); its parameters are learned online with Semi-ONS.

Time indices in code are 0-based: array row ``t`` holds round ``t + 1``.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .errors import InstabilityError, InvalidInputError
from .ocoam import (
    LedgerSummary,
    MarkovOperator,
    QuadLoss,
    QuadraticAccumulator,
    RegretLedger,
    ledger_finalize,
    semi_ons_init,
    semi_ons_update,
)

log = logging.getLogger(__name__)

__all__ = [
    "LinearSystem",
    "DisturbanceGen",
    "LossSequence",
    "DrcPolicy",
    "LdcPolicy",
    "Trajectory",
    "DrcParams",
    "DrcRun",
    "nominal_markov",
    "simulate_step",
    "nominal_rollout",
    "nat_radius",
    "recover_nat",
    "drc_input",
    "embed",
    "embed_inv",
    "embed_y",
    "resolve_params",
    "drc_ons_run",
    "drc_ons_unknown_run",
    "drc_comparator",
    "NominalInstance",
    "nominal_instance",
    "semi_ons_on_instance",
    "ldc_rollout",
    "static_conversion",
    "drc_from_markov",
    "closed_loop_markov",
    "fit_decay",
    "control_regret",
    "random_system",
    "stabilizing_gain",
]

ABORT_FACTOR = 1e6


# ---------------------------------------------------------------------------
# Systems, disturbances and losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Plant matrices ``(A, B, C)`` with static stabilizing feedback ``K``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        A, B, C, K = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (self.A, self.B, self.C, self.K))
        dx = A.shape[0]
        if A.shape != (dx, dx) or B.shape[0] != dx or C.shape[1] != dx or K.shape != (B.shape[1], C.shape[0]):
            raise InvalidInputError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape} K{K.shape}")
        for name, M in zip("ABCK", (A, B, C, K)):
            if not np.all(np.isfinite(M)):
                raise InvalidInputError(f"{name} has non-finite entries")
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        rho = numcore.spectral_radius_estimate(self.A_cl, 64)
        if not rho < 1:
            raise InvalidInputError(f"K does not stabilize the plant: spectral radius estimate {rho:.4g}")
        object.__setattr__(self, "rho_cl", rho)

    @property
    def dx(self):
        return self.A.shape[0]

    @property
    def du(self):
        return self.B.shape[1]

    @property
    def dy(self):
        return self.C.shape[0]

    @property
    def p(self):
        return self.dy + self.du

    @property
    def A_cl(self):
        return self.A + self.B @ self.K @ self.C

    def with_gain(self, K):
        return LinearSystem(self.A, self.B, self.C, K)


class DisturbanceGen:
    """Oblivious bounded disturbance sequences ``(w_t, e_t)``.

    Kinds: ``sinusoid``, ``sign-switch``, ``rademacher``, ``constant``,
    ``mixed`` (average of sinusoid and sign-switch), ``zero``. Every emitted
    vector satisfies ``||w_t|| <= w_max`` and ``||e_t|| <= e_max``.
    """

    KINDS = ("sinusoid", "sign-switch", "rademacher", "constant", "mixed", "zero")

    def __init__(self, kind="mixed", w_max=1.0, e_max=0.1, seed=0):
        if kind not in self.KINDS:
            raise InvalidInputError(f"unknown disturbance kind {kind!r}; choose from {self.KINDS}")
        if w_max < 0 or e_max < 0:
            raise InvalidInputError("amplitude bounds must be non-negative")
        self.kind = kind
        self.w_max = float(w_max)
        self.e_max = float(e_max)
        self.seed = int(seed)

    def _signal(self, kind, T, dim, bound, rng):
        if bound == 0 or dim == 0 or kind == "zero":
            return np.zeros((T, dim))
        t = np.arange(1, T + 1)[:, None]
        scale = bound / math.sqrt(dim)
        if kind == "sinusoid":
            amp = 0.5 + 0.5 * rng.uniform(dim)
            period = 8.0 + 56.0 * rng.uniform(dim)
            phase = 2 * np.pi * rng.uniform(dim)
            return scale * amp * np.sin(2 * np.pi * t / period + phase)
        if kind == "sign-switch":
            flip_prob = 1.0 / (16.0 + 112.0 * rng.uniform(dim))
            start = rng.rademacher(dim)
            flips = rng.uniform((T, dim)) < flip_prob
            flips[0] = False
            signs = start * np.where(np.cumsum(flips, axis=0) % 2 == 0, 1.0, -1.0)
            return scale * signs
        if kind == "rademacher":
            return scale * rng.rademacher((T, dim))
        if kind == "constant":
            d = rng.normal(dim)
            return np.tile(bound * d / np.linalg.norm(d), (T, 1))
        if kind == "mixed":
            return 0.5 * (self._signal("sinusoid", T, dim, bound, rng.spawn(1))
                          + self._signal("sign-switch", T, dim, bound, rng.spawn(2)))
        raise AssertionError(kind)

    def sample(self, T, dx, dy):
        """``(W, E)`` arrays of shape ``(T, dx)`` and ``(T, dy)``."""
        rng = numcore.Rng(self.seed, stream=(11,))
        W = self._signal(self.kind, T, dx, self.w_max, rng.spawn(0))
        E = self._signal(self.kind, T, dy, self.e_max, rng.spawn(1))
        return W, E

    def __repr__(self):
        return f"DisturbanceGen({self.kind!r}, w_max={self.w_max}, e_max={self.e_max}, seed={self.seed})"


class LossSequence:
    """Oblivious sequence of quadratic losses over ``v = (y, u)``.

    ``Qs`` is either one ``(p, p)`` matrix shared by every round or an array
    ``(T, p, p)``; ``gs`` likewise ``(p,)`` or ``(T, p)``.
    """

    def __init__(self, Qs, gs=None):
        Qs = np.asarray(Qs, dtype=float)
        self.shared = Qs.ndim == 2
        Qb = Qs[None] if self.shared else Qs
        p = Qb.shape[-1]
        if gs is None:
            gs = np.zeros(p)
        gs = np.asarray(gs, dtype=float)
        gb = gs[None] if gs.ndim == 1 else gs
        if not (np.all(np.isfinite(Qb)) and np.all(np.isfinite(gb))):
            raise InvalidInputError("loss sequence has non-finite entries")
        if np.max(np.abs(Qb - np.swapaxes(Qb, 1, 2))) > 1e-10 * max(1.0, np.max(np.abs(Qb))):
            raise InvalidInputError("loss curvature matrices must be symmetric")
        ev = np.linalg.eigvalsh(Qb)
        if ev.min() <= 0:
            raise InvalidInputError("loss curvature matrices must be positive definite")
        self.alpha = 2.0 * float(ev.min())
        self.smooth = 2.0 * float(ev.max())
        self.Qs = Qb
        self.gs = gb
        self.p = p
        self._cache = {} if self.shared and gb.shape[0] == 1 else None

    def __getitem__(self, t):
        iq = 0 if self.Qs.shape[0] == 1 else t
        ig = 0 if self.gs.shape[0] == 1 else t
        if self._cache is not None:
            loss = self._cache.get(0)
            if loss is None:
                loss = self._cache[0] = QuadLoss(self.Qs[0], self.gs[0], check=False)
            return loss
        return QuadLoss(self.Qs[iq], self.gs[ig], check=False)

    @classmethod
    def make(cls, kind, dy, du, T, seed=0, u_weight=1.0):
        """Standard loss families.

        ``identity``: ``||y||^2 + u_weight ||u||^2``. ``diag``: fixed random
        diagonal weights in ``[1, 2]``. ``varying``: per-round random diagonal
        weights in ``[1, 2]`` and small random targets.
        """
        p = dy + du
        base = np.concatenate([np.ones(dy), u_weight * np.ones(du)])
        if kind == "identity":
            return cls(np.diag(base))
        rng = numcore.Rng(seed, stream=(13,))
        if kind == "diag":
            return cls(np.diag(base * (1.0 + rng.uniform(p))))
        if kind == "varying":
            d = base * (1.0 + rng.uniform((T, p)))
            Qs = np.zeros((T, p, p))
            idx = np.arange(p)
            Qs[:, idx, idx] = d
            gs = 0.1 * (2 * rng.uniform((T, p)) - 1)
            return cls(Qs, gs)
        raise InvalidInputError(f"unknown loss kind {kind!r}")

    def values(self, V):
        """Loss of each row of ``V`` (shape ``(T, p)``) against rounds ``0..T-1``."""
        T = V.shape[0]
        Q = np.broadcast_to(self.Qs, (T, self.p, self.p)) if self.Qs.shape[0] == 1 else self.Qs[:T]
        g = np.broadcast_to(self.gs, (T, self.p)) if self.gs.shape[0] == 1 else self.gs[:T]
        R = V - g
        return np.einsum("tp,tpq,tq->t", R, Q, R)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass
class DrcPolicy:
    """Disturbance-response controller ``u_ex_t = sum_i M[i] y^K_{t-i}``."""

    blocks: np.ndarray  # (m, du, dy)
    R_M: float = math.inf

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.ndim != 3:
            raise InvalidInputError("DRC blocks must have shape (m, du, dy)")
        if self.l1_op > self.R_M * (1 + 1e-9):
            raise InvalidInputError(f"DRC policy norm {self.l1_op:.4g} exceeds budget {self.R_M:.4g}")

    @property
    def m(self):
        return self.blocks.shape[0]

    @property
    def l1_op(self):
        return float(sum(numcore.op_norm(M) for M in self.blocks))


@dataclass
class LdcPolicy:
    """Linear dynamic controller ``s+ = A s + B y``, ``u = C s + D y``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    name: str = "ldc"

    def __post_init__(self):
        self.A, self.B, self.C, self.D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (self.A, self.B, self.C, self.D))

    @classmethod
    def static(cls, K, name="static"):
        K = np.atleast_2d(np.asarray(K, dtype=float))
        du, dy = K.shape
        return cls(np.zeros((0, 0)), np.zeros((0, dy)), np.zeros((du, 0)), K, name=name)

    @property
    def d_state(self):
        return self.A.shape[0]


# ---------------------------------------------------------------------------
# Markov operators
# ---------------------------------------------------------------------------

def nominal_markov(sys, h):
    """Nominal Markov operator ``G_K`` truncated at ``h``.

    ``G[0] = [0; I]`` and ``G[i] = [C; K C] (A + B K C)^{i-1} B`` for ``i >= 1``.
    """
    if h < 1:
        raise InvalidInputError("h must be >= 1")
    dy, du = sys.dy, sys.du
    blocks = np.zeros((h + 1, dy + du, du))
    blocks[0, dy:, :] = np.eye(du)
    top = np.vstack([sys.C, sys.K @ sys.C])
    P = sys.B.copy()
    Acl = sys.A_cl
    for i in range(1, h + 1):
        blocks[i] = top @ P
        P = Acl @ P
    return MarkovOperator(blocks)


def closed_loop_markov(sys, pi, h):
    """Markov operator of the plant in feedback with LDC ``pi``, relative to ``K``.

    Blocks ``D_cl 1{i=0} + C_cl A_cl^{i-1} B_cl 1{i>0}`` with the
    closed-loop matrices of the static-feedback benchmark definition.
    """
    A, B, C, K = sys.A, sys.B, sys.C, sys.K
    dpi = pi.d_state
    Acl = np.block([[A + B @ pi.D @ C, B @ pi.C], [pi.B @ C, pi.A]]) if dpi else A + B @ pi.D @ C
    Bcl = np.block([[B @ pi.D, -B], [pi.B, np.zeros((dpi, sys.du))]]) if dpi else np.hstack([B @ pi.D, -B])
    Ccl = np.hstack([(pi.D - K) @ C, pi.C]) if dpi else (pi.D - K) @ C
    Dcl = np.hstack([pi.D, np.zeros((sys.du, sys.du))])
    blocks = [Dcl]
    P = Bcl
    for _ in range(h):
        blocks.append(Ccl @ P)
        P = Acl @ P
    return MarkovOperator(np.array(blocks))


def fit_decay(G):
    """Fit ``||G[i]||_op <= c rho^i``: least-squares slope of the log-norms, then the tightest ``c``."""
    n = G.block_norms
    idx = np.nonzero(n > 1e-300)[0]
    idx = idx[idx >= 1] if np.count_nonzero(idx >= 1) >= 2 else idx
    if len(idx) < 2:
        return float(n.max(initial=0.0)), 0.0
    slope = np.polyfit(idx, np.log(n[idx]), 1)[0]
    rho = float(min(math.exp(slope), 1.0))
    i = np.arange(len(n))
    with np.errstate(divide="ignore"):
        c = float(np.max(n / np.power(rho, i))) if rho > 0 else float(n[0])
    return c, rho


def static_conversion(sys, K_pi, h, *, form="printed"):
    """Conversion operator from feedback ``K`` to static target ``K_pi``.

    ``form="printed"`` evaluates::

        G[0] = K_pi,   G[i] = (K_pi - K) C (A + B K C)^{i-1} B (K_pi - K)

    ``form="exact"`` returns the operator that reproduces the ``K_pi`` loop
    when used as DRC weights on the nominal outputs::

        G[0] = K_pi - K,   G[i] = (K_pi - K) C (A + B K_pi C)^{i-1} B (K_pi - K)
    """
    K_pi = np.atleast_2d(np.asarray(K_pi, dtype=float))
    target = sys.with_gain(K_pi)  # validates that K_pi stabilizes
    Delta = K_pi - sys.K
    if form == "printed":
        first, Acl = K_pi, sys.A_cl
    elif form == "exact":
        first, Acl = Delta, target.A_cl
    else:
        raise InvalidInputError(f"unknown form {form!r}")
    blocks = [first]
    P = sys.B @ Delta
    for _ in range(h):
        blocks.append(Delta @ sys.C @ P)
        P = Acl @ P
    return MarkovOperator(np.array(blocks))


def drc_from_markov(G, m, R_M=math.inf):
    """DRC policy whose weights are the first ``m`` blocks of ``G``."""
    return DrcPolicy(np.array(G.truncated(m - 1).blocks), R_M)


# ---------------------------------------------------------------------------
# Simulation primitives
# ---------------------------------------------------------------------------

def simulate_step(sys, x, u, w, e):
    """``(x_next, y)`` with ``x_next = A x + B u + w`` and ``y = C x + e``."""
    return sys.A @ x + sys.B @ u + w, sys.C @ x + e


def nominal_rollout(sys, W, E):
    """Nominal iterates ``(y^K, u^K)`` under ``u = K y`` from ``x_1 = 0``."""
    T = W.shape[0]
    Y = np.empty((T, sys.dy))
    x = np.zeros(sys.dx)
    A, C, BK = sys.A, sys.C, sys.B @ sys.K
    for t in range(T):
        y = C @ x + E[t]
        Y[t] = y
        x = A @ x + BK @ y + W[t]
    return Y, Y @ sys.K.T


def nat_radius(sys, w_max, e_max, *, max_terms=100000):
    """Upper bound on ``||(y^K_t, u^K_t)||`` for disturbances bounded by ``(w_max, e_max)``."""
    Acl = sys.A_cl
    P = np.eye(sys.dx)
    S = 0.0
    for _ in range(max_terms):
        nrm = numcore.op_norm(P)
        S += nrm
        if nrm < 1e-14 * S:
            break
        P = Acl @ P
    kick = w_max + numcore.op_norm(sys.B @ sys.K) * e_max
    y_bound = numcore.op_norm(sys.C) * S * kick + e_max
    return math.sqrt(1.0 + numcore.op_norm(sys.K) ** 2) * y_bound


def recover_nat(G_hat, K, y_alg, u_ex_history):
    """Estimate ``(y^K_t, u^K_t)`` by subtracting the response to past exogenous inputs.

    ``u_ex_history`` is newest first: ``u_ex_history[0] = u_ex_{t-1}``. Only
    lags ``1..h`` of ``G_hat`` contribute.
    """
    y_alg = np.asarray(y_alg, dtype=float)
    v = np.concatenate([y_alg, K @ y_alg])
    for i in range(1, min(G_hat.h_len, len(u_ex_history)) + 1):
        v = v - G_hat[i] @ u_ex_history[i - 1]
    dy = y_alg.shape[0]
    return v[:dy], v[dy:]


def drc_input(M, y_hist):
    """``sum_i M[i] y_{t-i}`` for a newest-first window of nominal outputs (zero beyond)."""
    out = np.zeros(M.blocks.shape[1])
    for i in range(min(M.m, len(y_hist))):
        out += M.blocks[i] @ y_hist[i]
    return out


def embed(M):
    """Flatten DRC weights block-major, row-major within each block."""
    return np.asarray(M.blocks, dtype=float).reshape(-1).copy()


def embed_inv(z, m, du, dy, R_M=math.inf):
    """Inverse of :func:`embed`."""
    z = np.asarray(z, dtype=float)
    if z.shape != (m * du * dy,):
        raise InvalidInputError(f"expected vector of length {m * du * dy}, got shape {z.shape}")
    return DrcPolicy(z.reshape(m, du, dy).copy(), R_M)


def embed_y(y_hist, m, du):
    """Matrix ``Y_t`` with ``Y_t @ embed(M) == drc_input(M, y_hist)``.

    ``y_hist`` is newest first; missing entries are zero.
    """
    y_hist = np.asarray(y_hist, dtype=float)
    if y_hist.ndim == 1:
        y_hist = y_hist[None]
    dy = y_hist.shape[1]
    yw = np.zeros((m, dy))
    k = min(m, y_hist.shape[0])
    yw[:k] = y_hist[:k]
    return np.einsum("rs,ic->risc", np.eye(du), yw).reshape(du, m * du * dy)


# ---------------------------------------------------------------------------
# Parameters and results
# ---------------------------------------------------------------------------

@dataclass
class DrcParams:
    m: int
    h: int
    R_M: float
    eta: float
    lam: float
    N: int = 0

    @property
    def radius(self):
        """Radius of the Euclidean ball containing the embedded DRC class."""
        return math.sqrt(self.m) * self.R_M


def resolve_params(sys, losses, T, *, w_max, e_max, m=None, h=None, R_M=None, eta=None, lam=None,
                   N=0, eps_G=None, approximate=False, horizon_T=None):
    """Fill unspecified DRC-ONS parameters with their documented defaults.

    ``h`` and ``m`` default to ``ceil(log T / (1 - rho))`` with ``rho`` the
    closed-loop spectral-radius estimate; ``horizon_T`` replaces ``T`` in that
    formula so a sweep over horizons can share one parametrization. ``R_M`` defaults to
    ``(1 + ||K||) c / (1 - rho)`` with ``(c, rho)`` fitted to the nominal
    Markov operator. ``eta``/``lam`` follow the exact-mode defaults
    (``1/alpha``, ``6 h R_Y^2 R_G^2``) unless ``eps_G`` is given, in which
    case the approximate-mode defaults (``3/alpha``, ``T eps^2 + h R_G^2``).
    With ``approximate=True`` and no ``eps_G`` the unspecified ``eta``/``lam``
    stay ``None`` to be filled in once the estimation error is known.
    """
    rho = sys.rho_cl
    T_h = T if horizon_T is None else max(int(horizon_T), T)
    horizon = max(int(math.ceil(math.log(max(T_h, 2)) / (1.0 - rho))), 1)
    h = horizon if h is None else int(h)
    m = horizon if m is None else int(m)
    G = nominal_markov(sys, max(h, 1))
    R_G = max(1.0, G.l1_op)
    if R_M is None:
        c, rho_fit = fit_decay(G)
        rho_fit = min(max(rho_fit, rho), 0.999)
        R_M = (1.0 + numcore.op_norm(sys.K)) * c / (1.0 - rho_fit)
    R_nat = nat_radius(sys, w_max, e_max)
    R_Y = math.sqrt(m) * R_nat
    if approximate and eps_G is None:
        return DrcParams(m=m, h=h, R_M=float(R_M), eta=None if eta is None else float(eta),
                         lam=None if lam is None else float(lam), N=int(N))
    if eps_G is None:
        eta_d, lam_d = 1.0 / losses.alpha, 6.0 * h * R_Y**2 * R_G**2
    else:
        eta_d, lam_d = 3.0 / losses.alpha, T * eps_G**2 + h * R_G**2
    return DrcParams(m=m, h=h, R_M=float(R_M), eta=eta_d if eta is None else float(eta),
                     lam=max(lam_d, 1e-12) if lam is None else float(lam), N=int(N))


@dataclass
class Trajectory:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    u_ex: np.ndarray
    w: np.ndarray
    e: np.ndarray
    cost: np.ndarray
    y_hat: np.ndarray
    u_hat: np.ndarray

    @classmethod
    def empty(cls, T, dx, dy, du):
        z = np.zeros
        return cls(z((T + 1, dx)), z((T, dy)), z((T, du)), z((T, du)), z((T, dx)), z((T, dy)),
                   z(T), z((T, dy)), z((T, du)))

    @property
    def T(self):
        return self.cost.shape[0]

    def truncate(self, T):
        return Trajectory(self.x[: T + 1], self.y[:T], self.u[:T], self.u_ex[:T], self.w[:T], self.e[:T],
                          self.cost[:T], self.y_hat[:T], self.u_hat[:T])


@dataclass
class DrcRun:
    """Outcome of a DRC-ONS run."""

    trajectory: Trajectory
    ledger: RegretLedger
    summary: LedgerSummary
    params: DrcParams
    G_hat: MarkovOperator
    G_true: MarkovOperator
    control_cost: float
    comparators: dict
    control_reg: float
    eps_G: float = 0.0
    z_final: np.ndarray = None
    t_start: int = 0
    R_nat: float = 0.0
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

class _Plant:
    """Step-by-step plant simulation that records a :class:`Trajectory`."""

    def __init__(self, sys, W, E, losses, abort_norm):
        self.sys = sys
        T = W.shape[0]
        self.traj = Trajectory.empty(T, sys.dx, sys.dy, sys.du)
        self.traj.w[:] = W
        self.traj.e[:] = E
        self.losses = losses
        self.abort_norm = abort_norm
        self.t = 0
        self._x = np.zeros(sys.dx)

    def observe(self):
        y = self.sys.C @ self._x + self.traj.e[self.t]
        self.traj.y[self.t] = y
        return y

    def act(self, u_ex):
        t, s = self.t, self.sys
        y = self.traj.y[t]
        u = s.K @ y + u_ex
        tr = self.traj
        tr.u[t] = u
        tr.u_ex[t] = u_ex
        tr.cost[t] = self.losses[t](np.concatenate([y, u]))
        self._x = s.A @ self._x + s.B @ u + tr.w[t]
        tr.x[t + 1] = self._x
        nrm = math.sqrt(float(self._x @ self._x))
        if not nrm <= self.abort_norm:
            raise InstabilityError(
                f"state norm {nrm:.3e} exceeded abort threshold {self.abort_norm:.3e} at t={t + 1}",
                t=t + 1, state_norm=nrm, threshold=self.abort_norm)
        self.t = t + 1
        return u


def _disturbances(gen, sys, T):
    if isinstance(gen, DisturbanceGen):
        return gen.sample(T, sys.dx, sys.dy) + (gen.w_max, gen.e_max)
    W, E = (np.asarray(a, dtype=float) for a in gen)
    if W.shape[0] < T or E.shape[0] < T:
        raise InvalidInputError("disturbance arrays shorter than the horizon")
    W, E = W[:T], E[:T]
    return W, E, float(np.max(np.linalg.norm(W, axis=1), initial=0.0)), float(np.max(np.linalg.norm(E, axis=1), initial=0.0))


def drc_comparator(losses, yK, uK, G, m, radius, t_range=None):
    """Exact best fixed DRC policy in hindsight on the true nominal sequence.

    Returns ``(z_star, value, static_value)`` where ``value`` minimizes
    ``sum_t f_t`` over the ball and ``static_value = sum_t f_t(0)`` is the
    cost of pure static feedback over the same rounds.
    """
    T, dy = yK.shape
    du = uK.shape[1]
    h = G.h_len
    d = m * du * dy
    lo, hi = (0, T) if t_range is None else t_range
    ypad = np.vstack([np.zeros((m - 1, dy)), yK])
    Ys = np.zeros((T + h, du, d))
    for t in range(T):
        Ys[t + h] = embed_y(ypad[t: t + m][::-1], m, du)
    V = np.hstack([yK, uK])
    acc = QuadraticAccumulator(d)
    for t in range(lo, hi):
        acc.add(losses[t], V[t], G.apply_window(Ys[t: t + h + 1]))
    z, val = acc.minimize(radius)
    return z, val, acc.r


def control_regret(alg_cost, comparator_costs):
    """``alg_cost - min(comparator_costs)``; negative values are reported as is."""
    costs = list(comparator_costs.values()) if isinstance(comparator_costs, dict) else list(comparator_costs)
    if not costs:
        raise InvalidInputError("need at least one comparator cost")
    return float(alg_cost) - float(min(costs))


def _drc_phase(plant, t0, T, state, params, G_hat, G_true, vK, bufs, ledger, approximate, check_every):
    """DRC-ONS rounds ``t0..T-1``. ``bufs`` holds padded histories shared with earlier phases."""
    sys = plant.sys
    dy, du, m, h = sys.dy, sys.du, params.m, params.h
    K = sys.K
    uex_pad, yhat_pad, Y_pad, Z_pad, Yz_pad = (bufs[k] for k in ("uex", "yhat", "Y", "Z", "Yz"))
    traj = plant.traj
    # [G[h], ..., G[1]] so that a time-ordered window of past inputs lines up
    Gh_rest = np.concatenate(G_hat.blocks[:0:-1], axis=1) if h >= 1 else np.zeros((dy + du, 0))
    eye_du = np.eye(du)
    z_prev = state.z.copy()
    for t in range(t0, T):
        y = plant.observe()
        v_hat = np.concatenate([y, K @ y]) - Gh_rest @ uex_pad[t: t + h].reshape(-1)
        yhat_pad[t + m] = v_hat[:dy]
        traj.y_hat[t], traj.u_hat[t] = v_hat[:dy], v_hat[dy:]
        yw = yhat_pad[t + 1: t + m + 1][::-1]
        Y = np.einsum("rs,ic->risc", eye_du, yw).reshape(du, -1)
        Y_pad[t + h] = Y
        z = state.z
        u_ex = Y @ z
        if check_every and t % check_every == 0:
            ref = drc_input(DrcPolicy(z.reshape(m, du, dy)), yw)
            if np.max(np.abs(ref - u_ex), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(ref), initial=0.0)):
                raise AssertionError(f"Y_t identity violated at t={t + 1}")
        uex_pad[t + h] = u_ex
        Yz_pad[t + h] = u_ex
        plant.act(u_ex)
        loss = plant.losses[t]

        H = G_hat.apply_window(Y_pad[t: t + h + 1])
        H_true = H if G_true is G_hat else G_true.apply_window(Y_pad[t: t + h + 1])
        F = loss(vK[t] + G_true.apply_window(Yz_pad[t: t + h + 1]))
        f = loss(vK[t] + H_true @ z)
        dz = z - z_prev
        diffs = Z_pad[t + 1: t + h + 1] - Z_pad[t: t + h]
        adap = float(np.sum(np.linalg.norm(Y @ diffs.T, axis=0))) if h else 0.0
        ledger.record(F, f, math.sqrt(float(dz @ dz)), adap)
        ledger.accumulator.add(loss, vK[t], H_true)

        z_prev = z.copy()
        semi_ons_update(state, loss, v_hat, H)
        Z_pad[t + h + 2] = state.z


def _new_buffers(T, sys, params):
    dy, du, m, h = sys.dy, sys.du, params.m, params.h
    d = m * du * dy
    return {
        "uex": np.zeros((T + h, du)),
        "yhat": np.zeros((T + m, dy)),
        "Y": np.zeros((T + h, du, d)),
        "Z": np.zeros((T + h + 2, d)),
        "Yz": np.zeros((T + h, du)),
    }


def _finish(plant, ledger, params, G_hat, G_true, state, losses, yK, uK, t_start, R_nat, comparators, started,
            eps_G=0.0, extras=None):
    sys = plant.sys
    traj = plant.traj
    _, drc_val, static_val = drc_comparator(losses, yK, uK, G_true, params.m, params.radius)
    comps = {"drc_best": drc_val, "static_K": static_val}
    T = traj.T
    W, E = traj.w, traj.e
    for pi in comparators or ():
        comps[pi.name] = ldc_rollout(sys, pi, (W, E), losses, T)
    cost = math.fsum(traj.cost)
    if len(ledger):
        _, comp_val = ledger.accumulator.minimize(params.radius)
        summary = ledger_finalize(ledger, comp_val)
    else:
        summary = ledger_finalize(ledger, 0.0)
    return DrcRun(trajectory=traj, ledger=ledger, summary=summary, params=params, G_hat=G_hat, G_true=G_true,
                  control_cost=cost, comparators=comps, control_reg=control_regret(cost, comps), eps_G=eps_G,
                  z_final=state.z.copy(), t_start=t_start, R_nat=R_nat, wall_time=time.perf_counter() - started,
                  extras=extras or {})


def _check_nat(yK, uK, R_nat):
    peak = float(np.max(np.linalg.norm(np.hstack([yK, uK]), axis=1), initial=0.0))
    if peak > R_nat * (1 + 1e-9):
        raise AssertionError(f"nominal iterate norm {peak:.4g} exceeds computed bound {R_nat:.4g}")
    return peak


def drc_ons_run(sys, losses, gen, T, params=None, *, comparators=None, check_every=100, **overrides):
    """DRC-ONS with known dynamics.

    Parameters
    ----------
    sys : LinearSystem
    losses : LossSequence
    gen : DisturbanceGen or (W, E) arrays
    T : int
        Horizon.
    params : DrcParams, optional
        Fully resolved parameters; otherwise ``overrides`` (``m``, ``h``,
        ``R_M``, ``eta``, ``lam``) are merged with defaults.
    comparators : iterable of LdcPolicy, optional
        Extra benchmark policies rolled out on the same disturbances.

    Returns
    -------
    DrcRun
    """
    started = time.perf_counter()
    W, E, w_max, e_max = _disturbances(gen, sys, T)
    if params is None:
        params = resolve_params(sys, losses, T, w_max=w_max, e_max=e_max, **overrides)
    R_nat = nat_radius(sys, w_max, e_max)
    yK, uK = nominal_rollout(sys, W, E)
    _check_nat(yK, uK, R_nat)
    G = nominal_markov(sys, params.h)
    plant = _Plant(sys, W, E, losses, ABORT_FACTOR * max(R_nat, 1.0))
    d = params.m * sys.du * sys.dy
    state = semi_ons_init(d, params.eta, params.lam, params.radius, h=params.h)
    ledger = RegretLedger()
    ledger.accumulator = QuadraticAccumulator(d)
    bufs = _new_buffers(T, sys, params)
    _drc_phase(plant, 0, T, state, params, G, G, np.hstack([yK, uK]), bufs, ledger, False, check_every)
    return _finish(plant, ledger, params, G, G, state, losses, yK, uK, 0, R_nat, comparators, started)


def drc_ons_unknown_run(sys, losses, gen, T, params=None, *, seed=0, G_hat=None, comparators=None,
                        check_every=100, eps_G=None, **overrides):
    """DRC-ONS with an initial estimation phase.

    Rounds ``1..N`` play Gaussian exogenous inputs; the nominal Markov
    operator is then estimated by least squares, ``2h - 1`` rounds play
    ``u_ex = 0``, and approximate Semi-ONS runs on the remaining rounds with
    the estimate. Passing ``G_hat`` skips estimation (and, with ``N = 0``,
    the burn-in). Regret is accounted on exact losses built from the true
    ``G_K``.
    """
    from .estimation import LsProblem, least_squares_markov, markov_error

    started = time.perf_counter()
    W, E, w_max, e_max = _disturbances(gen, sys, T)
    if params is None:
        params = resolve_params(sys, losses, T, w_max=w_max, e_max=e_max, approximate=True, **overrides)
    N, h = params.N, params.h
    if N >= T:
        raise InvalidInputError(f"exploration length N={N} must be below the horizon T={T}")
    R_nat = nat_radius(sys, w_max, e_max)
    yK, uK = nominal_rollout(sys, W, E)
    _check_nat(yK, uK, R_nat)
    G_true = nominal_markov(sys, h)
    plant = _Plant(sys, W, E, losses, ABORT_FACTOR * max(R_nat, 1.0))
    bufs = _new_buffers(T, sys, params)
    rng = numcore.Rng(seed, stream=(17,))
    for t in range(N):
        plant.observe()
        u_ex = rng.normal(sys.du)
        bufs["uex"][t + h] = u_ex
        plant.act(u_ex)
    traj = plant.traj
    if G_hat is None:
        # lag-0 block is known ([0; I]); regress what remains on lags 1..h
        prob = LsProblem(h, traj.u_ex[:N], np.hstack([traj.y[:N], traj.u[:N] - traj.u_ex[:N]]))
        G_hat = least_squares_markov(prob)
    elif G_hat.h_len != h:
        G_hat = G_hat.truncated(h)
    err = markov_error(G_hat, G_true)
    # nominal estimates for the exploration rounds, needed by the first DRC windows
    Gh_rest = np.concatenate(G_hat.blocks[:0:-1], axis=1) if h >= 1 else np.zeros((sys.p, 0))
    for t in range(N):
        y = traj.y[t]
        v_hat = np.concatenate([y, sys.K @ y]) - Gh_rest @ bufs["uex"][t: t + h].reshape(-1)
        bufs["yhat"][t + params.m] = v_hat[:sys.dy]
        traj.y_hat[t], traj.u_hat[t] = v_hat[:sys.dy], v_hat[sys.dy:]
    t0 = N + 2 * h - 1 if N > 0 else 0
    t0 = min(t0, T)
    # burn-in: zero exogenous input, keep tracking the nominal estimates and Y_t
    for t in range(N, t0):
        y = plant.observe()
        v_hat = np.concatenate([y, sys.K @ y]) - Gh_rest @ bufs["uex"][t: t + h].reshape(-1)
        bufs["yhat"][t + params.m] = v_hat[:sys.dy]
        traj.y_hat[t], traj.u_hat[t] = v_hat[:sys.dy], v_hat[sys.dy:]
        yw = bufs["yhat"][t + 1: t + params.m + 1][::-1]
        bufs["Y"][t + h] = embed_y(yw, params.m, sys.du)
        plant.act(np.zeros(sys.du))
    if eps_G is None:
        eps_G = err
    if params.eta is None:
        params.eta = 3.0 / losses.alpha
    if params.lam is None:
        params.lam = max(T * eps_G**2 + h * max(1.0, G_true.l1_op) ** 2, 1e-12)
    d = params.m * sys.du * sys.dy
    state = semi_ons_init(d, params.eta, params.lam, params.radius, h=h)
    ledger = RegretLedger()
    ledger.accumulator = QuadraticAccumulator(d)
    _drc_phase(plant, t0, T, state, params, G_hat, G_true, np.hstack([yK, uK]), bufs, ledger, True, check_every)
    return _finish(plant, ledger, params, G_hat, G_true, state, losses, yK, uK, t0, R_nat, comparators, started,
                   eps_G=err, extras={"eps_G_used": eps_G})


@dataclass
class NominalInstance:
    """Affine-memory instance induced by the nominal rollout.

    ``V[t] = (y^K_t, u^K_t)``; ``Ys[t + h]`` is the DRC context ``Y_t`` built
    from true nominal outputs (rows ``0..h-1`` are the zero padding).
    """

    V: np.ndarray
    Ys: np.ndarray
    G: MarkovOperator
    m: int

    @property
    def T(self):
        return self.V.shape[0]


def nominal_instance(sys, W, E, h, m):
    yK, uK = nominal_rollout(sys, W, E)
    T = yK.shape[0]
    ypad = np.vstack([np.zeros((m - 1, sys.dy)), yK])
    Ys = np.zeros((T + h, sys.du, m * sys.du * sys.dy))
    for t in range(T):
        Ys[t + h] = embed_y(ypad[t: t + m][::-1], m, sys.du)
    return NominalInstance(np.hstack([yK, uK]), Ys, nominal_markov(sys, h), m)


def semi_ons_on_instance(inst, losses, *, eta, lam, radius, G_hat=None, V_hat=None):
    """Semi-ONS on a fixed instance, optionally fed a perturbed operator and offsets.

    The learner sees ``(G_hat, V_hat)``; regret is accounted on the true
    ``(inst.G, inst.V)``. Returns a :class:`LedgerSummary`.
    """
    G = inst.G
    G_hat = G if G_hat is None else G_hat
    V_hat = inst.V if V_hat is None else V_hat
    T, h = inst.T, G.h_len
    d = inst.Ys.shape[2]
    du = inst.Ys.shape[1]
    state = semi_ons_init(d, eta, lam, radius, h=h)
    Yz = np.zeros((T + h, du))
    Zp = np.zeros((T + h + 2, d))
    ledger = RegretLedger()
    acc = QuadraticAccumulator(d)
    z_prev = state.z.copy()
    for t in range(T):
        win = inst.Ys[t: t + h + 1]
        Y = inst.Ys[t + h]
        z = state.z
        Yz[t + h] = Y @ z
        loss = losses[t]
        H = G.apply_window(win)
        F = loss(inst.V[t] + G.apply_window(Yz[t: t + h + 1]))
        f = loss(inst.V[t] + H @ z)
        diffs = Zp[t + 1: t + h + 1] - Zp[t: t + h]
        adap = float(np.sum(np.linalg.norm(Y @ diffs.T, axis=0))) if h else 0.0
        dz = z - z_prev
        ledger.record(F, f, math.sqrt(float(dz @ dz)), adap)
        acc.add(loss, inst.V[t], H)
        z_prev = z.copy()
        semi_ons_update(state, loss, V_hat[t], H if G_hat is G else G_hat.apply_window(win))
        Zp[t + h + 2] = state.z
    _, comp = acc.minimize(radius)
    return ledger_finalize(ledger, comp)


# ---------------------------------------------------------------------------
# Benchmark rollouts
# ---------------------------------------------------------------------------

def ldc_rollout(sys, pi, gen, losses, T, *, return_trajectory=False):
    """Total cost of LDC ``pi`` in closed loop with the plant on the given disturbances."""
    W, E, w_max, e_max = _disturbances(gen, sys, T)
    x = np.zeros(sys.dx)
    s = np.zeros(pi.d_state)
    Ys = np.empty((T, sys.dy))
    Us = np.empty((T, sys.du))
    thresh = ABORT_FACTOR * max(nat_radius(sys, w_max, e_max), 1.0)
    for t in range(T):
        y = sys.C @ x + E[t]
        u = pi.C @ s + pi.D @ y
        Ys[t], Us[t] = y, u
        x = sys.A @ x + sys.B @ u + W[t]
        s = pi.A @ s + pi.B @ y
        if not np.linalg.norm(x) <= thresh:
            raise InstabilityError(f"LDC {pi.name!r} diverged at t={t + 1}", t=t + 1,
                                   state_norm=float(np.linalg.norm(x)), threshold=thresh)
    total = float(math.fsum(losses.values(np.hstack([Ys, Us]))))
    if return_trajectory:
        return total, Ys, Us
    return total


# ---------------------------------------------------------------------------
# Instance generators
# ---------------------------------------------------------------------------

def stabilizing_gain(A, B, C, *, seed=0, max_iter=400):
    """Static output-feedback gain reducing the closed-loop spectral radius.

    Nelder-Mead on ``max |eig(A + B K C)|`` started from ``K = 0``. The
    returned gain is stabilizing whenever the search finds one.
    """
    from scipy.optimize import minimize

    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    du, dy = B.shape[1], C.shape[0]

    def radius(k):
        return float(np.max(np.abs(np.linalg.eigvals(A + B @ k.reshape(du, dy) @ C))))

    res = minimize(radius, np.zeros(du * dy), method="Nelder-Mead",
                   options={"maxiter": max_iter, "xatol": 1e-6, "fatol": 1e-8})
    K = res.x.reshape(du, dy)
    if radius(K) >= 1:
        raise InvalidInputError("could not find a stabilizing static output-feedback gain")
    return K


def random_system(dx, du, dy, seed, *, rho_open=0.9, shrink_to=None, gain="computed"):
    """Random plant with open-loop spectral radius ``rho_open`` and a stabilizing gain.

    ``gain="computed"`` runs :func:`stabilizing_gain`, ``"zero"`` uses ``K = 0``,
    ``"random"`` draws a random gain scaled to keep the loop stable.
    """
    rng = numcore.Rng(seed, stream=(19,))
    A = rng.normal((dx, dx))
    A *= rho_open / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    B = rng.normal((dx, du)) / math.sqrt(dx)
    C = rng.normal((dy, dx)) / math.sqrt(dx)
    if gain == "zero":
        K = np.zeros((du, dy))
    elif gain == "computed":
        K = stabilizing_gain(A, B, C)
    elif gain == "random":
        K = rng.normal((du, dy))
        for _ in range(60):
            if np.max(np.abs(np.linalg.eigvals(A + B @ K @ C))) < 0.97:
                break
            K *= 0.7
        else:
            K = np.zeros((du, dy))
    else:
        raise InvalidInputError(f"unknown gain mode {gain!r}")
    return LinearSystem(A, B, C, K)
