"""Dense linear-algebra kernels and seeded sampling.

Everything here works on small dense ``numpy`` arrays. The routines are the
building blocks of the optimizer and control loops, so argument checking is
kept to what is cheap: finiteness and shape.
"""

import math

import numpy as np
from scipy.linalg import lapack

from .errors import InvalidInputError, NumericError

__all__ = [
    "Rng",
    "spd_solve",
    "cholesky",
    "cho_solve",
    "proj_weighted_ball",
    "op_norm",
    "spectral_radius_estimate",
    "eig_min_sym",
]

_TWO_POW_53 = float(2**53)


def _as_finite(name, a, ndim=None):
    a = np.asarray(a, dtype=float)
    if ndim is not None and a.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


# ---------------------------------------------------------------------------
# SPD solves
# ---------------------------------------------------------------------------

def cholesky(L):
    """Lower Cholesky factor of ``L``.

    Raises
    ------
    NumericError
        If a pivot is not positive. The message names the failing pivot.
    """
    c, info = lapack.dpotrf(L, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NumericError(f"Cholesky factorization failed: leading minor {info} is not positive definite")
    if info < 0:
        raise InvalidInputError(f"illegal argument {-info} passed to dpotrf")
    return c


def cho_solve(c, b):
    """Solve ``L x = b`` given the lower Cholesky factor ``c`` of ``L``."""
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise NumericError(f"triangular solve failed (info={info})")
    return x


def spd_solve(L, b):
    """Solve ``L x = b`` for symmetric positive-definite ``L``.

    A fresh Cholesky factorization is computed on every call.

    Parameters
    ----------
    L : array_like, shape (n, n)
        Symmetric positive-definite matrix.
    b : array_like, shape (n,)
        Right-hand side.

    Returns
    -------
    numpy.ndarray, shape (n,)
    """
    L = _as_finite("L", L, ndim=2)
    b = _as_finite("b", b, ndim=1)
    n = L.shape[0]
    if L.shape != (n, n) or b.shape != (n,):
        raise InvalidInputError(f"shape mismatch: L {L.shape}, b {b.shape}")
    return cho_solve(cholesky(L), b)


# ---------------------------------------------------------------------------
# Projection onto a Euclidean ball in a weighted norm
# ---------------------------------------------------------------------------

def _ball_kkt(lam, c, radius, tol, max_iter, mu_hi):
    """Multiplier ``mu >= 0`` with ``|| c / (lam + mu) || = radius``.

    ``c`` is already expressed in the eigenbasis and pre-multiplied so that the
    candidate point for multiplier ``mu`` is ``c / (lam + mu)``. Newton steps
    on ``1/||x(mu)|| - 1/radius`` (increasing and concave in ``mu``) are
    safeguarded by a bisection bracket ``[0, mu_hi]``.
    """
    c2 = c * c
    lo, hi = 0.0, mu_hi
    mu = 0.0 if np.all(lam[c2 > 0] > 0) else 0.5 * hi
    for _ in range(max_iter):
        den = lam + mu
        x2 = c2 / (den * den)
        nrm = math.sqrt(float(x2.sum()))
        if nrm > radius:
            lo = mu
        else:
            hi = mu
        if abs(nrm - radius) <= tol * radius or hi - lo <= 1e-15 * max(hi, 1.0):
            break
        dphi = float(np.sum(x2 / den)) / nrm**3
        step = mu - (1.0 / nrm - 1.0 / radius) / dphi
        mu = step if lo < step < hi else 0.5 * (lo + hi)
    return mu


def _on_sphere(x, radius):
    """Pull a KKT point with norm marginally above ``radius`` back onto the ball."""
    nrm = math.sqrt(float(x @ x))
    return x * (radius / nrm) if nrm > radius else x


def proj_weighted_ball(L, z_tilde, radius, *, tol=1e-9, max_iter=200):
    """Project ``z_tilde`` onto ``{z : ||z|| <= radius}`` in the ``L``-weighted norm.

    Minimizes ``||L^{1/2} (z_tilde - z)||`` over the Euclidean ball. Interior
    points are returned unchanged. Otherwise the KKT point
    ``z(mu) = (L + mu I)^{-1} L z_tilde`` is located by bisection on ``mu``
    over ``[0, ||L||_op ||z_tilde|| / radius]`` (safeguarded Newton); the
    returned point is always feasible.
    """
    if not radius > 0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    z_tilde = np.asarray(z_tilde, dtype=float)
    nrm = math.sqrt(float(z_tilde @ z_tilde))
    if nrm <= radius:
        return z_tilde.copy()
    L = np.asarray(L, dtype=float)
    lam, V = np.linalg.eigh(L)
    if lam[0] <= 0:
        raise NumericError(f"weight matrix is not positive definite (min eigenvalue {lam[0]:.3e})")
    c = lam * (V.T @ z_tilde)
    mu = _ball_kkt(lam, c, radius, tol, max_iter, lam[-1] * nrm / radius)
    return _on_sphere(V @ (c / (lam + mu)), radius)


def min_quadratic_on_ball(P, q, radius, *, tol=1e-9, max_iter=200, psd_tol=1e-8):
    """Minimize ``z^T P z - 2 q^T z`` over ``||z|| <= radius``.

    ``P`` is symmetric PSD. When the unconstrained problem has a flat subspace
    the minimum-norm minimizer is returned. Returns the minimizer ``z``.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (P + P.T))
    scale = max(1.0, abs(lam[-1]))
    if lam[0] < -psd_tol * scale:
        raise NumericError(f"quadratic is indefinite (min eigenvalue {lam[0]:.3e})")
    lam = np.maximum(lam, 0.0)
    c = V.T @ q
    flat = lam <= 1e-12 * scale
    coef = np.where(flat, 0.0, c / np.where(flat, 1.0, lam))
    if math.sqrt(float(coef @ coef)) <= radius:
        return V @ coef
    # constrained: (P + mu I) z = q with ||z|| = radius
    mu_hi = math.sqrt(float(c @ c)) / radius
    mu = _ball_kkt(lam, c, radius, tol, max_iter, mu_hi)
    return _on_sphere(V @ (c / (lam + mu)), radius)


# ---------------------------------------------------------------------------
# Norms and spectra
# ---------------------------------------------------------------------------

def op_norm(M):
    """Largest singular value of ``M`` (spectral norm)."""
    M = _as_finite("M", M)
    if M.size == 0:
        return 0.0
    if M.ndim < 2:
        return float(np.linalg.norm(M))
    return float(np.linalg.norm(M, 2))


def spectral_radius_estimate(M, n_power=64):
    """Estimate the spectral radius as ``||M^n||_op^{1/n}``.

    The estimate is biased upward (Gelfand's formula). If entries of the
    running power exceed ``1e150`` the matrix is reported unstable by
    returning ``inf``.
    """
    M = _as_finite("M", M, ndim=2)
    if M.shape[0] != M.shape[1]:
        raise InvalidInputError(f"M must be square, got {M.shape}")
    if n_power < 1:
        raise InvalidInputError("n_power must be >= 1")
    P = M.copy()
    for _ in range(n_power - 1):
        P = P @ M
        if np.max(np.abs(P)) > 1e150:
            return math.inf
    nrm = np.linalg.norm(P, 2)
    if nrm == 0.0:
        return 0.0
    return float(math.exp(math.log(nrm) / n_power))


def eig_min_sym(S, *, sym_tol=1e-8):
    """Smallest eigenvalue of a symmetric matrix."""
    S = _as_finite("S", S, ndim=2)
    if S.shape[0] != S.shape[1]:
        raise InvalidInputError(f"S must be square, got {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S))))
    if np.max(np.abs(S - S.T)) > sym_tol * scale:
        raise InvalidInputError("S is not symmetric")
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


# ---------------------------------------------------------------------------
# Seeded sampling
# ---------------------------------------------------------------------------

class Rng:
    """Counter-based random stream.

    Draws come from the Philox counter-based bit generator, so a given
    ``(seed, stream)`` pair reproduces the same samples on any platform.
    Gaussians use the Box-Muller transform; Rademacher signs take the low bit
    of a raw draw.

    Parameters
    ----------
    seed : int
        64-bit seed.
    stream : int or tuple of int, optional
        Sub-stream key. Different keys give statistically independent streams
        from the same seed.
    """

    def __init__(self, seed, stream=()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._bits = np.random.Philox(ss)

    def spawn(self, *key):
        """Independent child stream identified by ``key``."""
        return Rng(self.seed, self.stream + tuple(key))

    def _raw(self, n):
        return self._bits.random_raw(n)

    def uniform(self, size=None):
        """Uniform draws on ``[0, 1)`` with 53 bits of resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(float) / _TWO_POW_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        """Standard Gaussian draws (Box-Muller)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - (self._raw(m) >> np.uint64(11)).astype(float) / _TWO_POW_53  # in (0, 1]
        u2 = (self._raw(m) >> np.uint64(11)).astype(float) / _TWO_POW_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        out = out[:n]
        return float(out[0]) if size is None else out.reshape(size)

    def rademacher(self, size=None):
        """Uniform signs in ``{-1, +1}``."""
        n = 1 if size is None else int(np.prod(size))
        bits = (self._raw(n) & np.uint64(1)).astype(float)
        s = 2.0 * bits - 1.0
        return float(s[0]) if size is None else s.reshape(size)
