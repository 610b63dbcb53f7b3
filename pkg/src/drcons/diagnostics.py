"""Randomized numerical checks of the structural inequalities and kernels.

Each check takes ``(seed, n)`` and returns ``[(metric_name, value), ...]``
with one entry per random instance. Pass/fail thresholds live with the
callers (acceptance suite, CLI).
"""

import math

import numpy as np

from . import control, numcore, ocoam

__all__ = ["kappa_margins", "covariance_gaps", "gradcheck_errors", "projection_gaps", "CHECKS",
           "random_kernel", "covariance_instance"]


def _horizon(rho, tol=1e-13, cap=4000):
    if rho <= 0:
        return 1
    return int(min(cap, max(1, math.ceil(math.log(tol) / math.log(rho)))))


def kappa_margins(seed, n=20, grid_points=512):
    """``kappa_lower_bound(G_K) - min(1, ||K||^-2) / 4`` over random stabilized systems."""
    rng = numcore.Rng(seed, stream=(41,))
    out = []
    for i in range(n):
        dx = 2 + int(4 * rng.uniform())
        du = 1 + int(2 * rng.uniform())
        dy = 1 + int(3 * rng.uniform())
        mode = ("computed", "random")[i % 2]
        sys = control.random_system(dx, du, dy, seed=seed * 1000 + i, rho_open=0.6 + 0.5 * rng.uniform(),
                                    gain=mode)
        G = control.nominal_markov(sys, _horizon(sys.rho_cl))
        bound = 0.25 * min(1.0, numcore.op_norm(sys.K) ** -2) if numcore.op_norm(sys.K) > 0 else 0.25
        out.append(("kappa_margin", ocoam.kappa_lower_bound(G, grid_points) - bound))
    return out


def random_kernel(rng, p=3, d_in=2, length=24):
    """Decaying random Markov operator with an identity-like leading block."""
    rho = 0.3 + 0.5 * rng.uniform()
    blocks = rng.normal((length, p, d_in)) / math.sqrt(p)
    blocks *= (rho ** np.arange(length))[:, None, None]
    blocks[0, p - d_in:, :] += np.eye(d_in)
    return ocoam.MarkovOperator(blocks)


def covariance_instance(rng, G, T, h, d, style):
    """Sequence ``Y_{1-h}, ..., Y_T`` of ``(d_in, d)`` matrices in one of several styles."""
    n = T + h
    d_in = G.d_in
    if style == "gaussian":
        return rng.normal((n, d_in, d))
    if style == "constant":
        return np.broadcast_to(rng.normal((d_in, d)), (n, d_in, d)).copy()
    if style == "rank-one":
        a = rng.normal((n, d_in))
        b = rng.normal(d)
        return a[:, :, None] * b[None, None, :]
    if style == "worst-frequency":
        # excite the least-invertible frequency of the transfer function
        grid = 512
        Z = np.fft.fft(G.blocks, n=grid, axis=0)
        _, s, Vh = np.linalg.svd(Z)
        k = int(np.argmin(s[:, -1]))
        theta = 2 * np.pi * k / grid
        v = Vh[k, -1].conj()
        s_idx = np.arange(n)
        phase = np.exp(1j * theta * s_idx)[:, None]
        u = np.real(phase * v[None, :])            # (n, d_in)
        b = rng.normal(d)
        return u[:, :, None] * b[None, None, :]
    raise ValueError(style)


STYLES = ("gaussian", "constant", "rank-one", "worst-frequency")


def covariance_gaps(seed, n=30, T=200, h=8, d=4):
    """Smallest eigenvalue of the covariance-domination matrix on random instances."""
    rng = numcore.Rng(seed, stream=(43,))
    out = []
    for i in range(n):
        G = random_kernel(rng)
        Ys = covariance_instance(rng, G, T, h, d, STYLES[i % len(STYLES)])
        Gh = G.truncated(h)
        H = [Gh.apply_window(Ys[s: s + h + 1]) for s in range(T)]
        R_Y = max(numcore.op_norm(Y) for Y in Ys)
        R_G = max(1.0, G.l1_op)
        kappa = ocoam.kappa_lower_bound(G, 512)
        gap = ocoam.covariance_domination_gap(H, list(Ys), kappa, h, R_G * R_Y, T, G=G, R_G=R_G)
        out.append(("covariance_gap", gap))
    return out


def gradcheck_errors(seed, n=50):
    """Relative error of :func:`ocoam.unary_grad` against central differences."""
    rng = numcore.Rng(seed, stream=(47,))
    out = []
    for _ in range(n):
        p = 1 + int(4 * rng.uniform())
        d = 1 + int(6 * rng.uniform())
        A = rng.normal((p, p))
        Q = A @ A.T + 0.1 * np.eye(p)
        loss = ocoam.QuadLoss(Q, rng.normal(p))
        H = rng.normal((p, d))
        v = rng.normal(p)
        z = rng.normal(d)
        g = ocoam.unary_grad(loss, v, H, z)
        fd = np.empty(d)
        for j in range(d):
            step = 1e-6 * max(1.0, abs(z[j]))
            e = np.zeros(d)
            e[j] = step
            fd[j] = (ocoam.unary_eval(loss, v, H, z + e) - ocoam.unary_eval(loss, v, H, z - e)) / (2 * step)
        out.append(("grad_rel_err", float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-8))))
    return out


def projection_gaps(seed, n=20, resolution=1e-3):
    """Objective of :func:`numcore.proj_weighted_ball` minus a grid-search minimum (``d = 2``)."""
    rng = numcore.Rng(seed, stream=(53,))
    out = []
    for _ in range(n):
        A = rng.normal((2, 2))
        L = A @ A.T + 0.05 * np.eye(2)
        radius = 0.5 + rng.uniform()
        z_t = rng.normal(2) * (1.0 + 2.0 * rng.uniform())
        z = numcore.proj_weighted_ball(L, z_t, radius)
        obj = float((z_t - z) @ L @ (z_t - z))
        xs = np.arange(-radius, radius + resolution / 2, resolution)
        X, Yg = np.meshgrid(xs, xs, indexing="ij")
        inside = X * X + Yg * Yg <= radius * radius
        P = np.stack([X[inside], Yg[inside]], axis=1) - z_t
        grid_min = float(np.min(np.einsum("ni,ij,nj->n", P, L, P)))
        infeasible = max(0.0, float(np.linalg.norm(z)) - radius)
        out.append(("projection_gap", obj - grid_min + infeasible))
    return out


CHECKS = {
    "kappa": kappa_margins,
    "covariance": covariance_gaps,
    "gradcheck": gradcheck_errors,
    "projection": projection_gaps,
}
