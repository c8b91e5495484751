"""Hot numeric kernels with optional numba acceleration.

Every kernel has a pure-numpy implementation; when numba is importable and
``ESBM_DISABLE_NUMBA`` is unset, an ``@njit`` version is compiled and used
instead.  ``benchmarks/bench_kernels.py`` times both paths.  The two paths
must agree to float64 rounding; tests compare them directly.
"""

from __future__ import annotations

import math
import os

import numpy as np

USE_NUMBA = os.environ.get("ESBM_DISABLE_NUMBA", "") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit, set_num_threads
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if USE_NUMBA and os.environ.get("ESBM_THREADS"):
    try:
        set_num_threads(max(1, int(os.environ["ESBM_THREADS"])))
    except ValueError:
        pass


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _rbf_energy_grad_np(points, centroids, lambdas, omega, eps, alpha_exp):
    """Manifold energy and gradient at a batch of points.

    points (P, D), centroids (Nc, D), lambdas (Nc,), omega (Nc, D) holding
    per-coordinate mixture weights.  Returns (U (P,), grad (P, D)).
    """
    diff = points[:, None, :] - centroids[None, :, :]          # (P, Nc, D)
    sq = np.sum(diff * diff, axis=2)                           # (P, Nc)
    phi = np.exp(-0.5 * lambdas[None, :] * sq)                 # (P, Nc)
    h = phi @ omega                                            # (P, D) = h_j per coordinate
    hp = h + eps
    m = hp ** (-alpha_exp)                                     # (P, D)
    u = np.sum(np.log(m + eps), axis=1)                        # (P,)
    # dU/dh_j = -alpha * hp^(-alpha-1) / (m + eps)
    du_dh = -alpha_exp * hp ** (-alpha_exp - 1.0) / (m + eps)  # (P, D)
    # dh_j/dx = sum_m omega[m,j] * phi_m * (-lambda_m) * (x - c_m)
    w = phi * lambdas[None, :]                                 # (P, Nc)
    coef = w[:, :, None] * diff                                # (P, Nc, D) = lambda*phi*(x-c)
    # grad_x U = sum_j du_dh[j] * (-1) * sum_m omega[m,j]*coef[m]
    grad = -np.einsum("pnd,nj,pj->pd", coef, omega, du_dh)
    return u, grad


def _rbf_h_np(points, centroids, lambdas, omega):
    """h values (P, D) for a fitted manifold."""
    diff = points[:, None, :] - centroids[None, :, :]
    sq = np.sum(diff * diff, axis=2)
    phi = np.exp(-0.5 * lambdas[None, :] * sq)
    return phi @ omega


def _pairwise_sq_dists_np(x, y):
    """Squared Euclidean distances between rows of x (N, D) and y (M, D)."""
    xn = np.sum(x * x, axis=1)
    yn = np.sum(y * y, axis=1)
    d = xn[:, None] + yn[None, :] - 2.0 * (x @ y.T)
    np.maximum(d, 0.0, out=d)
    return d


def _double_well_np(x, a, b):
    """U = a(x0^2-1)^2 + b/2 * sum_{j>0} xj^2 on rows of x (P, D)."""
    x0 = x[:, 0]
    rest = x[:, 1:]
    u = a * (x0 * x0 - 1.0) ** 2 + 0.5 * b * np.sum(rest * rest, axis=1)
    grad = np.empty_like(x)
    grad[:, 0] = 4.0 * a * x0 * (x0 * x0 - 1.0)
    grad[:, 1:] = b * rest
    return u, grad


_MB_A = np.array([-200.0, -100.0, -170.0, 15.0])
_MB_a = np.array([-1.0, -1.0, -6.5, 0.7])
_MB_b = np.array([0.0, 0.0, 11.0, 0.6])
_MB_c = np.array([-10.0, -10.0, -6.5, 0.7])
_MB_x0 = np.array([1.0, 0.0, -0.5, -1.0])
_MB_y0 = np.array([0.0, 0.5, 1.5, 1.0])


def _muller_brown_np(x):
    """Four-Gaussian Muller-Brown surface on rows of x (P, 2)."""
    dx = x[:, 0:1] - _MB_x0[None, :]
    dy = x[:, 1:2] - _MB_y0[None, :]
    e = _MB_A[None, :] * np.exp(
        _MB_a[None, :] * dx * dx + _MB_b[None, :] * dx * dy + _MB_c[None, :] * dy * dy
    )
    u = np.sum(e, axis=1)
    grad = np.empty_like(x)
    grad[:, 0] = np.sum(e * (2.0 * _MB_a[None, :] * dx + _MB_b[None, :] * dy), axis=1)
    grad[:, 1] = np.sum(e * (_MB_b[None, :] * dx + 2.0 * _MB_c[None, :] * dy), axis=1)
    return u, grad


# ---------------------------------------------------------------------------
# numba versions
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _rbf_energy_grad_nb(points, centroids, lambdas, omega, eps, alpha_exp):
        p, dim = points.shape
        nc = centroids.shape[0]
        u = np.zeros(p)
        grad = np.zeros((p, dim))
        for i in range(p):
            phi = np.empty(nc)
            for m in range(nc):
                sq = 0.0
                for j in range(dim):
                    t = points[i, j] - centroids[m, j]
                    sq += t * t
                phi[m] = math.exp(-0.5 * lambdas[m] * sq)
            for j in range(dim):
                h = 0.0
                for m in range(nc):
                    h += omega[m, j] * phi[m]
                hp = h + eps
                mj = hp ** (-alpha_exp)
                u[i] += math.log(mj + eps)
                du_dh = -alpha_exp * hp ** (-alpha_exp - 1.0) / (mj + eps)
                for m in range(nc):
                    c = omega[m, j] * phi[m] * lambdas[m]
                    for k in range(dim):
                        grad[i, k] -= du_dh * c * (points[i, k] - centroids[m, k])
        return u, grad

    @njit(cache=True)
    def _rbf_h_nb(points, centroids, lambdas, omega):
        p, dim = points.shape
        nc = centroids.shape[0]
        out = np.zeros((p, dim))
        for i in range(p):
            for m in range(nc):
                sq = 0.0
                for j in range(dim):
                    t = points[i, j] - centroids[m, j]
                    sq += t * t
                phi = math.exp(-0.5 * lambdas[m] * sq)
                for j in range(dim):
                    out[i, j] += omega[m, j] * phi
        return out

    @njit(cache=True)
    def _pairwise_sq_dists_nb(x, y):
        n, dim = x.shape
        m = y.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(dim):
                    t = x[i, k] - y[j, k]
                    s += t * t
                out[i, j] = s
        return out

    @njit(cache=True)
    def _double_well_nb(x, a, b):
        p, dim = x.shape
        u = np.empty(p)
        grad = np.empty((p, dim))
        for i in range(p):
            x0 = x[i, 0]
            q = x0 * x0 - 1.0
            acc = a * q * q
            grad[i, 0] = 4.0 * a * x0 * q
            for j in range(1, dim):
                acc += 0.5 * b * x[i, j] * x[i, j]
                grad[i, j] = b * x[i, j]
            u[i] = acc
        return u, grad

    @njit(cache=True)
    def _muller_brown_nb(x):
        p = x.shape[0]
        u = np.zeros(p)
        grad = np.zeros((p, 2))
        amp = np.array([-200.0, -100.0, -170.0, 15.0])
        ca = np.array([-1.0, -1.0, -6.5, 0.7])
        cb = np.array([0.0, 0.0, 11.0, 0.6])
        cc = np.array([-10.0, -10.0, -6.5, 0.7])
        cx = np.array([1.0, 0.0, -0.5, -1.0])
        cy = np.array([0.0, 0.5, 1.5, 1.0])
        for i in range(p):
            for k in range(4):
                dx = x[i, 0] - cx[k]
                dy = x[i, 1] - cy[k]
                e = amp[k] * math.exp(ca[k] * dx * dx + cb[k] * dx * dy + cc[k] * dy * dy)
                u[i] += e
                grad[i, 0] += e * (2.0 * ca[k] * dx + cb[k] * dy)
                grad[i, 1] += e * (cb[k] * dx + 2.0 * cc[k] * dy)
        return u, grad

    rbf_energy_grad = _rbf_energy_grad_nb
    rbf_h = _rbf_h_nb
    pairwise_sq_dists = _pairwise_sq_dists_nb
    double_well = _double_well_nb
    muller_brown = _muller_brown_nb
else:
    rbf_energy_grad = _rbf_energy_grad_np
    rbf_h = _rbf_h_np
    pairwise_sq_dists = _pairwise_sq_dists_np
    double_well = _double_well_np
    muller_brown = _muller_brown_np
