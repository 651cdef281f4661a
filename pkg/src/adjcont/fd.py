"""Finite-difference helpers shared by the assembler and the test oracles."""

import numpy as np

EPS = np.finfo(float).eps
CBRT_EPS = EPS ** (1.0 / 3.0)


def fd_step(x):
    """Central-difference step ``cbrt(eps) * max(1, |x|)`` (elementwise)."""
    return CBRT_EPS * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def central_jacobian(fun, x, h=None):
    """Dense central-difference Jacobian of ``fun`` at ``x``.

    Parameters
    ----------
    fun : callable
        Maps a 1-d array to a 1-d array.
    x : array_like
        Evaluation point.
    h : array_like, optional
        Per-coordinate steps. Defaults to :func:`fd_step`.
    """
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    f0 = np.atleast_1d(fun(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        J[:, j] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * h[j])
    return J


def richardson_derivative(fun, x0, delta):
    """Richardson-extrapolated central difference of a scalar/vector function.

    Combines central differences at ``delta`` and ``2*delta`` so the
    truncation error is O(delta^4).
    """
    d1 = (np.asarray(fun(x0 + delta)) - np.asarray(fun(x0 - delta))) / (2 * delta)
    d2 = (np.asarray(fun(x0 + 2 * delta)) - np.asarray(fun(x0 - 2 * delta))) / (4 * delta)
    return (4 * d1 - d2) / 3
