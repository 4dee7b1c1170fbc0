from __future__ import print_function
from builtins import range

import numpy as np

EPS = np.finfo(float).eps


def first_order_step(x):
    """Central-difference step for first derivatives: sqrt(eps) * max(1, |x|)."""
    return np.sqrt(EPS) * np.maximum(1.0, np.abs(x))


def second_order_step(x):
    """Central-difference step for second derivatives: cbrt(eps) * max(1, |x|)."""
    return np.cbrt(EPS) * np.maximum(1.0, np.abs(x))


def eval_numerical_jacobian(f, x, h=None):
    """
    A naive central-difference Jacobian of a vector function.

    Inputs:
    - f: function taking a 1-D numpy array and returning a 1-D numpy array
    - x: point to differentiate at; it is perturbed in place and restored
    - h: optional scalar or per-entry step; defaults to first_order_step(x)

    Returns:
    - J: dense array of shape (m, n)
    """
    x = np.array(x, dtype=float)
    if h is None:
        h = first_order_step(x)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    fx = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.zeros((fx.size, x.size))
    for ix in range(x.size):
        oldval = x[ix]
        x[ix] = oldval + h[ix]
        pos = np.atleast_1d(np.asarray(f(x), dtype=float)).copy()
        x[ix] = oldval - h[ix]
        neg = np.atleast_1d(np.asarray(f(x), dtype=float)).copy()
        x[ix] = oldval
        J[:, ix] = (pos - neg) / (2.0 * h[ix])
    return J


def eval_numerical_gradient(f, x, h=None):
    """Central-difference gradient of a scalar function."""
    return eval_numerical_jacobian(lambda v: np.atleast_1d(f(v)), x, h=h)[0]


def eval_numerical_hessian(grad_f, x, h=None):
    """
    Hessian by central differences of an analytic gradient.

    The result is symmetrized, since the two triangles carry independent
    truncation error.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = second_order_step(x)
    H = eval_numerical_jacobian(grad_f, x, h=h)
    return 0.5 * (H + H.T)


def rel_error(x, y):
    """Largest elementwise relative error, as used for backward-pass checks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.max(np.abs(x - y) / np.maximum(1e-8, np.abs(x) + np.abs(y)))


def within_tolerance(analytic, numeric, atol, rtol):
    """
    True when every entry satisfies |a - n| <= max(atol, rtol * |n|).
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    bound = np.maximum(atol, rtol * np.abs(numeric))
    return bool(np.all(np.abs(analytic - numeric) <= bound))


def jacobian_check_sparse(f, x, analytic_jac, num_checks=10, h=None, seed=0,
                          verbose=False):
    """
    Compare a few randomly chosen Jacobian columns against central
    differences and return the worst absolute deviation.
    """
    x = np.array(x, dtype=float)
    analytic_jac = np.asarray(analytic_jac.todense() if hasattr(analytic_jac, 'todense')
                              else analytic_jac)
    rng = np.random.default_rng(seed)
    if h is None:
        h = first_order_step(x)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    worst = 0.0
    for _ in range(num_checks):
        ix = int(rng.integers(x.size))
        oldval = x[ix]
        x[ix] = oldval + h[ix]
        fxph = np.asarray(f(x), dtype=float).copy()
        x[ix] = oldval - h[ix]
        fxmh = np.asarray(f(x), dtype=float).copy()
        x[ix] = oldval

        col_numerical = (fxph - fxmh) / (2.0 * h[ix])
        col_analytic = np.asarray(analytic_jac[:, ix]).ravel()
        err = np.max(np.abs(col_numerical - col_analytic))
        worst = max(worst, err)
        if verbose:
            print('column %d: max abs deviation %e, relative error: %e'
                  % (ix, err, rel_error(col_numerical, col_analytic)))
    return worst
