"""
Primal-dual interior-point method for

    min f(x)  s.t.  c_E(x) = 0,  c_I(x) <= 0,  lower <= x <= upper.

Inequalities get slacks s > 0 (c_I + s = 0) and every finite bound gets a log
barrier. Each iteration solves the reduced primal-dual system

    [ W + Sigma_x + dw I   J_E^T      J_I^T          ] [dx  ]
    [ J_E                 -dc I       0              ] [dy_E] = rhs
    [ J_I                  0         -S/V - dc I     ] [dy_I]

with a sparse LU factorization, globalized by backtracking on an l1 merit
function. Regularization dw is chosen by a curvature test on the computed step
instead of an inertia count.

The solver options follow the config-dict convention:

config format:
- kkt_tolerance: termination tolerance on all four KKT residuals
- max_iterations: iteration limit
- mu_init: initial barrier parameter
- mu_sigma: barrier reduction factor
- kappa_eps: barrier subproblem tolerance factor
- tau_min: lower bound of the fraction-to-boundary parameter
- bound_push: relative push of the initial point into the bounds
- delta_w_init, delta_w_max: first and largest Hessian regularization
- delta_c: constraint regularization used when the KKT matrix is singular
- armijo, backtrack, alpha_min: line-search parameters
- stagnation_window: iterations without primal progress before declaring
  local infeasibility
- obj_scaling_max_gradient: gradient-based scaling target
- debug_interior: assert strict interiority at every iteration
- iteration_log: optional text stream receiving one line per iteration
- warm_start_margin, warm_mu_init: used for specs prepared by warm_start
"""
from __future__ import print_function, division
from builtins import range
from builtins import object
import dataclasses
import logging
import time

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from flotempc import autodiff as ad
from flotempc.errors import InputError, LayoutError, PropagationError

logger = logging.getLogger(__name__)


OPTIMAL = 'optimal'
MAX_ITER = 'max_iter'
INFEASIBLE = 'infeasible'
NUMERICAL_FAILURE = 'numerical_failure'

_KAPPA_SIGMA = 1e10
_CURVATURE_MIN = 1e-10


def default_options(config=None):
    if config is None: config = {}
    config.setdefault('kkt_tolerance', 1e-8)
    config.setdefault('max_iterations', 200)
    config.setdefault('mu_init', 0.1)
    config.setdefault('mu_sigma', 0.2)
    config.setdefault('kappa_eps', 10.0)
    config.setdefault('tau_min', 0.99)
    config.setdefault('bound_push', 1e-2)
    config.setdefault('delta_w_init', 1e-4)
    config.setdefault('delta_w_max', 1e40)
    config.setdefault('delta_c', 1e-8)
    config.setdefault('armijo', 1e-4)
    config.setdefault('backtrack', 0.5)
    config.setdefault('alpha_min', 1e-12)
    config.setdefault('stagnation_window', 20)
    config.setdefault('obj_scaling_max_gradient', 100.0)
    config.setdefault('debug_interior', False)
    config.setdefault('iteration_log', None)
    config.setdefault('warm_start_margin', 1e-6)
    config.setdefault('warm_mu_init', 1e-5)
    if not config['kkt_tolerance'] > 0:
        raise InputError('kkt_tolerance must be positive')
    if config['max_iterations'] < 1:
        raise InputError('max_iterations must be at least 1')
    return config


@dataclasses.dataclass(eq=False)
class NlpSpec(object):
    """
    A nonlinear program. Functions take a 1-D array of length n.

    - objective(x) -> float; gradient(x) -> (n,)
    - eq_constraints(x) -> (m_eq,); eq_jacobian(x) -> sparse (m_eq, n)
    - ineq_constraints(x) -> (m_ineq,), feasible when <= 0; ineq_jacobian
    - hessian(x, obj_factor, y_eq, y_ineq) -> sparse (n, n) Lagrangian Hessian

    Missing derivative callbacks are produced by forward-mode autodiff, which
    requires the functions to be written with flotempc.autodiff arithmetic.
    `blocks` is an optional list of (variables, equality rows, inequality rows)
    index triples used to order the KKT matrix.
    """
    n: int
    x0: np.ndarray
    objective: object
    lower: np.ndarray = None
    upper: np.ndarray = None
    gradient: object = None
    eq_constraints: object = None
    eq_jacobian: object = None
    ineq_constraints: object = None
    ineq_jacobian: object = None
    hessian: object = None
    m_eq: int = None
    m_ineq: int = None
    y_eq0: np.ndarray = None
    y_ineq0: np.ndarray = None
    z_lower0: np.ndarray = None
    z_upper0: np.ndarray = None
    blocks: list = None
    warm: bool = False
    name: str = 'nlp'

    def __post_init__(self):
        self.x0 = np.array(self.x0, dtype=float).reshape(-1)
        if self.x0.shape != (self.n,):
            raise LayoutError('x0 has length %d, expected %d' % (self.x0.size, self.n))
        self.lower = (np.full(self.n, -np.inf) if self.lower is None
                      else np.array(self.lower, dtype=float))
        self.upper = (np.full(self.n, np.inf) if self.upper is None
                      else np.array(self.upper, dtype=float))
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise LayoutError('bound vectors must have length %d' % self.n)
        if np.any(self.lower > self.upper):
            raise InputError('lower bound exceeds upper bound at index %d'
                             % int(np.nonzero(self.lower > self.upper)[0][0]))
        if self.m_eq is None:
            self.m_eq = (0 if self.eq_constraints is None
                         else int(np.size(ad.value_of(self.eq_constraints(self.x0)))))
        if self.m_ineq is None:
            self.m_ineq = (0 if self.ineq_constraints is None
                           else int(np.size(ad.value_of(self.ineq_constraints(self.x0)))))

    # Evaluation with autodiff fallbacks

    def eval_objective(self, x):
        return float(ad.value_of(self.objective(x)))

    def eval_gradient(self, x):
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        return ad.gradient(self.objective, x)

    def eval_eq(self, x):
        if self.m_eq == 0:
            return np.zeros(0)
        return np.asarray(ad.value_of(self.eq_constraints(x)), dtype=float).reshape(-1)

    def eval_ineq(self, x):
        if self.m_ineq == 0:
            return np.zeros(0)
        return np.asarray(ad.value_of(self.ineq_constraints(x)), dtype=float).reshape(-1)

    def eval_eq_jacobian(self, x):
        if self.m_eq == 0:
            return sparse.csr_matrix((0, self.n))
        if self.eq_jacobian is not None:
            return sparse.csr_matrix(self.eq_jacobian(x))
        return ad.jacobian(self.eq_constraints, x)

    def eval_ineq_jacobian(self, x):
        if self.m_ineq == 0:
            return sparse.csr_matrix((0, self.n))
        if self.ineq_jacobian is not None:
            return sparse.csr_matrix(self.ineq_jacobian(x))
        return ad.jacobian(self.ineq_constraints, x)

    def eval_hessian(self, x, obj_factor, y_eq, y_ineq):
        if self.hessian is not None:
            return sparse.csr_matrix(self.hessian(x, obj_factor, y_eq, y_ineq))
        funcs = []
        if self.m_eq:
            funcs.append(self.eq_constraints)
        if self.m_ineq:
            funcs.append(self.ineq_constraints)
        constraints = None
        if funcs:
            def constraints(v):
                return ad.concatenate([f(v) for f in funcs], axis=0)
        lam = np.concatenate([np.asarray(y_eq, dtype=float),
                              np.asarray(y_ineq, dtype=float)])
        return ad.hessian_of_lagrangian(self.objective, constraints, x, lam,
                                        obj_factor=obj_factor)


@dataclasses.dataclass(eq=False)
class KktResiduals(object):
    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float

    def max(self):
        return max(self.stationarity, self.primal_feasibility,
                   self.dual_feasibility, self.complementarity)

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(eq=False)
class SolveResult(object):
    status: str
    x: np.ndarray
    y_eq: np.ndarray
    y_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    kkt_residuals: KktResiduals
    iterations: int
    wall_time: float
    objective: float = float('nan')
    inequality_slack: np.ndarray = None
    message: str = ''
    diagnostics: dict = dataclasses.field(default_factory=dict)

    @property
    def success(self):
        return self.status == OPTIMAL


##############################################################################
# KKT residuals
##############################################################################


def _residuals(grad, J_E, J_I, c_E, c_I, x, lower, upper, y_E, y_I, z_L, z_U):
    has_L = np.isfinite(lower)
    has_U = np.isfinite(upper)
    r = grad - z_L + z_U
    if c_E.size:
        r = r + J_E.T.dot(y_E)
    if c_I.size:
        r = r + J_I.T.dot(y_I)
    stationarity = float(np.max(np.abs(r))) if r.size else 0.0

    viol = [np.abs(c_E), np.maximum(c_I, 0.0),
            np.maximum((lower - x)[has_L], 0.0), np.maximum((x - upper)[has_U], 0.0)]
    primal = max([float(np.max(v)) if v.size else 0.0 for v in viol])

    neg = [np.maximum(-y_I, 0.0), np.maximum(-z_L, 0.0), np.maximum(-z_U, 0.0)]
    dual = max([float(np.max(v)) if v.size else 0.0 for v in neg])

    comp = [np.abs(y_I * c_I), np.abs(z_L[has_L] * (x - lower)[has_L]),
            np.abs(z_U[has_U] * (upper - x)[has_U])]
    complementarity = max([float(np.max(v)) if v.size else 0.0 for v in comp])
    return KktResiduals(stationarity, primal, dual, complementarity)


def kkt_residual(spec, x, y_eq=None, y_ineq=None, z_lower=None, z_upper=None):
    """
    The four KKT residual norms (infinity norms) of `spec` at a primal point
    and multipliers. Missing multipliers are taken as zero.

    - stationarity: |grad f + J_E^T y_E + J_I^T y_I - z_L + z_U|
    - primal feasibility: equality violation, positive part of c_I, bound
      violation
    - dual feasibility: negative parts of y_I, z_L, z_U
    - complementarity: |y_I * c_I|, |z_L * (x - l)|, |z_U * (u - x)|
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise LayoutError('primal point has length %d, expected %d' % (x.size, spec.n))

    def _vec(v, size, name):
        if v is None:
            return np.zeros(size)
        v = np.asarray(v, dtype=float)
        if v.shape != (size,):
            raise LayoutError('%s has length %d, expected %d' % (name, v.size, size))
        return v

    y_E = _vec(y_eq, spec.m_eq, 'y_eq')
    y_I = _vec(y_ineq, spec.m_ineq, 'y_ineq')
    z_L = _vec(z_lower, spec.n, 'z_lower')
    z_U = _vec(z_upper, spec.n, 'z_upper')
    return _residuals(spec.eval_gradient(x), spec.eval_eq_jacobian(x),
                      spec.eval_ineq_jacobian(x), spec.eval_eq(x), spec.eval_ineq(x),
                      x, spec.lower, spec.upper, y_E, y_I, z_L, z_U)


##############################################################################
# Warm start
##############################################################################


def push_interior(x, lower, upper, margin):
    """
    Clamp x strictly inside [lower, upper]: by margin * (upper - lower) for
    two-sided bounds and margin * max(1, |bound|) for one-sided ones.
    """
    x = np.array(x, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    has_L = np.isfinite(lower)
    has_U = np.isfinite(upper)
    both = has_L & has_U
    with np.errstate(invalid='ignore'):
        width = np.where(both, upper - lower, np.inf)
        p_L = np.minimum(margin * np.maximum(1.0, np.abs(lower)), margin * width)
        p_U = np.minimum(margin * np.maximum(1.0, np.abs(upper)), margin * width)
    x[has_L] = np.maximum(x[has_L], lower[has_L] + p_L[has_L])
    x[has_U] = np.minimum(x[has_U], upper[has_U] - p_U[has_U])
    return x


def warm_start(spec, previous, x_guess=None, y_eq=None, y_ineq=None, config=None):
    """
    Prepare a warm-started copy of `spec`.

    Inputs:
    - spec: NlpSpec to be solved
    - previous: SolveResult of a related solve (status optimal or max_iter)
    - x_guess: primal guess (for example a shifted previous solution); defaults
      to previous.x
    - y_eq, y_ineq: multiplier guesses; default to the previous multipliers
    - config: solver options; warm_start_margin is used

    Returns an NlpSpec whose initial point lies strictly inside the bounds and
    which carries the multipliers.
    """
    config = default_options(dict(config or {}))
    if previous.status not in (OPTIMAL, MAX_ITER):
        raise InputError('cannot warm start from a solve with status %r'
                         % previous.status)
    x = previous.x if x_guess is None else x_guess
    x = push_interior(x, spec.lower, spec.upper, config['warm_start_margin'])
    y_eq = previous.y_eq if y_eq is None else y_eq
    y_ineq = previous.y_ineq if y_ineq is None else y_ineq
    if np.size(y_eq) != spec.m_eq or np.size(y_ineq) != spec.m_ineq:
        raise LayoutError('warm-start multipliers do not match the constraint counts')
    return dataclasses.replace(spec, x0=x, y_eq0=np.array(y_eq, dtype=float),
                               y_ineq0=np.array(y_ineq, dtype=float),
                               z_lower0=np.array(previous.z_lower, dtype=float),
                               z_upper0=np.array(previous.z_upper, dtype=float),
                               warm=True)


##############################################################################
# Scaled problem
##############################################################################


class _ScaledProblem(object):
    """Gradient-based scaling of objective and constraint rows."""

    def __init__(self, spec, x, max_gradient):
        self.spec = spec
        g = spec.eval_gradient(x)
        gmax = np.max(np.abs(g)) if g.size else 0.0
        self.obj_scale = min(1.0, max_gradient / gmax) if gmax > 0 else 1.0
        self.eq_scale = self._row_scales(spec.eval_eq_jacobian(x), max_gradient)
        self.ineq_scale = self._row_scales(spec.eval_ineq_jacobian(x), max_gradient)
        self._D_E = sparse.diags(self.eq_scale)
        self._D_I = sparse.diags(self.ineq_scale)

    @staticmethod
    def _row_scales(J, max_gradient):
        if J.shape[0] == 0:
            return np.ones(0)
        row_max = np.asarray(abs(J).max(axis=1).todense()).reshape(-1)
        scale = np.ones(J.shape[0])
        big = row_max > max_gradient
        scale[big] = max_gradient / row_max[big]
        return scale

    def first_order(self, x):
        s = self.spec
        f = s.eval_objective(x) * self.obj_scale
        g = s.eval_gradient(x) * self.obj_scale
        c_E = s.eval_eq(x) * self.eq_scale
        c_I = s.eval_ineq(x) * self.ineq_scale
        J_E = (self._D_E @ s.eval_eq_jacobian(x)).tocsr()
        J_I = (self._D_I @ s.eval_ineq_jacobian(x)).tocsr()
        return f, g, c_E, c_I, J_E, J_I

    def values(self, x):
        s = self.spec
        return (s.eval_objective(x) * self.obj_scale, s.eval_eq(x) * self.eq_scale,
                s.eval_ineq(x) * self.ineq_scale)

    def hessian(self, x, y_E, y_I):
        return self.spec.eval_hessian(x, self.obj_scale, y_E * self.eq_scale,
                                      y_I * self.ineq_scale)

    def unscale_multipliers(self, y_E, y_I, z_L, z_U):
        f = self.obj_scale
        return (y_E * self.eq_scale / f, y_I * self.ineq_scale / f, z_L / f, z_U / f)

    def unscaled_residuals(self, g, J_E, J_I, c_E, c_I, x, lower, upper,
                           y_E, y_I, z_L, z_U):
        """KKT residuals of the original problem from scaled quantities."""
        inv_E = sparse.diags(1.0 / self.eq_scale)
        inv_I = sparse.diags(1.0 / self.ineq_scale)
        uy_E, uy_I, uz_L, uz_U = self.unscale_multipliers(y_E, y_I, z_L, z_U)
        return _residuals(g / self.obj_scale, (inv_E @ J_E).tocsr(), (inv_I @ J_I).tocsr(),
                          c_E / self.eq_scale, c_I / self.ineq_scale, x, lower, upper,
                          uy_E, uy_I, uz_L, uz_U)

    def scale_multipliers(self, y_E, y_I, z_L, z_U):
        f = self.obj_scale
        return (y_E * f / self.eq_scale, y_I * f / self.ineq_scale, z_L * f, z_U * f)


def _kkt_permutation(blocks, n, m_E, m_I):
    order = []
    for var, eq, ineq in blocks:
        order.extend([np.asarray(var, dtype=np.int64),
                      n + np.asarray(eq, dtype=np.int64),
                      n + m_E + np.asarray(ineq, dtype=np.int64)])
    order = np.concatenate(order) if order else np.zeros(0, dtype=np.int64)
    total = n + m_E + m_I
    seen = np.zeros(total, dtype=bool)
    seen[order] = True
    if seen.sum() != order.size:
        raise LayoutError('KKT blocks list an index more than once')
    return np.concatenate([order, np.nonzero(~seen)[0]])


def _kkt_matrix(W, sigma_x, delta_w, J_E, J_I, sigma_s_inv, delta_c):
    n = W.shape[0]
    top = W + sparse.diags(sigma_x + delta_w)
    rows = [[top]]
    if J_E.shape[0]:
        rows[0].append(J_E.T)
    if J_I.shape[0]:
        rows[0].append(J_I.T)
    if J_E.shape[0]:
        row = [J_E, sparse.diags(np.full(J_E.shape[0], -delta_c))]
        if J_I.shape[0]:
            row.append(None)
        rows.append(row)
    if J_I.shape[0]:
        row = [J_I]
        if J_E.shape[0]:
            row.append(None)
        row.append(sparse.diags(-(sigma_s_inv + delta_c)))
        rows.append(row)
    K = sparse.bmat(rows, format='csc') if len(rows) > 1 else sparse.csc_matrix(top)
    assert K.shape == (n + J_E.shape[0] + J_I.shape[0],) * 2
    return K


def _fraction_to_boundary(values, steps, tau):
    """Largest alpha in (0, 1] with values + alpha * steps >= (1 - tau) * values."""
    neg = steps < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * values[neg] / steps[neg])))


##############################################################################
# Main loop
##############################################################################


def solve(spec, config=None):
    """
    Solve an NlpSpec with the primal-dual interior-point method.

    Inputs:
    - spec: NlpSpec
    - config: dictionary of solver options (see module docstring)

    Returns a SolveResult. Solver outcomes are reported through its status and
    never raised; the KKT residuals are those of the original (unscaled) problem.
    """
    config = default_options(config)
    start = time.perf_counter()
    tol = config['kkt_tolerance']
    log = config['iteration_log']
    n, m_E, m_I = spec.n, spec.m_eq, spec.m_ineq

    lower, upper = spec.lower.copy(), spec.upper.copy()
    fixed = lower == upper
    if np.any(fixed):
        relax = 1e-8 * np.maximum(1.0, np.abs(lower[fixed]))
        lower[fixed] -= relax
        upper[fixed] += relax
    has_L = np.isfinite(lower)
    has_U = np.isfinite(upper)

    if spec.warm:
        mu = config['warm_mu_init']
        x = push_interior(spec.x0, lower, upper, config['warm_start_margin'])
    else:
        mu = config['mu_init']
        x = push_interior(spec.x0, lower, upper, config['bound_push'])

    diagnostics = {}

    def finish(status, x, y_E, y_I, z_L, z_U, resid, iters, message, f=None):
        uy_E, uy_I, uz_L, uz_U = problem.unscale_multipliers(y_E, y_I, z_L, z_U)
        obj = spec.eval_objective(x) if f is None else f
        try:
            slack = -spec.eval_ineq(x)
        except (PropagationError, FloatingPointError, ValueError):
            slack = None
        result = SolveResult(status=status, x=x.copy(), y_eq=uy_E, y_ineq=uy_I,
                             z_lower=uz_L, z_upper=uz_U, kkt_residuals=resid,
                             iterations=iters, wall_time=time.perf_counter() - start,
                             objective=obj, inequality_slack=slack, message=message,
                             diagnostics=diagnostics)
        logger.debug('%s: %s after %d iterations (%.3f s): %s', spec.name, status,
                     iters, result.wall_time, message)
        return result

    nan_resid = KktResiduals(np.inf, np.inf, np.inf, np.inf)
    try:
        problem = _ScaledProblem(spec, x, config['obj_scaling_max_gradient'])
        f, g, c_E, c_I, J_E, J_I = problem.first_order(x)
    except (PropagationError, FloatingPointError) as e:
        problem = _IdentityScaling(m_E, m_I)
        diagnostics['function'] = 'initial evaluation'
        return finish(NUMERICAL_FAILURE, x, np.zeros(m_E), np.zeros(m_I), np.zeros(n),
                      np.zeros(n), nan_resid, 0, str(e), f=float('nan'))
    if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(c_E))
            and np.all(np.isfinite(c_I))):
        diagnostics['function'] = _first_nonfinite(f, g, c_E, c_I)
        return finish(NUMERICAL_FAILURE, x, np.zeros(m_E), np.zeros(m_I), np.zeros(n),
                      np.zeros(n), nan_resid, 0,
                      'non-finite value in %s at the initial point'
                      % diagnostics['function'], f=float('nan'))

    # Slacks and multipliers.
    push_s = config['warm_start_margin'] if spec.warm else config['bound_push']
    s = np.maximum(-c_I, push_s * np.maximum(1.0, np.abs(c_I)))
    gap_L = np.where(has_L, x - lower, 1.0)
    gap_U = np.where(has_U, upper - x, 1.0)
    if spec.warm and spec.y_eq0 is not None:
        y_E, y_I, z_L, z_U = problem.scale_multipliers(
            spec.y_eq0, spec.y_ineq0,
            spec.z_lower0 if spec.z_lower0 is not None else np.zeros(n),
            spec.z_upper0 if spec.z_upper0 is not None else np.zeros(n))
        floor = config['warm_mu_init']
        y_I = np.maximum(y_I, floor)
        z_L = np.where(has_L, np.maximum(z_L, floor), 0.0)
        z_U = np.where(has_U, np.maximum(z_U, floor), 0.0)
    else:
        y_E = np.zeros(m_E)
        y_I = mu / s
        z_L = np.where(has_L, mu / gap_L, 0.0)
        z_U = np.where(has_U, mu / gap_U, 0.0)
    v = y_I.copy()

    # complementarity of the original problem scales with 1 / obj_scale
    mu_min = tol * problem.obj_scale / 10.0
    nu = 0.0
    delta_w_last = 0.0
    delta_w_floor = 0.0
    theta_history = []
    ls_failures = 0
    W = None
    window = config['stagnation_window']

    if log is not None:
        log.write('iter    objective    inf_pr   inf_du  lg(mu)   ||d||  lg(rg) '
                  'alpha_du alpha_pr ls\n')

    iteration = 0
    resid = problem.unscaled_residuals(g, J_E, J_I, c_E, c_I, x, lower, upper,
                                       y_E, y_I, z_L, z_U)
    while True:
        gap_L = np.where(has_L, x - lower, 1.0)
        gap_U = np.where(has_U, upper - x, 1.0)
        if config['debug_interior']:
            assert np.all(s > 0), 'slack left the interior'
            assert np.all(gap_L[has_L] > 0) and np.all(gap_U[has_U] > 0), \
                'iterate left the bounds'
            assert np.all(v > 0) and np.all(z_L[has_L] > 0) and np.all(z_U[has_U] > 0)

        resid = problem.unscaled_residuals(g, J_E, J_I, c_E, c_I, x, lower, upper,
                                           y_E, y_I, z_L, z_U)
        if resid.max() <= tol:
            return finish(OPTIMAL, x, y_E, y_I, z_L, z_U, resid, iteration,
                          'KKT tolerance reached')
        if iteration >= config['max_iterations']:
            return finish(MAX_ITER, x, y_E, y_I, z_L, z_U, resid, iteration,
                          'iteration limit reached')

        theta = _primal_infeasibility(c_E, c_I, s)
        theta_history.append(theta)
        if _stagnated(theta_history, window, tol):
            diagnostics['primal_infeasibility'] = theta
            return finish(INFEASIBLE, x, y_E, y_I, z_L, z_U, resid, iteration,
                          'primal infeasibility stagnated at %.3e' % theta)

        # Barrier update.
        def barrier_error(mu):
            return max(_stationarity(g, J_E, J_I, y_E, y_I, z_L, z_U),
                       float(np.max(np.abs(y_I - v))) if m_I else 0.0, theta,
                       _centrality(s, v, gap_L, gap_U, z_L, z_U, has_L, has_U, mu))
        for _ in range(50):
            if mu <= mu_min or barrier_error(mu) > config['kappa_eps'] * mu:
                break
            mu = max(mu_min, config['mu_sigma'] * mu)

        try:
            W = problem.hessian(x, y_E, y_I)
        except PropagationError as e:
            diagnostics['function'] = 'hessian'
            return finish(NUMERICAL_FAILURE, x, y_E, y_I, z_L, z_U, resid, iteration,
                          str(e))

        sigma_x = np.where(has_L, z_L / gap_L, 0.0) + np.where(has_U, z_U / gap_U, 0.0)
        sigma_s = v / s
        grad_barrier = (g - np.where(has_L, mu / gap_L, 0.0)
                        + np.where(has_U, mu / gap_U, 0.0))
        r_x = grad_barrier.copy()
        if m_E:
            r_x += J_E.T.dot(y_E)
        if m_I:
            r_x += J_I.T.dot(y_I)
        rhs = np.concatenate([-r_x, -c_E,
                              -(c_I + s) - (mu / s - y_I) / sigma_s])

        step = _regularized_step(W, sigma_x, sigma_s, J_E, J_I, rhs, mu / s - y_I,
                                 spec, config, delta_w_last, delta_w_floor)
        if step is None:
            diagnostics['delta_w'] = config['delta_w_max']
            return finish(NUMERICAL_FAILURE, x, y_E, y_I, z_L, z_U, resid, iteration,
                          'KKT system stayed singular after maximal regularization')
        dx, dy_E, dy_I, delta_w, curvature = step
        if delta_w > 0:
            delta_w_last = delta_w
        ds = (mu / s - y_I - dy_I) / sigma_s
        dv = mu / s - v - sigma_s * ds
        dz_L = np.where(has_L, mu / gap_L - z_L - (z_L / gap_L) * dx, 0.0)
        dz_U = np.where(has_U, mu / gap_U - z_U + (z_U / gap_U) * dx, 0.0)

        tau = max(config['tau_min'], 1.0 - mu)
        alpha_pr = min(_fraction_to_boundary(s, ds, tau),
                       _fraction_to_boundary(gap_L[has_L], dx[has_L], tau),
                       _fraction_to_boundary(gap_U[has_U], -dx[has_U], tau))
        alpha_du = min(_fraction_to_boundary(v, dv, tau),
                       _fraction_to_boundary(z_L[has_L], dz_L[has_L], tau),
                       _fraction_to_boundary(z_U[has_U], dz_U[has_U], tau))

        # l1 merit penalty update and directional derivative.
        theta1 = float(np.sum(np.abs(c_E)) + np.sum(np.abs(c_I + s)))
        slope = float(grad_barrier.dot(dx) - np.sum(mu / s * ds))
        if theta1 > 0:
            required = (slope + 0.5 * max(curvature, 0.0)) / (0.9 * theta1)
            if nu < required:
                nu = required + 1.0
        dphi = slope - nu * theta1

        def merit(f_val, ce, ci, xx, ss):
            barrier = np.sum(np.log(ss))
            barrier += np.sum(np.log((xx - lower)[has_L]))
            barrier += np.sum(np.log((upper - xx)[has_U]))
            return f_val - mu * barrier + nu * (np.sum(np.abs(ce)) + np.sum(np.abs(ci + ss)))

        phi0 = merit(f, c_E, c_I, x, s)
        tiny = np.max(np.abs(dx) / (1.0 + np.abs(x))) < 10.0 * np.finfo(float).eps \
            if n else True
        alpha = alpha_pr
        accepted = False
        trials = 0
        trial = None
        while alpha >= config['alpha_min']:
            trials += 1
            x_t = x + alpha * dx
            s_t = s + alpha * ds
            try:
                with np.errstate(all='ignore'):
                    f_t, cE_t, cI_t = problem.values(x_t)
                    phi_t = merit(f_t, cE_t, cI_t, x_t, s_t)
            except (PropagationError, FloatingPointError, ValueError):
                phi_t = np.nan
            if np.isfinite(phi_t) and (tiny or phi_t <= phi0 + config['armijo'] * alpha * dphi):
                accepted = True
                break
            if trials == 1 and np.isfinite(phi_t):
                # Full step accepted if it cuts the barrier KKT error.
                trial = _try_kkt_error_step(problem, x_t, s_t, y_E + alpha * dy_E,
                                            y_I + alpha * dy_I, v + alpha_du * dv,
                                            z_L + alpha_du * dz_L, z_U + alpha_du * dz_U,
                                            lower, upper, has_L, has_U, mu,
                                            0.9 * barrier_error(mu))
                if trial is not None:
                    accepted = True
                    break
            alpha *= config['backtrack']

        iteration += 1
        if not accepted:
            ls_failures += 1
            delta_w_floor = max(8.0 * delta_w_floor, config['delta_w_init'])
            logger.debug('%s: line search failed at iteration %d', spec.name, iteration)
            if ls_failures >= window:
                status = INFEASIBLE if theta > tol else NUMERICAL_FAILURE
                return finish(status, x, y_E, y_I, z_L, z_U, resid, iteration,
                              'line search failed %d times in a row' % ls_failures)
            continue
        ls_failures = 0
        delta_w_floor = 0.0

        x = x + alpha * dx
        s = s + alpha * ds
        y_E = y_E + alpha * dy_E
        y_I = y_I + alpha * dy_I
        v = v + alpha_du * dv
        z_L = z_L + alpha_du * dz_L
        z_U = z_U + alpha_du * dz_U
        gap_L = np.where(has_L, x - lower, 1.0)
        gap_U = np.where(has_U, upper - x, 1.0)
        z_L = np.where(has_L, np.clip(z_L, mu / (_KAPPA_SIGMA * gap_L),
                                      _KAPPA_SIGMA * mu / gap_L), 0.0)
        z_U = np.where(has_U, np.clip(z_U, mu / (_KAPPA_SIGMA * gap_U),
                                      _KAPPA_SIGMA * mu / gap_U), 0.0)
        v = np.clip(v, mu / (_KAPPA_SIGMA * s), _KAPPA_SIGMA * mu / s)

        try:
            if trial is not None:
                f, g, c_E, c_I, J_E, J_I = trial
            else:
                f, g, c_E, c_I, J_E, J_I = problem.first_order(x)
        except PropagationError as e:
            diagnostics['function'] = 'derivatives'
            return finish(NUMERICAL_FAILURE, x, y_E, y_I, z_L, z_U, resid, iteration,
                          str(e))
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(c_E))
                and np.all(np.isfinite(c_I))):
            diagnostics['function'] = _first_nonfinite(f, g, c_E, c_I)
            return finish(NUMERICAL_FAILURE, x, y_E, y_I, z_L, z_U, resid, iteration,
                          'non-finite value in %s' % diagnostics['function'])

        line = ('%4d %14.7e %8.2e %8.2e %6.2f %8.2e %6s %8.2e %8.2e %2d'
                % (iteration, f / problem.obj_scale, _primal_infeasibility(c_E, c_I, s),
                   resid.stationarity, np.log10(mu), float(np.max(np.abs(dx))) if n else 0.0,
                   '-' if delta_w == 0 else '%.1f' % np.log10(delta_w),
                   alpha_du, alpha, trials))
        logger.debug(line)
        if log is not None:
            log.write(line + '\n')


class _IdentityScaling(object):

    def __init__(self, m_E, m_I):
        self.obj_scale = 1.0
        self.eq_scale = np.ones(m_E)
        self.ineq_scale = np.ones(m_I)

    def unscale_multipliers(self, y_E, y_I, z_L, z_U):
        return y_E, y_I, z_L, z_U


def _first_nonfinite(f, g, c_E, c_I):
    if not np.isfinite(f):
        return 'objective'
    if not np.all(np.isfinite(g)):
        return 'gradient'
    if not np.all(np.isfinite(c_E)):
        return 'equality constraints'
    return 'inequality constraints'


def _primal_infeasibility(c_E, c_I, s):
    theta = float(np.max(np.abs(c_E))) if c_E.size else 0.0
    if c_I.size:
        theta = max(theta, float(np.max(np.abs(c_I + s))))
    return theta


def _stagnated(theta_history, window, tol):
    """
    True when the primal infeasibility stayed above tol for the last `window`
    iterations and their best value is no better than 0.99 times the best
    value seen before them. An iterate that was ever feasible rules this out.
    """
    if len(theta_history) <= window:
        return False
    recent = theta_history[-window:]
    before = min(theta_history[:-window])
    if min(recent) <= tol or before <= tol:
        return False
    return min(recent) >= 0.99 * before


def _stationarity(g, J_E, J_I, y_E, y_I, z_L, z_U):
    r = g - z_L + z_U
    if y_E.size:
        r = r + J_E.T.dot(y_E)
    if y_I.size:
        r = r + J_I.T.dot(y_I)
    return float(np.max(np.abs(r))) if r.size else 0.0


def _centrality(s, v, gap_L, gap_U, z_L, z_U, has_L, has_U, mu):
    parts = [np.abs(s * v - mu), np.abs(gap_L * z_L - mu)[has_L],
             np.abs(gap_U * z_U - mu)[has_U]]
    return max([float(np.max(p)) if p.size else 0.0 for p in parts])


def _try_kkt_error_step(problem, x, s, y_E, y_I, v, z_L, z_U, lower, upper,
                        has_L, has_U, mu, target):
    try:
        f, g, c_E, c_I, J_E, J_I = problem.first_order(x)
    except (PropagationError, FloatingPointError, ValueError):
        return None
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return None
    gap_L = np.where(has_L, x - lower, 1.0)
    gap_U = np.where(has_U, upper - x, 1.0)
    err = max(_stationarity(g, J_E, J_I, y_E, y_I, z_L, z_U),
              _primal_infeasibility(c_E, c_I, s),
              _centrality(s, v, gap_L, gap_U, z_L, z_U, has_L, has_U, mu))
    if err <= target:
        return f, g, c_E, c_I, J_E, J_I
    return None


def _regularized_step(W, sigma_x, sigma_s, J_E, J_I, rhs, slack_rhs, spec, config,
                      delta_w_last, delta_w_floor):
    """
    Solve the KKT system, raising the Hessian regularization until the step
    has positive curvature on the regularized Hessian block.

    Returns (dx, dy_E, dy_I, delta_w, curvature) or None when regularization
    is exhausted.
    """
    n, m_E, m_I = W.shape[0], J_E.shape[0], J_I.shape[0]
    perm = None
    permc = 'COLAMD'
    if spec.blocks:
        perm = _kkt_permutation(spec.blocks, n, m_E, m_I)
        permc = 'NATURAL'
    sigma_s_inv = 1.0 / sigma_s if m_I else np.zeros(0)
    delta_w = delta_w_floor
    delta_c = 0.0
    while True:
        K = _kkt_matrix(W, sigma_x, delta_w, J_E, J_I, sigma_s_inv, delta_c)
        if perm is not None:
            K = K[perm][:, perm].tocsc()
        sol = None
        try:
            lu = splinalg.splu(K, permc_spec=permc)
            sol = lu.solve(rhs[perm] if perm is not None else rhs)
        except RuntimeError:
            delta_c = config['delta_c']
        if sol is not None and np.all(np.isfinite(sol)):
            if perm is not None:
                full = np.empty_like(sol)
                full[perm] = sol
                sol = full
            dx = sol[:n]
            dy_E = sol[n:n + m_E]
            dy_I = sol[n + m_E:]
            ds = (slack_rhs - dy_I) / sigma_s if m_I else np.zeros(0)
            curvature = float(dx.dot(W.dot(dx)) + np.sum((sigma_x + delta_w) * dx * dx))
            if m_I:
                curvature += float(np.sum(sigma_s * ds * ds))
            norm2 = float(dx.dot(dx) + (ds.dot(ds) if m_I else 0.0))
            if curvature >= _CURVATURE_MIN * norm2:
                return dx, dy_E, dy_I, delta_w, curvature
        if delta_w == 0.0:
            delta_w = (config['delta_w_init'] if delta_w_last == 0.0
                       else max(1e-20, delta_w_last / 3.0))
        else:
            delta_w *= 8.0
        if delta_w > config['delta_w_max']:
            return None
