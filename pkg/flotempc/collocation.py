"""
Full discretization of a semi-explicit DAE by orthogonal collocation on finite
elements with Radau IIA points.

Time is normalized to [0, 1]. Inside element e of length h_e the states are the
degree-d polynomial through the element start x_start[e] and the d collocation
values x_col[e, :]; the last Radau point is the right boundary, so continuity
reads x_start[e + 1] = x_col[e, d - 1]. Algebraic states live only at the
collocation points and controls are constant per control interval.

Decision vector layout, element by element (u_n is written before the first
element of control interval n, the final element start comes last):

  [u_0, x_start[0], x_col[0], z_col[0], x_start[1], x_col[1], ..., x_start[N]]

Equality rows: initial-state pinning, then per element the collocation
equations at its d points followed by its continuity rows. Inequality rows:
per element the path constraints at its points, then the move-rate rows of the
control interval the element opens.
"""
from __future__ import division
from builtins import range
from builtins import object
import dataclasses
import logging

import numpy as np
from numpy.polynomial import legendre
from scipy import sparse

from flotempc import autodiff as ad
from flotempc.errors import ConfigurationError, LayoutError
from flotempc.nlp_solver import NlpSpec

logger = logging.getLogger(__name__)


MAX_DEGREE = 5


##############################################################################
# Radau IIA machinery
##############################################################################


def radau_points(degree):
    """
    Radau IIA abscissae on (0, 1]: the roots of P_d - P_{d-1} mapped from
    [-1, 1], with the last point set exactly to 1.
    """
    if int(degree) != degree or not 1 <= degree <= MAX_DEGREE:
        raise ConfigurationError('Radau degree must be an integer in [1, %d], '
                                 'got %r' % (MAX_DEGREE, degree))
    d = int(degree)
    coefs = np.zeros(d + 1)
    coefs[d] = 1.0
    coefs[d - 1] = -1.0
    roots = np.sort(np.real(legendre.legroots(coefs)))
    points = 0.5 * (1.0 + roots)
    points[-1] = 1.0
    return points


def _check_points(points, allow_zero=False):
    points = np.asarray(points, dtype=float)
    if points.ndim != 1 or points.size == 0:
        raise ConfigurationError('collocation points must be a non-empty 1-D array')
    gaps = np.abs(points[:, None] - points[None, :]) + np.eye(points.size)
    if np.any(gaps < 1e-14):
        raise ConfigurationError('collocation points must be distinct')
    low_ok = np.all(points >= 0.0) if allow_zero else np.all(points > 0.0)
    if not low_ok or np.any(points > 1.0):
        raise ConfigurationError('collocation points must lie in (0, 1]')
    return points


def radau_weights(points):
    """
    Quadrature weights on [0, 1] for the given abscissae, from the moment
    equations sum_j w_j t_j^k = 1 / (k + 1), k < d.
    """
    points = _check_points(points)
    d = points.size
    vander = np.vander(points, d, increasing=True).T
    moments = 1.0 / np.arange(1, d + 1)
    return np.linalg.solve(vander, moments)


def _barycentric_weights(nodes):
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


def lagrange_matrix(nodes, t):
    """
    Values of the Lagrange basis through `nodes` at the times `t`.

    Returns an array L of shape (len(t), len(nodes)) such that L.dot(samples)
    interpolates the samples at t.
    """
    nodes = np.asarray(nodes, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = nodes.size
    L = np.ones((t.size, n))
    for k in range(n):
        for m in range(n):
            if m != k:
                L[:, k] *= (t - nodes[m]) / (nodes[k] - nodes[m])
    return L


def differentiation_matrix(points):
    """
    Derivatives of the Lagrange basis through [0, points] at the points.

    Inputs:
    - points: d distinct collocation points in (0, 1]

    Returns:
    - D: array of shape (d + 1, d); D[k, j] is the derivative of the k-th basis
      polynomial (node 0 is t = 0) at points[j], so D.T.dot(samples) is the
      derivative of the interpolant at the points.
    """
    points = _check_points(points)
    nodes = np.concatenate([[0.0], points])
    w = _barycentric_weights(nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    # full[j, k] = l_k'(nodes[j])
    full = (w[None, :] / w[:, None]) / diff
    np.fill_diagonal(full, 0.0)
    np.fill_diagonal(full, -np.sum(full, axis=1))
    return full[1:, :].T.copy()


@dataclasses.dataclass(frozen=True, eq=False)
class CollocationGrid(object):
    """Finite elements on normalized time [0, 1] with Radau points."""
    n_elements: int
    degree: int
    element_boundaries: np.ndarray
    collocation_points: np.ndarray
    quadrature_weights: np.ndarray
    differentiation: np.ndarray

    @property
    def element_lengths(self):
        return np.diff(self.element_boundaries)

    @property
    def collocation_times(self):
        """Normalized times of all collocation points, shape (N, d)."""
        return (self.element_boundaries[:-1, None]
                + self.element_lengths[:, None] * self.collocation_points[None, :])

    @property
    def n_points(self):
        return self.n_elements * self.degree


def make_grid(n_elements, degree=3, boundaries=None):
    if n_elements < 1:
        raise ConfigurationError('need at least one finite element')
    if boundaries is None:
        boundaries = np.linspace(0.0, 1.0, n_elements + 1)
    boundaries = np.asarray(boundaries, dtype=float)
    if boundaries.shape != (n_elements + 1,):
        raise ConfigurationError('expected %d element boundaries, got %d'
                                 % (n_elements + 1, boundaries.size))
    if boundaries[0] != 0.0 or boundaries[-1] != 1.0 or np.any(np.diff(boundaries) <= 0):
        raise ConfigurationError('element boundaries must increase strictly '
                                 'from 0 to 1')
    points = radau_points(degree)
    return CollocationGrid(n_elements=int(n_elements), degree=int(degree),
                           element_boundaries=boundaries,
                           collocation_points=points,
                           quadrature_weights=radau_weights(points),
                           differentiation=differentiation_matrix(points))


##############################################################################
# Models seen by the transcription
##############################################################################


class ScaledDae(object):
    """
    Normalized view of a physical DAE model.

    The wrapped model provides n_x, n_z, n_u and
    residual_batch(x, xdot, z, u, d) in physical units (time in seconds).
    Here every variable is divided by its scale, time by scales.time, and the
    differential rows are multiplied by time / x_scale (the algebraic rows by
    1 / z_scale) so that the returned rows read  dx~/dt~ - f~ = 0.

    The residual must be affine in xdot and u; the transcription takes second
    derivatives in (x, z) only.
    """

    def __init__(self, model, scales):
        self.model = model
        self.scales = scales
        self.n_x = model.n_x
        self.n_z = model.n_z
        self.n_u = model.n_u
        for name, size in (('x', self.n_x), ('z', self.n_z), ('u', self.n_u)):
            if getattr(scales, name).shape != (size,):
                raise LayoutError('%s scales have shape %r, expected (%d,)'
                                  % (name, getattr(scales, name).shape, size))
        self.row_scale = np.concatenate([scales.time / scales.x, 1.0 / scales.z])

    def residual(self, x, xdot, z, u, d):
        s = self.scales
        res = self.model.residual_batch(x * s.x, xdot * (s.x / s.time), z * s.z,
                                        u * s.u, d)
        return res * self.row_scale


class LinearTestDae(object):
    """The scalar test equation  xdot = rate * x  (no algebraic states)."""
    n_x = 1
    n_z = 0
    n_u = 0

    def __init__(self, rate=-1.0):
        self.rate = float(rate)

    def residual_batch(self, x, xdot, z, u, d):
        return xdot - x * self.rate


@dataclasses.dataclass(eq=False)
class UnitScales(object):
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    time: float = 1.0

    @classmethod
    def for_model(cls, model, time=1.0):
        return cls(np.ones(model.n_x), np.ones(model.n_z), np.ones(model.n_u), time)


##############################################################################
# Objective and constraint descriptions
##############################################################################


@dataclasses.dataclass(eq=False)
class ObjectiveSpec(object):
    """
    Pieces of the objective, all in normalized variables.

    - stage: f(x, z, u, d) -> (P,) integrated over time by Radau quadrature
    - terminal: f(x, z, u, d) -> (1,) evaluated at the final collocation point
    - move_weights: diagonal weights on (u_n - u_{n-1})^2, the first move
      measured from the previous control passed to transcribe
    """
    stage: object = None
    terminal: object = None
    move_weights: np.ndarray = None


@dataclasses.dataclass(eq=False)
class ConstraintSpec(object):
    """
    Inequalities g <= 0 and variable bounds, in normalized variables.

    - path: g(x, z, u, d) -> (P, n_path) imposed at every collocation point
    - move_limits: |u_n - u_{n-1}| <= move_limits per control interval
    - x_bounds, z_bounds, u_bounds: (lower, upper) pairs; None means free.
      The initial element start is never bounded since it is pinned.
    """
    path: object = None
    n_path: int = 0
    move_limits: np.ndarray = None
    x_bounds: tuple = None
    z_bounds: tuple = None
    u_bounds: tuple = None


def _bounds_pair(bounds, size):
    if bounds is None:
        return np.full(size, -np.inf), np.full(size, np.inf)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (size,)).copy()
              for b in bounds)
    if np.any(lo > hi):
        raise ConfigurationError('lower bounds exceed upper bounds')
    return lo, hi


##############################################################################
# Transcription
##############################################################################


class TranscribedNlp(object):
    """
    The collocation NLP of one horizon: layout, residual functions and their
    first and second derivatives (assembled from per-point forward-mode
    derivatives), bounds and a block structure for the KKT ordering.

    The object is immutable once built; the initial state, disturbance and
    previous control are parameters fixed at transcription time.
    """

    def __init__(self, dae, grid, n_intervals, objective, constraints,
                 initial_state, disturbance, previous_control=None):
        N, d = grid.n_elements, grid.degree
        if n_intervals < 1 or N % n_intervals:
            raise ConfigurationError('%d elements cannot be split into %d control '
                                     'intervals' % (N, n_intervals))
        per = N // n_intervals
        starts = grid.element_boundaries[::per]
        if np.max(np.abs(starts - np.linspace(0.0, 1.0, n_intervals + 1))) > 1e-12:
            raise ConfigurationError('element boundaries are not aligned with '
                                     'the control intervals')
        self.dae = dae
        self.grid = grid
        self.n_intervals = int(n_intervals)
        self.elements_per_interval = per
        self.objective_spec = objective or ObjectiveSpec()
        self.constraint_spec = constraints or ConstraintSpec()
        n_x, n_z, n_u = dae.n_x, dae.n_z, dae.n_u
        self.n_x, self.n_z, self.n_u = n_x, n_z, n_u

        self.initial_state = np.asarray(initial_state, dtype=float)
        if self.initial_state.shape != (n_x,):
            raise LayoutError('initial state has shape %r, expected (%d,)'
                              % (self.initial_state.shape, n_x))
        dist = np.atleast_1d(np.asarray(disturbance, dtype=float))
        self.disturbance = dist
        self._d_points = np.broadcast_to(dist, (grid.n_points,) + dist.shape).copy()
        self.previous_control = (None if previous_control is None
                                 else np.asarray(previous_control, dtype=float))
        if self.previous_control is not None and self.previous_control.shape != (n_u,):
            raise LayoutError('previous control has shape %r, expected (%d,)'
                              % (self.previous_control.shape, n_u))

        self._build_layout()
        self._build_rows()
        self._build_bounds()
        self._build_derivative_maps()
        logger.debug('transcribed NLP: %d variables, %d equalities, %d inequalities',
                     self.n, self.m_eq, self.m_ineq)

    ##########################################################################
    # Layout
    ##########################################################################

    def _build_layout(self):
        N, d = self.grid.n_elements, self.grid.degree
        n_x, n_z, n_u = self.n_x, self.n_z, self.n_u
        self.x_start = np.zeros((N + 1, n_x), dtype=np.int64)
        self.x_col = np.zeros((N, d, n_x), dtype=np.int64)
        self.z_col = np.zeros((N, d, n_z), dtype=np.int64)
        self.u_idx = np.zeros((self.n_intervals, n_u), dtype=np.int64)
        self.element_interval = np.arange(N) // self.elements_per_interval
        var_blocks = []
        pos = 0

        def take(count):
            return np.arange(pos, pos + count)

        for e in range(N):
            begin = pos
            if e % self.elements_per_interval == 0:
                self.u_idx[self.element_interval[e]] = take(n_u)
                pos += n_u
            self.x_start[e] = take(n_x)
            pos += n_x
            self.x_col[e] = take(d * n_x).reshape(d, n_x)
            pos += d * n_x
            self.z_col[e] = take(d * n_z).reshape(d, n_z)
            pos += d * n_z
            var_blocks.append(np.arange(begin, pos))
        self.x_start[N] = take(n_x)
        var_blocks[-1] = np.concatenate([var_blocks[-1], np.arange(pos, pos + n_x)])
        pos += n_x
        self.n = pos
        expected = N * d * (n_x + n_z) + (N + 1) * n_x + self.n_intervals * n_u
        if self.n != expected:
            raise LayoutError('layout has %d variables, expected %d' % (self.n, expected))
        self.var_blocks = var_blocks

    def _build_rows(self):
        N, d = self.grid.n_elements, self.grid.degree
        n_x, n_r = self.n_x, self.n_x + self.n_z
        self.eq_initial = np.arange(n_x)
        self.eq_colloc = np.zeros((N, d, n_r), dtype=np.int64)
        self.eq_contin = np.zeros((N, n_x), dtype=np.int64)
        eq_blocks = []
        pos = n_x
        for e in range(N):
            begin = pos if e else 0
            self.eq_colloc[e] = np.arange(pos, pos + d * n_r).reshape(d, n_r)
            pos += d * n_r
            self.eq_contin[e] = np.arange(pos, pos + n_x)
            pos += n_x
            eq_blocks.append(np.arange(begin, pos))
        self.m_eq = pos

        n_g = self.constraint_spec.n_path if self.constraint_spec.path is not None else 0
        self.n_path = n_g
        has_moves = self.constraint_spec.move_limits is not None and self.n_u > 0
        self.ineq_path = np.zeros((N, d, n_g), dtype=np.int64)
        # move rows per interval: [upper (n_u), lower (n_u)]; -1 where absent
        self.ineq_move = -np.ones((self.n_intervals, 2, self.n_u), dtype=np.int64)
        ineq_blocks = []
        pos = 0
        for e in range(N):
            begin = pos
            self.ineq_path[e] = np.arange(pos, pos + d * n_g).reshape(d, n_g)
            pos += d * n_g
            n = self.element_interval[e]
            first = e % self.elements_per_interval == 0
            if has_moves and first and (n > 0 or self.previous_control is not None):
                self.ineq_move[n] = np.arange(pos, pos + 2 * self.n_u).reshape(2, self.n_u)
                pos += 2 * self.n_u
            ineq_blocks.append(np.arange(begin, pos))
        self.m_ineq = pos
        self.kkt_blocks = [(v, q, g) for v, q, g in zip(self.var_blocks, eq_blocks,
                                                         ineq_blocks)]

    def _build_bounds(self):
        cs = self.constraint_spec
        lower = np.full(self.n, -np.inf)
        upper = np.full(self.n, np.inf)
        xl, xu = _bounds_pair(cs.x_bounds, self.n_x)
        zl, zu = _bounds_pair(cs.z_bounds, self.n_z)
        ul, uu = _bounds_pair(cs.u_bounds, self.n_u)
        lower[self.x_start[1:]] = xl
        upper[self.x_start[1:]] = xu
        lower[self.x_col] = xl
        upper[self.x_col] = xu
        lower[self.z_col] = zl
        upper[self.z_col] = zu
        lower[self.u_idx] = ul
        upper[self.u_idx] = uu
        self.lower, self.upper = lower, upper

    def _build_derivative_maps(self):
        """Row/column index arrays for scattering per-point derivatives."""
        N, d = self.grid.n_elements, self.grid.degree
        n_x, n_z, n_u = self.n_x, self.n_z, self.n_u
        n_r = n_x + n_z
        P = N * d
        h = self.grid.element_lengths
        D = self.grid.differentiation

        # Element nodes: start followed by the collocation values, (N, d+1, n_x).
        self.node_idx = np.concatenate([self.x_start[:-1, None, :], self.x_col], axis=1)
        u_pt = np.repeat(self.u_idx[self.element_interval], d, axis=0)      # (P, n_u)
        x_pt = self.x_col.reshape(P, n_x)
        z_pt = self.z_col.reshape(P, n_z)
        self._point_cols = np.concatenate([x_pt, z_pt, u_pt], axis=1)       # (P, n_s)
        self._point_xz_cols = np.concatenate([x_pt, z_pt], axis=1)          # (P, n_xz)
        self._point_u_cols = u_pt

        rows = self.eq_colloc.reshape(P, n_r)
        # Coefficient of node k in xdot at point (e, j): D[k, j] / h_e.
        self._xdot_coef = (D.T[None, :, :] / h[:, None, None]).reshape(P, d + 1)
        node_cols = np.repeat(self.node_idx, d, axis=0)                      # (P, d+1, n_x)

        r_x = np.broadcast_to(rows[:, :, None], (P, n_r, n_x))
        c_x = np.broadcast_to(x_pt[:, None, :], (P, n_r, n_x))
        r_dx = np.broadcast_to(rows[:, :, None, None], (P, n_r, d + 1, n_x))
        c_dx = np.broadcast_to(node_cols[:, None, :, :], (P, n_r, d + 1, n_x))
        r_z = np.broadcast_to(rows[:, :, None], (P, n_r, n_z))
        c_z = np.broadcast_to(z_pt[:, None, :], (P, n_r, n_z))
        r_u = np.broadcast_to(rows[:, :, None], (P, n_r, n_u))
        c_u = np.broadcast_to(u_pt[:, None, :], (P, n_r, n_u))

        cont_rows = np.concatenate([self.eq_initial, self.eq_contin.ravel(),
                                    self.eq_contin.ravel()])
        cont_cols = np.concatenate([self.x_start[0], self.x_start[1:].ravel(),
                                    self.x_col[:, d - 1, :].ravel()])
        self._cont_vals = np.concatenate([np.ones(n_x), np.ones(N * n_x),
                                          -np.ones(N * n_x)])
        self._eq_rows = np.concatenate([r_x.ravel(), r_dx.ravel(), r_z.ravel(),
                                        r_u.ravel(), cont_rows])
        self._eq_cols = np.concatenate([c_x.ravel(), c_dx.ravel(), c_z.ravel(),
                                        c_u.ravel(), cont_cols])

        # Path inequalities
        n_g = self.n_path
        n_s = n_x + n_z + n_u
        g_rows = self.ineq_path.reshape(P, n_g)
        self._path_rows = np.broadcast_to(g_rows[:, :, None], (P, n_g, n_s)).ravel()
        self._path_cols = np.broadcast_to(self._point_cols[:, None, :],
                                          (P, n_g, n_s)).ravel()

        # Move-rate rows are linear: +-(u_n - u_{n-1}).
        mr, mc, mv = [], [], []
        for n in range(self.n_intervals):
            if n_u == 0 or self.ineq_move[n, 0, 0] < 0:
                continue
            for sign, side in ((1.0, 0), (-1.0, 1)):
                mr.append(self.ineq_move[n, side])
                mc.append(self.u_idx[n])
                mv.append(np.full(n_u, sign))
                if n > 0:
                    mr.append(self.ineq_move[n, side])
                    mc.append(self.u_idx[n - 1])
                    mv.append(np.full(n_u, -sign))
        if mr:
            self._move_rows = np.concatenate(mr)
            self._move_cols = np.concatenate(mc)
            self._move_vals = np.concatenate(mv)
        else:
            self._move_rows = self._move_cols = np.zeros(0, dtype=np.int64)
            self._move_vals = np.zeros(0)

        # Quadrature weight of each collocation point on [0, 1].
        self.point_weights = (h[:, None] * self.grid.quadrature_weights[None, :]).ravel()

        # Hessian scatter: per-point (x, z, u) blocks.
        hr = np.broadcast_to(self._point_cols[:, :, None], (P, n_s, n_s)).ravel()
        hc = np.broadcast_to(self._point_cols[:, None, :], (P, n_s, n_s)).ravel()
        move_r, move_c = self._move_hessian_pattern()
        self._hess_rows = np.concatenate([hr, move_r])
        self._hess_cols = np.concatenate([hc, move_c])

    def _move_hessian_pattern(self):
        rows, cols = [], []
        for n in range(self.n_intervals):
            u = self.u_idx[n]
            rows.append(u)
            cols.append(u)
            if n > 0:
                v = self.u_idx[n - 1]
                rows.extend([u, v])
                cols.extend([v, u])
        if not rows:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(rows), np.concatenate(cols)

    ##########################################################################
    # Views
    ##########################################################################

    def _check_w(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n,):
            raise LayoutError('decision vector has length %d, layout expects %d'
                              % (w.size, self.n))
        return w

    def unpack(self, w):
        """Normalized arrays x_start (N+1, n_x), x_col, z_col (N, d, .), u (N_p, n_u)."""
        w = self._check_w(w)
        return {'x_start': w[self.x_start], 'x_col': w[self.x_col],
                'z_col': w[self.z_col], 'u': w[self.u_idx]}

    def pack(self, parts):
        w = np.zeros(self.n)
        w[self.x_start] = parts['x_start']
        w[self.x_col] = parts['x_col']
        w[self.z_col] = parts['z_col']
        w[self.u_idx] = parts['u']
        return w

    def _point_values(self, w):
        P = self.grid.n_points
        x = w[self.x_col].reshape(P, self.n_x)
        z = w[self.z_col].reshape(P, self.n_z)
        u = w[self._point_u_cols]
        nodes = w[self.node_idx]                                             # (N, d+1, n_x)
        xdot = np.einsum('ejk,ekx->ejx',
                         self._xdot_coef.reshape(self.grid.n_elements, self.grid.degree, -1),
                         nodes).reshape(P, self.n_x)
        return x, xdot, z, u

    ##########################################################################
    # Objective
    ##########################################################################

    def _move_terms(self, w):
        """Moves (N_p, n_u), the first one measured from the previous control."""
        u = w[self.u_idx]
        prev = np.vstack([self.previous_control[None, :] if self.previous_control
                          is not None else u[:1], u[:-1]])
        return u - prev

    def objective(self, w):
        w = self._check_w(w)
        obj = self.objective_spec
        x, xdot, z, u = self._point_values(w)
        total = 0.0
        if obj.stage is not None:
            stage = ad.value_of(obj.stage(x, z, u, self._d_points))
            total += float(np.dot(self.point_weights, stage))
        if obj.terminal is not None:
            total += float(np.sum(ad.value_of(obj.terminal(
                x[-1:], z[-1:], u[-1:], self._d_points[-1:]))))
        if obj.move_weights is not None:
            du = self._move_terms(w)
            total += float(np.sum(du * du * obj.move_weights[None, :]))
        return total

    def _local_seed(self, x, z, u, cls):
        local = np.concatenate([x, z, u], axis=1)
        v = cls.seed(local)
        n_x, n_z = self.n_x, self.n_z
        return v[:, 0:n_x], v[:, n_x:n_x + n_z], v[:, n_x + n_z:]

    def objective_gradient(self, w):
        w = self._check_w(w)
        obj = self.objective_spec
        x, xdot, z, u = self._point_values(w)
        grad = np.zeros(self.n)
        if obj.stage is not None:
            xs, zs, us = self._local_seed(x, z, u, ad.Dual1)
            out = obj.stage(xs, zs, us, self._d_points)
            if isinstance(out, ad.Dual1):
                np.add.at(grad, self._point_cols,
                          out.deriv * self.point_weights[:, None])
        if obj.terminal is not None:
            xs, zs, us = self._local_seed(x[-1:], z[-1:], u[-1:], ad.Dual1)
            out = obj.terminal(xs, zs, us, self._d_points[-1:])
            if isinstance(out, ad.Dual1):
                np.add.at(grad, self._point_cols[-1], out.deriv.reshape(-1))
        if obj.move_weights is not None:
            du = 2.0 * self._move_terms(w) * obj.move_weights[None, :]
            np.add.at(grad, self.u_idx, du)
            if self.n_intervals > 1:
                np.add.at(grad, self.u_idx[:-1], -du[1:])
        if not np.all(np.isfinite(grad)):
            raise ad.PropagationError(0, 'non-finite objective gradient')
        return grad

    ##########################################################################
    # Equalities
    ##########################################################################

    def eq_constraints(self, w):
        w = self._check_w(w)
        x, xdot, z, u = self._point_values(w)
        res = np.asarray(ad.value_of(self.dae.residual(x, xdot, z, u, self._d_points)))
        c = np.zeros(self.m_eq)
        c[self.eq_initial] = w[self.x_start[0]] - self.initial_state
        c[self.eq_colloc.reshape(-1)] = res.reshape(-1)
        c[self.eq_contin] = w[self.x_start[1:]] - w[self.x_col[:, -1, :]]
        return c

    def eq_jacobian(self, w):
        w = self._check_w(w)
        x, xdot, z, u = self._point_values(w)
        n_x, n_z, n_u = self.n_x, self.n_z, self.n_u
        local = np.concatenate([x, xdot, z, u], axis=1)
        v = ad.Dual1.seed(local)
        out = self.dae.residual(v[:, 0:n_x], v[:, n_x:2 * n_x],
                                v[:, 2 * n_x:2 * n_x + n_z], v[:, 2 * n_x + n_z:],
                                self._d_points)
        P, n_r = x.shape[0], n_x + n_z
        deriv = out.deriv.reshape(P, n_r, -1)
        ad._check_finite(out.value.reshape(-1), deriv.reshape(P * n_r, -1))
        d_x = deriv[:, :, 0:n_x]
        d_xdot = deriv[:, :, n_x:2 * n_x]
        d_z = deriv[:, :, 2 * n_x:2 * n_x + n_z]
        d_u = deriv[:, :, 2 * n_x + n_z:]
        # (P, n_r, d+1, n_x): chain rule through xdot = sum_k coef_k node_k
        d_nodes = d_xdot[:, :, None, :] * self._xdot_coef[:, None, :, None]
        vals = np.concatenate([d_x.ravel(), d_nodes.ravel(), d_z.ravel(),
                               d_u.ravel(), self._cont_vals])
        return sparse.coo_matrix((vals, (self._eq_rows, self._eq_cols)),
                                 shape=(self.m_eq, self.n)).tocsr()

    ##########################################################################
    # Inequalities
    ##########################################################################

    def ineq_constraints(self, w):
        w = self._check_w(w)
        g = np.zeros(self.m_ineq)
        cs = self.constraint_spec
        if self.n_path:
            x, xdot, z, u = self._point_values(w)
            vals = np.asarray(ad.value_of(cs.path(x, z, u, self._d_points)))
            g[self.ineq_path.reshape(-1)] = vals.reshape(-1)
        if self._move_rows.size:
            du = self._move_terms(w)
            for n in range(self.n_intervals):
                if self.ineq_move[n, 0, 0] < 0:
                    continue
                g[self.ineq_move[n, 0]] = du[n] - cs.move_limits
                g[self.ineq_move[n, 1]] = -du[n] - cs.move_limits
        return g

    def ineq_jacobian(self, w):
        w = self._check_w(w)
        vals, rows, cols = [], [], []
        if self.n_path:
            x, xdot, z, u = self._point_values(w)
            xs, zs, us = self._local_seed(x, z, u, ad.Dual1)
            out = self.constraint_spec.path(xs, zs, us, self._d_points)
            P = x.shape[0]
            deriv = out.deriv.reshape(P * self.n_path, -1)
            ad._check_finite(out.value.reshape(-1), deriv)
            vals.append(deriv.ravel())
            rows.append(self._path_rows)
            cols.append(self._path_cols)
        vals.append(self._move_vals)
        rows.append(self._move_rows)
        cols.append(self._move_cols)
        return sparse.coo_matrix((np.concatenate(vals),
                                  (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(self.m_ineq, self.n)).tocsr()

    ##########################################################################
    # Second derivatives
    ##########################################################################

    def lagrangian_hessian(self, w, obj_factor, y_eq, y_ineq):
        """
        Hessian of obj_factor * objective + y_eq . c_eq + y_ineq . c_ineq.

        Continuity, initial-state and move-rate rows are linear; the collocation
        rows are affine in xdot and u, so their curvature lives in (x, z).
        """
        w = self._check_w(w)
        x, xdot, z, u = self._point_values(w)
        P = x.shape[0]
        n_x, n_z, n_u = self.n_x, self.n_z, self.n_u
        n_s = n_x + n_z + n_u
        n_xz = n_x + n_z
        blocks = np.zeros((P, n_s, n_s))
        obj = self.objective_spec

        if obj.stage is not None and obj_factor != 0.0:
            xs, zs, us = self._local_seed(x, z, u, ad.Dual2)
            out = obj.stage(xs, zs, us, self._d_points)
            if isinstance(out, ad.Dual2):
                blocks += (obj_factor * self.point_weights)[:, None, None] * out.hess
        if obj.terminal is not None and obj_factor != 0.0:
            xs, zs, us = self._local_seed(x[-1:], z[-1:], u[-1:], ad.Dual2)
            out = obj.terminal(xs, zs, us, self._d_points[-1:])
            if isinstance(out, ad.Dual2):
                blocks[-1] += obj_factor * out.hess.reshape(n_s, n_s)

        y_eq = np.asarray(y_eq, dtype=float)
        lam = y_eq[self.eq_colloc.reshape(P, n_xz)]
        if np.any(lam):
            seed = ad.Dual2.seed(np.concatenate([x, z], axis=1))
            out = self.dae.residual(seed[:, 0:n_x], xdot, seed[:, n_x:], u,
                                    self._d_points)
            if isinstance(out, ad.Dual2):
                blocks[:, 0:n_xz, 0:n_xz] += np.einsum('pr,prab->pab', lam, out.hess)

        if self.n_path:
            y_ineq = np.asarray(y_ineq, dtype=float)
            mu = y_ineq[self.ineq_path.reshape(P, self.n_path)]
            if np.any(mu):
                xs, zs, us = self._local_seed(x, z, u, ad.Dual2)
                out = self.constraint_spec.path(xs, zs, us, self._d_points)
                if isinstance(out, ad.Dual2):
                    blocks += np.einsum('pr,prab->pab', mu, out.hess)

        move_vals = self._move_hessian_values(obj_factor)
        vals = np.concatenate([blocks.ravel(), move_vals])
        if not np.all(np.isfinite(vals)):
            raise ad.PropagationError(0, 'non-finite Lagrangian Hessian')
        H = sparse.coo_matrix((vals, (self._hess_rows, self._hess_cols)),
                              shape=(self.n, self.n)).tocsr()
        H = 0.5 * (H + H.T)
        return H.tocsr()

    def _move_hessian_values(self, obj_factor):
        wts = self.objective_spec.move_weights
        if wts is None or self.n_u == 0:
            return np.zeros(self._hess_rows.size - self.grid.n_points
                            * (self.n_x + self.n_z + self.n_u) ** 2)
        vals = []
        two_w = 2.0 * obj_factor * np.asarray(wts, dtype=float)
        for n in range(self.n_intervals):
            # u_n enters move n (unless it is the unanchored first) and move n + 1
            count = int(n > 0 or self.previous_control is not None)
            count += int(n < self.n_intervals - 1)
            vals.append(two_w * count)
            if n > 0:
                vals.extend([-two_w, -two_w])
        return np.concatenate(vals)

    ##########################################################################
    # Trajectories
    ##########################################################################

    def initial_guess_constant(self, x, z, u):
        """Decision vector holding physical (x, z, u) constant over the horizon."""
        s = self.dae.scales
        N, d = self.grid.n_elements, self.grid.degree
        xn = np.asarray(x, dtype=float) / s.x
        zn = np.asarray(z, dtype=float) / s.z
        un = np.asarray(u, dtype=float) / s.u
        return self.pack({'x_start': np.tile(xn, (N + 1, 1)),
                          'x_col': np.tile(xn, (N, d, 1)),
                          'z_col': np.tile(zn, (N, d, 1)),
                          'u': np.tile(un, (self.n_intervals, 1))})

    def embed_trajectory(self, x_start, x_col, z_col, u):
        """Pack physical arrays (shapes as in unpack) into a decision vector."""
        s = self.dae.scales
        return self.pack({'x_start': np.asarray(x_start, dtype=float) / s.x,
                          'x_col': np.asarray(x_col, dtype=float) / s.x,
                          'z_col': np.asarray(z_col, dtype=float) / s.z,
                          'u': np.asarray(u, dtype=float) / s.u})

    def shift(self, w, n_intervals):
        """
        Receding-horizon shift by whole control intervals; the tail holds the
        final state, the last algebraic values and the last control.
        """
        parts = self.unpack(w)
        k = int(n_intervals) * self.elements_per_interval
        if k <= 0:
            return np.array(w, dtype=float)
        N = self.grid.n_elements
        k = min(k, N)
        final_x = parts['x_start'][-1]
        x_start = np.concatenate([parts['x_start'][k:], np.tile(final_x, (k, 1))])
        x_col = np.concatenate([parts['x_col'][k:],
                                np.tile(final_x, (k, self.grid.degree, 1))])
        z_col = np.concatenate([parts['z_col'][k:],
                                np.tile(parts['z_col'][-1, -1], (k, self.grid.degree, 1))])
        ku = min(int(n_intervals), self.n_intervals)
        u = np.concatenate([parts['u'][ku:], np.tile(parts['u'][-1], (ku, 1))])
        return self.pack({'x_start': x_start[:N + 1], 'x_col': x_col[:N],
                          'z_col': z_col[:N], 'u': u[:self.n_intervals]})

    def shift_multipliers(self, y_eq, y_ineq, n_intervals):
        """Shift equality/inequality multipliers by whole control intervals."""
        k = int(n_intervals) * self.elements_per_interval
        y_eq = np.asarray(y_eq, dtype=float)
        y_ineq = np.asarray(y_ineq, dtype=float)
        if k <= 0:
            return y_eq.copy(), y_ineq.copy()
        N = self.grid.n_elements
        k = min(k, N)
        colloc = y_eq[self.eq_colloc]
        contin = y_eq[self.eq_contin]
        new_eq = y_eq.copy()
        new_eq[self.eq_colloc] = np.concatenate([colloc[k:], np.repeat(colloc[-1:], k, axis=0)])
        new_eq[self.eq_contin] = np.concatenate([contin[k:], np.repeat(contin[-1:], k, axis=0)])
        new_ineq = y_ineq.copy()
        if self.n_path:
            path = y_ineq[self.ineq_path]
            new_ineq[self.ineq_path] = np.concatenate([path[k:],
                                                       np.repeat(path[-1:], k, axis=0)])
        return new_eq, new_ineq

    def extract_trajectory(self, w):
        """Denormalized trajectory of a decision vector; see Trajectory."""
        parts = self.unpack(w)
        s = self.dae.scales
        grid = self.grid
        return Trajectory(
            element_times=grid.element_boundaries * s.time,
            collocation_times=grid.collocation_times * s.time,
            x_start=parts['x_start'] * s.x,
            x_col=parts['x_col'] * s.x,
            z_col=parts['z_col'] * s.z,
            control_times=np.linspace(0.0, 1.0, self.n_intervals + 1) * s.time,
            u=parts['u'] * s.u,
            collocation_points=grid.collocation_points)

    def to_nlp_spec(self, x0=None, **kwargs):
        """NlpSpec over this transcription; extra kwargs are NlpSpec fields."""
        if x0 is None:
            x0 = np.zeros(self.n)
        return NlpSpec(
            n=self.n, x0=np.asarray(x0, dtype=float),
            lower=self.lower.copy(), upper=self.upper.copy(),
            objective=self.objective, gradient=self.objective_gradient,
            eq_constraints=self.eq_constraints, eq_jacobian=self.eq_jacobian,
            ineq_constraints=self.ineq_constraints, ineq_jacobian=self.ineq_jacobian,
            hessian=self.lagrangian_hessian,
            m_eq=self.m_eq, m_ineq=self.m_ineq,
            blocks=self.kkt_blocks, **kwargs)


def transcribe(dae, grid, n_intervals, objective=None, constraints=None,
               initial_state=None, disturbance=(), previous_control=None):
    """
    Build the collocation NLP of a normalized DAE over one horizon.

    Inputs:
    - dae: ScaledDae (normalized residual, scales)
    - grid: CollocationGrid on normalized time
    - n_intervals: number of piecewise-constant control intervals N_p; every
      interval must hold the same whole number of elements
    - objective: ObjectiveSpec or None
    - constraints: ConstraintSpec or None
    - initial_state: normalized initial differential state
    - disturbance: physical disturbance vector held over the horizon
    - previous_control: normalized control applied before the horizon

    Returns a TranscribedNlp.
    """
    if initial_state is None:
        raise LayoutError('an initial state is required')
    return TranscribedNlp(dae, grid, n_intervals, objective, constraints,
                          initial_state, disturbance, previous_control)


@dataclasses.dataclass(eq=False)
class Trajectory(object):
    """
    Physical-unit trajectory of one horizon. Times are in seconds from the
    start of the horizon.
    """
    element_times: np.ndarray
    collocation_times: np.ndarray
    x_start: np.ndarray
    x_col: np.ndarray
    z_col: np.ndarray
    control_times: np.ndarray
    u: np.ndarray
    collocation_points: np.ndarray

    @property
    def times(self):
        return self.collocation_times.reshape(-1)

    @property
    def states(self):
        return self.x_col.reshape(-1, self.x_col.shape[-1])

    @property
    def algebraic(self):
        return self.z_col.reshape(-1, self.z_col.shape[-1])

    def state_at(self, t):
        """Lagrange-interpolated differential state at times t (seconds)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        bounds = self.element_times
        e = np.clip(np.searchsorted(bounds, t, side='right') - 1, 0, len(bounds) - 2)
        out = np.zeros((t.size, self.x_start.shape[1]))
        nodes = np.concatenate([[0.0], self.collocation_points])
        for i in range(t.size):
            k = e[i]
            tau = (t[i] - bounds[k]) / (bounds[k + 1] - bounds[k])
            samples = np.vstack([self.x_start[k][None, :], self.x_col[k]])
            out[i] = lagrange_matrix(nodes, tau)[0].dot(samples)
        return out

    def control_at(self, t):
        """Piecewise-constant control at times t (seconds)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = np.clip(np.searchsorted(self.control_times, t, side='right') - 1,
                    0, self.u.shape[0] - 1)
        return self.u[n]
