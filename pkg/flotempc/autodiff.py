from __future__ import division
from builtins import range
from builtins import object
import numpy as np
from scipy import sparse
from scipy.special import expit

from flotempc.errors import PropagationError


"""
Forward-mode automatic differentiation on numpy arrays.

Three number types share one arithmetic surface:

- Dual1: value plus first derivatives along n seed directions.
- Dual2: value, gradient and Hessian along n seed directions.
- SparsityTracer: value plus a boolean mask telling which seeds an entry
  depends on (structural propagation of index sets).

Values may be arrays. For a value of shape S the first-order part has shape
S + (n,) and the second-order part S + (n, n). Indexing, sum and stack act on
the leading (value) axes only, so a model written with x[:, i] style indexing
can be evaluated on a whole batch of points in one pass. Ellipsis indexing and
negative axes are not supported because they would reach into the derivative
axes.

Model code calls the module-level functions (exp, log, sqrt, softplus, ...)
which fall through to numpy for plain arrays.
"""


def _is_active(x):
    return isinstance(x, _Active)


def value_of(x):
    """Strip derivative information and return the value as an array."""
    if _is_active(x):
        return x.value
    return np.asarray(x, dtype=float)


class _Active(object):
    """Operator plumbing shared by the three active number types."""

    # Make ndarray <op> Active defer to our reflected operators.
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __add__(self, other):
        return self._add(other)

    def __radd__(self, other):
        return self._add(other)

    def __sub__(self, other):
        if _is_active(other):
            return self._add(other._neg())
        return self._add(-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return self._neg()._add(other)

    def __neg__(self):
        return self._neg()

    def __pos__(self):
        return self

    def __mul__(self, other):
        return self._mul(other)

    def __rmul__(self, other):
        return self._mul(other)

    def __truediv__(self, other):
        if _is_active(other):
            return self._mul(other._reciprocal())
        return self._mul(1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self._reciprocal()._mul(other)

    __div__ = __truediv__
    __rdiv__ = __rtruediv__

    def __pow__(self, power):
        if _is_active(power):
            return exp(log(self) * power)
        p = float(power)
        v = self.value
        if p == 2.0:
            return self._unary(v * v, 2.0 * v, 2.0 * np.ones_like(v))
        if p == 1.0:
            return self
        return self._unary(v ** p, p * v ** (p - 1.0),
                           p * (p - 1.0) * v ** (p - 2.0))

    def __rpow__(self, base):
        return exp(self * np.log(base))

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return self.value.shape[0]

    def _check_key(self, key):
        keys = key if isinstance(key, tuple) else (key,)
        for k in keys:
            if k is Ellipsis:
                raise IndexError('Ellipsis indexing is not supported on active values')


class Dual1(_Active):
    """
    First-order dual number.

    Inputs:
    - value: array of shape S
    - deriv: array of shape S + (n,)
    """

    def __init__(self, value, deriv):
        self.value = np.asarray(value, dtype=float)
        self.deriv = np.asarray(deriv, dtype=float)

    @classmethod
    def seed(cls, x):
        """Seed every entry of the last axis of x as an independent direction."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        deriv = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
        return cls(x, deriv)

    @classmethod
    def seed_directions(cls, x, directions):
        """Seed a 1-D point x of length n with an (n, k) matrix of directions."""
        return cls(np.asarray(x, dtype=float), np.asarray(directions, dtype=float))

    @property
    def n_dirs(self):
        return self.deriv.shape[-1]

    def _lift(self, other):
        return Dual1(other, np.zeros(np.shape(other) + (self.n_dirs,)))

    def _add(self, other):
        if isinstance(other, Dual1):
            return Dual1(self.value + other.value, self.deriv + other.deriv)
        other = np.asarray(other, dtype=float)
        value = self.value + other
        deriv = self.deriv
        if value.shape != self.value.shape:
            deriv = np.broadcast_to(deriv, value.shape + (self.n_dirs,))
        return Dual1(value, deriv)

    def _neg(self):
        return Dual1(-self.value, -self.deriv)

    def _mul(self, other):
        if isinstance(other, Dual1):
            return Dual1(self.value * other.value,
                         self.value[..., None] * other.deriv
                         + other.value[..., None] * self.deriv)
        other = np.asarray(other, dtype=float)
        return Dual1(self.value * other, self.deriv * other[..., None])

    def _unary(self, f, df, d2f=None):
        return Dual1(f, np.asarray(df)[..., None] * self.deriv)

    def _reciprocal(self):
        v = self.value
        return self._unary(1.0 / v, -1.0 / (v * v))

    def __getitem__(self, key):
        self._check_key(key)
        return Dual1(self.value[key], self.deriv[key])

    def _sum(self, axis):
        return Dual1(self.value.sum(axis=axis), self.deriv.sum(axis=axis))

    def __repr__(self):
        return 'Dual1(%r, %r)' % (self.value, self.deriv)


class Dual2(_Active):
    """
    Second-order forward number carrying a full Hessian over its seeds.

    Inputs:
    - value: array of shape S
    - grad: array of shape S + (n,)
    - hess: array of shape S + (n, n), symmetric in its last two axes
    """

    def __init__(self, value, grad, hess):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.asarray(grad, dtype=float)
        self.hess = np.asarray(hess, dtype=float)

    @classmethod
    def seed(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        grad = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
        hess = np.zeros(x.shape + (n, n))
        return cls(x, grad, hess)

    @property
    def n_dirs(self):
        return self.grad.shape[-1]

    @property
    def deriv(self):
        return self.grad

    def _add(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value + other.value, self.grad + other.grad,
                         self.hess + other.hess)
        other = np.asarray(other, dtype=float)
        value = self.value + other
        grad, hess = self.grad, self.hess
        if value.shape != self.value.shape:
            n = self.n_dirs
            grad = np.broadcast_to(grad, value.shape + (n,))
            hess = np.broadcast_to(hess, value.shape + (n, n))
        return Dual2(value, grad, hess)

    def _neg(self):
        return Dual2(-self.value, -self.grad, -self.hess)

    def _mul(self, other):
        if isinstance(other, Dual2):
            a, b = self, other
            cross = a.grad[..., :, None] * b.grad[..., None, :]
            hess = (a.value[..., None, None] * b.hess
                    + b.value[..., None, None] * a.hess
                    + cross + np.swapaxes(cross, -1, -2))
            grad = a.value[..., None] * b.grad + b.value[..., None] * a.grad
            return Dual2(a.value * b.value, grad, hess)
        other = np.asarray(other, dtype=float)
        return Dual2(self.value * other, self.grad * other[..., None],
                     self.hess * other[..., None, None])

    def _unary(self, f, df, d2f):
        df = np.asarray(df)
        d2f = np.asarray(d2f)
        g = self.grad
        hess = (df[..., None, None] * self.hess
                + d2f[..., None, None] * (g[..., :, None] * g[..., None, :]))
        return Dual2(f, df[..., None] * g, hess)

    def _reciprocal(self):
        v = self.value
        return self._unary(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))

    def __getitem__(self, key):
        self._check_key(key)
        return Dual2(self.value[key], self.grad[key], self.hess[key])

    def _sum(self, axis):
        return Dual2(self.value.sum(axis=axis), self.grad.sum(axis=axis),
                     self.hess.sum(axis=axis))

    def __repr__(self):
        return 'Dual2(%r, ...)' % (self.value,)


class SparsityTracer(_Active):
    """
    Structural dependency tracker. `mask[..., j]` is True when the entry may
    depend on seed j. Values are propagated too so that evaluation errors
    still surface, but derivatives are never formed.
    """

    def __init__(self, value, mask):
        self.value = np.asarray(value, dtype=float)
        self.mask = np.asarray(mask, dtype=bool)

    @classmethod
    def seed(cls, x, structural_seed=None):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        if structural_seed is None:
            structural_seed = np.eye(n, dtype=bool)
        mask = np.broadcast_to(np.asarray(structural_seed, dtype=bool),
                               x.shape + (structural_seed.shape[-1],)).copy()
        return cls(x, mask)

    @property
    def n_dirs(self):
        return self.mask.shape[-1]

    def _add(self, other):
        if isinstance(other, SparsityTracer):
            return SparsityTracer(self.value + other.value, self.mask | other.mask)
        value = self.value + np.asarray(other, dtype=float)
        mask = self.mask
        if value.shape != self.value.shape:
            mask = np.broadcast_to(mask, value.shape + (self.n_dirs,))
        return SparsityTracer(value, mask)

    def _neg(self):
        return SparsityTracer(-self.value, self.mask)

    def _mul(self, other):
        if isinstance(other, SparsityTracer):
            return SparsityTracer(self.value * other.value, self.mask | other.mask)
        other = np.asarray(other, dtype=float)
        value = self.value * other
        # Multiplying by a structural zero still counts as a dependency.
        mask = np.broadcast_to(self.mask, value.shape + (self.n_dirs,))
        return SparsityTracer(value, mask)

    def _unary(self, f, df=None, d2f=None):
        return SparsityTracer(f, self.mask)

    def _reciprocal(self):
        with np.errstate(divide='ignore'):
            return SparsityTracer(1.0 / self.value, self.mask)

    def __getitem__(self, key):
        self._check_key(key)
        return SparsityTracer(self.value[key], self.mask[key])

    def _sum(self, axis):
        return SparsityTracer(self.value.sum(axis=axis), self.mask.any(axis=axis))


##############################################################################
# Elementary functions
##############################################################################


def exp(x):
    if _is_active(x):
        e = np.exp(x.value)
        return x._unary(e, e, e)
    return np.exp(x)


def log(x):
    if _is_active(x):
        v = x.value
        return x._unary(np.log(v), 1.0 / v, -1.0 / (v * v))
    return np.log(x)


def sqrt(x):
    if _is_active(x):
        r = np.sqrt(x.value)
        return x._unary(r, 0.5 / r, -0.25 / (r * x.value))
    return np.sqrt(x)


def softplus(x):
    """log(1 + exp(x)), evaluated without overflow."""
    if _is_active(x):
        v = x.value
        s = expit(v)
        return x._unary(np.logaddexp(0.0, v), s, s * (1.0 - s))
    return np.logaddexp(0.0, x)


def sigmoid(x):
    if _is_active(x):
        s = expit(x.value)
        ds = s * (1.0 - s)
        return x._unary(s, ds, ds * (1.0 - 2.0 * s))
    return expit(x)


def square(x):
    return x * x


def sum(x, axis=0):
    """Sum over a leading (value) axis."""
    if axis < 0:
        raise ValueError('negative axes are not supported')
    if _is_active(x):
        return x._sum(axis)
    return np.sum(x, axis=axis)


def _promote(items, broadcast=True):
    proto = None
    for item in items:
        if _is_active(item):
            proto = item
            break
    if proto is None:
        return None, [np.asarray(item, dtype=float) for item in items]
    out = [item if _is_active(item)
           else proto._lift_constant(np.asarray(item, dtype=float))
           for item in items]
    if broadcast:
        shape = np.broadcast_shapes(*[item.shape for item in out])
        out = [item._broadcast_to(shape) for item in out]
    return proto, out


def stack(items, axis=0):
    """Stack scalars/arrays (active or not) along a new leading axis."""
    if axis < 0:
        raise ValueError('negative axes are not supported')
    proto, items = _promote(list(items))
    if proto is None:
        return np.stack(items, axis=axis)
    if isinstance(proto, Dual1):
        return Dual1(np.stack([i.value for i in items], axis=axis),
                     np.stack([i.deriv for i in items], axis=axis))
    if isinstance(proto, Dual2):
        return Dual2(np.stack([i.value for i in items], axis=axis),
                     np.stack([i.grad for i in items], axis=axis),
                     np.stack([i.hess for i in items], axis=axis))
    return SparsityTracer(np.stack([i.value for i in items], axis=axis),
                          np.stack([i.mask for i in items], axis=axis))


def concatenate(items, axis=0):
    if axis < 0:
        raise ValueError('negative axes are not supported')
    proto, lifted = _promote(list(items), broadcast=False)
    if proto is None:
        return np.concatenate(lifted, axis=axis)
    if isinstance(proto, Dual1):
        return Dual1(np.concatenate([i.value for i in lifted], axis=axis),
                     np.concatenate([i.deriv for i in lifted], axis=axis))
    if isinstance(proto, Dual2):
        return Dual2(np.concatenate([i.value for i in lifted], axis=axis),
                     np.concatenate([i.grad for i in lifted], axis=axis),
                     np.concatenate([i.hess for i in lifted], axis=axis))
    return SparsityTracer(np.concatenate([i.value for i in lifted], axis=axis),
                          np.concatenate([i.mask for i in lifted], axis=axis))


def _dual1_lift(self, c):
    return Dual1(c, np.zeros(c.shape + (self.n_dirs,)))


def _dual1_broadcast(self, shape):
    if self.value.shape == tuple(shape):
        return self
    return Dual1(np.broadcast_to(self.value, shape),
                 np.broadcast_to(self.deriv, tuple(shape) + (self.n_dirs,)))


def _dual2_lift(self, c):
    n = self.n_dirs
    return Dual2(c, np.zeros(c.shape + (n,)), np.zeros(c.shape + (n, n)))


def _dual2_broadcast(self, shape):
    if self.value.shape == tuple(shape):
        return self
    n = self.n_dirs
    return Dual2(np.broadcast_to(self.value, shape),
                 np.broadcast_to(self.grad, tuple(shape) + (n,)),
                 np.broadcast_to(self.hess, tuple(shape) + (n, n)))


def _tracer_lift(self, c):
    return SparsityTracer(c, np.zeros(c.shape + (self.n_dirs,), dtype=bool))


def _tracer_broadcast(self, shape):
    if self.value.shape == tuple(shape):
        return self
    return SparsityTracer(np.broadcast_to(self.value, shape),
                          np.broadcast_to(self.mask, tuple(shape) + (self.n_dirs,)))


Dual1._lift_constant = _dual1_lift
Dual1._broadcast_to = _dual1_broadcast
Dual2._lift_constant = _dual2_lift
Dual2._broadcast_to = _dual2_broadcast
SparsityTracer._lift_constant = _tracer_lift
SparsityTracer._broadcast_to = _tracer_broadcast


##############################################################################
# Sparsity patterns and derivative drivers
##############################################################################


class SparsityPattern(object):
    """
    Row/column index lists of the structural nonzeros of a matrix, deduplicated
    and sorted row-major.
    """

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if rows.shape != cols.shape:
            raise ValueError('rows and cols must have the same length')
        m, n = shape
        if rows.size and (rows.min() < 0 or rows.max() >= m
                          or cols.min() < 0 or cols.max() >= n):
            raise ValueError('pattern index out of range for shape %r' % (shape,))
        keys = np.unique(rows * n + cols)
        self.rows = keys // n if n else keys
        self.cols = keys % n if n else keys
        self.shape = (int(m), int(n))

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        return cls(rows, cols, mask.shape)

    @property
    def nnz(self):
        return int(self.rows.size)

    def to_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.rows, self.cols] = True
        return mask

    def contains(self, other):
        """True if every nonzero of `other` is listed in this pattern."""
        return bool(np.all(self.to_mask()[other.to_mask()]))

    def __repr__(self):
        return 'SparsityPattern(shape=%r, nnz=%d)' % (self.shape, self.nnz)


def _check_finite(value, deriv):
    bad_value = ~np.isfinite(value)
    bad_deriv = ~np.isfinite(deriv).reshape(deriv.shape[0], -1).all(axis=1)
    bad = np.nonzero(bad_value | bad_deriv)[0]
    if bad.size:
        raise PropagationError(int(bad[0]))


def color_columns(pattern):
    """
    Greedy distance-2 colouring of the columns of a sparsity pattern: two
    columns share a colour only if they have no row in common.

    Returns an int array of length n with a colour per column.
    """
    m, n = pattern.shape
    mask = pattern.to_mask()
    col_rows = [np.nonzero(mask[:, j])[0] for j in range(n)]
    colors = -np.ones(n, dtype=np.int64)
    # rows_used[c] marks rows already touched by colour c
    rows_used = []
    for j in range(n):
        rows = col_rows[j]
        c = 0
        while c < len(rows_used) and rows_used[c][rows].any():
            c += 1
        if c == len(rows_used):
            rows_used.append(np.zeros(m, dtype=bool))
        rows_used[c][rows] = True
        colors[j] = c
    return colors


def jacobian(f, x, pattern=None):
    """
    Forward-mode Jacobian of a vector function.

    Inputs:
    - f: function mapping a length-n array (or active number) to a length-m
      array built with this module's arithmetic
    - x: point of evaluation, shape (n,)
    - pattern: optional SparsityPattern; when given only the listed entries are
      computed, using one seed per column colour

    Returns:
    - J: scipy.sparse CSR matrix of shape (m, n)
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if pattern is None:
        out = f(Dual1.seed(x))
        if not _is_active(out):
            m = np.asarray(out).size
            return sparse.csr_matrix((m, n))
        _check_finite(out.value.reshape(-1), out.deriv.reshape(-1, n))
        return sparse.csr_matrix(out.deriv.reshape(-1, n))

    colors = color_columns(pattern)
    n_colors = int(colors.max()) + 1 if n else 0
    seeds = np.zeros((n, max(n_colors, 1)))
    seeds[np.arange(n), colors] = 1.0
    out = f(Dual1.seed_directions(x, seeds))
    m = pattern.shape[0]
    if not _is_active(out):
        return sparse.csr_matrix((m, n))
    compressed = out.deriv.reshape(m, -1)
    _check_finite(out.value.reshape(-1), compressed)
    values = compressed[pattern.rows, colors[pattern.cols]]
    return sparse.coo_matrix((values, (pattern.rows, pattern.cols)),
                             shape=(m, n)).tocsr()


def gradient(f, x):
    """Dense gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = f(Dual1.seed(x))
    if not _is_active(out):
        return np.zeros_like(x)
    g = np.asarray(out.deriv, dtype=float).reshape(-1)
    if not np.all(np.isfinite(g)):
        raise PropagationError(0)
    return g


def hessian_of_lagrangian(objective, constraints, x, multipliers, obj_factor=1.0):
    """
    Hessian of  obj_factor * objective(x) + multipliers . constraints(x)
    by second-order forward propagation over all n seed directions.

    Inputs:
    - objective: scalar function, or None
    - constraints: vector function, or None
    - x: point, shape (n,)
    - multipliers: weights for the constraint rows, shape (m,)

    Returns:
    - H: symmetric scipy.sparse CSR matrix of shape (n, n)
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    xd = Dual2.seed(x)
    hess = np.zeros((n, n))
    if objective is not None:
        out = objective(xd)
        if _is_active(out):
            hess += obj_factor * out.hess.reshape(n, n)
    if constraints is not None and multipliers is not None and len(multipliers):
        out = constraints(xd)
        if _is_active(out):
            lam = np.asarray(multipliers, dtype=float)
            hess += np.tensordot(lam, out.hess.reshape(-1, n, n), axes=(0, 0))
    if not np.all(np.isfinite(hess)):
        raise PropagationError(int(np.nonzero(~np.isfinite(hess))[0][0]))
    # Contractions over the multipliers may round the two triangles differently.
    hess = 0.5 * (hess + hess.T)
    assert np.array_equal(hess, hess.T), 'Lagrangian Hessian lost symmetry'
    return sparse.csr_matrix(hess)


def detect_sparsity(f, x, structural_seed=None):
    """
    Structural Jacobian sparsity of f at x by dependency-mask propagation.

    The returned pattern is a superset of the nonzeros of the true Jacobian at
    any point where f follows the same arithmetic path.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    with np.errstate(all='ignore'):
        out = f(SparsityTracer.seed(x, structural_seed))
    if not _is_active(out):
        m = np.asarray(out).size
        return SparsityPattern([], [], (m, n))
    mask = out.mask.reshape(-1, out.mask.shape[-1])
    return SparsityPattern.from_mask(mask)
