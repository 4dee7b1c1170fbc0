import numpy as np
import pytest

from flotempc import autodiff as ad
from flotempc.errors import PropagationError
from flotempc.gradient_check import (eval_numerical_gradient, eval_numerical_hessian,
                                     rel_error)


def _mixed(x):
    return (ad.exp(x[0]) * x[1] + ad.softplus(x[0] * x[1]) + ad.sqrt(x[1]) / x[0]
            + x[0] ** 3 - ad.log(x[1]) * ad.sigmoid(x[0]))


def test_jacobian_hand_example():
    J = ad.jacobian(lambda x: ad.stack([x[0] * x[0], x[0] * x[1]]), np.array([3.0, 2.0]))
    np.testing.assert_array_equal(J.toarray(), [[6.0, 0.0], [2.0, 3.0]])


def test_jacobian_of_identity():
    J = ad.jacobian(lambda x: x, np.arange(4.0))
    np.testing.assert_array_equal(J.toarray(), np.eye(4))


def test_jacobian_of_constant_is_empty():
    J = ad.jacobian(lambda x: np.ones(3), np.zeros(2))
    assert J.shape == (3, 2)
    assert J.nnz == 0


def test_gradient_matches_finite_differences():
    x = np.array([0.7, 1.3])
    g = ad.gradient(_mixed, x)
    num = eval_numerical_gradient(lambda v: float(_mixed(v)), x)
    assert rel_error(g, num) < 1e-6


def test_hessian_of_sum_of_squares():
    H = ad.hessian_of_lagrangian(lambda x: x[0] * x[0] + x[1] * x[1], None,
                                 np.array([0.3, -1.0]), [])
    np.testing.assert_array_equal(H.toarray(), 2.0 * np.eye(2))


def test_hessian_of_bilinear_term():
    H = ad.hessian_of_lagrangian(lambda x: x[0] * x[1], None, np.array([2.0, 5.0]), [])
    np.testing.assert_array_equal(H.toarray(), [[0.0, 1.0], [1.0, 0.0]])


def test_hessian_weights_constraints_by_multipliers():
    H = ad.hessian_of_lagrangian(None, lambda x: ad.stack([x[0] * x[1], x[0] ** 2]),
                                 np.array([1.0, 1.0]), [2.0, 3.0])
    np.testing.assert_allclose(H.toarray(), [[6.0, 2.0], [2.0, 0.0]])


def test_hessian_matches_finite_differences():
    x = np.array([0.7, 1.3])
    H = ad.hessian_of_lagrangian(_mixed, None, x, []).toarray()
    num = eval_numerical_hessian(lambda v: ad.gradient(_mixed, v), x)
    assert rel_error(H, num) < 1e-6
    np.testing.assert_array_equal(H, H.T)


def test_batched_duals_differentiate_each_point():
    v = ad.Dual1.seed(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = v[:, 0] * v[:, 1]
    np.testing.assert_array_equal(out.value, [2.0, 12.0])
    np.testing.assert_array_equal(out.deriv, [[2.0, 1.0], [4.0, 3.0]])


def test_stack_lifts_plain_arrays():
    v = ad.Dual1.seed(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ad.stack([v[:, 0], np.ones(2)], axis=1)
    assert out.value.shape == (2, 2)
    np.testing.assert_array_equal(out.deriv[:, 1, :], np.zeros((2, 2)))
    np.testing.assert_array_equal(out.deriv[:, 0, :], [[1.0, 0.0], [1.0, 0.0]])


def test_ellipsis_indexing_is_rejected():
    v = ad.Dual1.seed(np.ones(3))
    with pytest.raises(IndexError):
        v[..., 0]


def test_sum_rejects_negative_axis():
    with pytest.raises(ValueError):
        ad.sum(ad.Dual1.seed(np.ones(3)), axis=-1)


def test_nan_propagation_names_the_row():
    with np.errstate(invalid='ignore'):
        with pytest.raises(PropagationError) as excinfo:
            ad.jacobian(lambda x: ad.stack([x[1], ad.log(x[0])]), np.array([-1.0, 1.0]))
    assert excinfo.value.row == 1


def test_sparsity_of_separable_function_is_diagonal():
    pattern = ad.detect_sparsity(lambda x: x * x, np.arange(1.0, 5.0))
    np.testing.assert_array_equal(pattern.to_mask(), np.eye(4, dtype=bool))
    np.testing.assert_array_equal(ad.color_columns(pattern), np.zeros(4))


def test_sparsity_of_constant_function_is_empty():
    pattern = ad.detect_sparsity(lambda x: np.zeros(3), np.ones(2))
    assert pattern.shape == (3, 2)
    assert pattern.nnz == 0


def test_compressed_jacobian_equals_dense():
    def f(x):
        return ad.stack([x[0] * x[1], ad.exp(x[2]), x[1] + x[3], x[3] * x[3]])

    x = np.array([0.5, -1.5, 0.25, 2.0])
    pattern = ad.detect_sparsity(f, x)
    np.testing.assert_allclose(ad.jacobian(f, x, pattern).toarray(),
                               ad.jacobian(f, x).toarray())
    assert ad.color_columns(pattern).max() < x.size - 1


def test_pattern_rejects_out_of_range_indices():
    with pytest.raises(ValueError):
        ad.SparsityPattern([0, 3], [0, 1], (2, 2))
