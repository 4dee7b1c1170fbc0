import pytest

from flotempc import selfcheck


@pytest.mark.parametrize('check', [selfcheck.check_quadrature,
                                   selfcheck.check_collocation_order,
                                   selfcheck.check_solver_suite,
                                   selfcheck.check_steady_state_balance])
def test_fast_checks_pass(check):
    result = check()
    assert result.passed, result.detail


def test_failing_check_is_reported_not_raised(monkeypatch):
    def broken():
        raise RuntimeError('boom')
    broken.__name__ = 'check_broken'
    monkeypatch.setattr(selfcheck, 'CHECKS', (selfcheck.check_quadrature, broken))
    passed, results = selfcheck.run_selfcheck(verbose=False)
    assert not passed
    assert results[1].name == 'broken'
    assert 'RuntimeError: boom' in results[1].detail


@pytest.mark.slow
def test_full_selfcheck():
    passed, results = selfcheck.run_selfcheck(verbose=False)
    assert passed, [(r.name, r.detail) for r in results if not r.passed]


@pytest.mark.slow
def test_derivative_check_on_few_points():
    result = selfcheck.check_derivatives(n_points=2, n_columns=6, seed=3)
    assert result.passed, result.detail
    assert 'Hessian' in result.detail
