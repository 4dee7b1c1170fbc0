"""
Property checks runnable without the test suite (`flotempc selfcheck`).
"""
from __future__ import print_function, division
from builtins import range
from builtins import object
import dataclasses
import logging

import numpy as np

from flotempc import autodiff as ad
from flotempc.collocation import (LinearTestDae, ScaledDae, UnitScales, make_grid,
                                  radau_points, radau_weights, transcribe)
from flotempc.controllers.empc import EconomicMpc
from flotempc.data_utils import load_default_params
from flotempc.flotation_model import (DisturbanceInput, steady_state_solve,
                                      stream_flows)
from flotempc.gradient_check import first_order_step, within_tolerance
from flotempc.nlp_solver import NlpSpec, OPTIMAL, solve

logger = logging.getLogger(__name__)


@dataclasses.dataclass(eq=False)
class CheckResult(object):
    name: str
    passed: bool
    detail: str = ''


##############################################################################
# Analytic NLPs with known optima
##############################################################################


def _bounded_square():
    return NlpSpec(n=1, x0=[3.0], objective=lambda x: x[0] * x[0],
                   ineq_constraints=lambda x: ad.stack([1.0 - x[0]]),
                   name='bounded_square'), np.array([1.0]), 1.0


def _rosenbrock():
    def f(x):
        a = 1.0 - x[0]
        b = x[1] - x[0] * x[0]
        return a * a + 100.0 * b * b
    return NlpSpec(n=2, x0=[-1.2, 1.0], objective=f, name='rosenbrock'), \
        np.array([1.0, 1.0]), 0.0


def _equality_quadratic():
    return NlpSpec(n=2, x0=[0.0, 0.0], objective=lambda x: x[0] * x[0] + x[1] * x[1],
                   eq_constraints=lambda x: ad.stack([x[0] + x[1] - 1.0]),
                   name='equality_quadratic'), np.array([0.5, 0.5]), 0.5


def _disk():
    return NlpSpec(n=2, x0=[0.0, 0.0], objective=lambda x: -x[0] - x[1],
                   ineq_constraints=lambda x: ad.stack([x[0] * x[0] + x[1] * x[1] - 1.0]),
                   name='disk'), np.full(2, np.sqrt(0.5)), -np.sqrt(2.0)


def _box():
    def f(x):
        a = x[0] - 2.0
        b = x[1] + 1.0
        return a * a + b * b
    return NlpSpec(n=2, x0=[0.5, 0.5], objective=f, lower=[0.0, 0.0],
                   upper=[1.0, 1.0], name='box'), np.array([1.0, 0.0]), 2.0


def _hs071():
    def f(x):
        return x[0] * x[3] * (x[0] + x[1] + x[2]) + x[2]

    def ineq(x):
        return ad.stack([25.0 - x[0] * x[1] * x[2] * x[3]])

    def eq(x):
        return ad.stack([x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3] - 40.0])

    x_star = np.array([1.0, 4.742999637, 3.821149984, 1.379408291])
    return NlpSpec(n=4, x0=[1.0, 5.0, 5.0, 1.0], objective=f, eq_constraints=eq,
                   ineq_constraints=ineq, lower=np.ones(4), upper=np.full(4, 5.0),
                   name='hs071'), x_star, 17.014017289


ANALYTIC_PROBLEMS = {
    'bounded_square': _bounded_square,
    'rosenbrock': _rosenbrock,
    'equality_quadratic': _equality_quadratic,
    'disk': _disk,
    'box': _box,
    'hs071': _hs071,
}


def analytic_problem(name):
    """(NlpSpec, x_star, f_star) of one problem of the analytic suite."""
    return ANALYTIC_PROBLEMS[name]()


##############################################################################
# Collocation
##############################################################################


def linear_test_solution(n_elements, degree=3, rate=-1.0):
    """
    x(1) of the collocation solution of xdot = rate * x, x(0) = 1 on [0, 1],
    computed with the interior-point solver.
    """
    model = LinearTestDae(rate)
    dae = ScaledDae(model, UnitScales.for_model(model))
    nlp = transcribe(dae, make_grid(n_elements, degree), 1, initial_state=[1.0])
    result = solve(nlp.to_nlp_spec(x0=np.ones(nlp.n), name='linear_test'),
                   {'kkt_tolerance': 1e-13})
    if result.status != OPTIMAL:
        raise RuntimeError('linear test solve ended with %s' % result.status)
    return float(result.x[nlp.x_start[-1, 0]])


def convergence_slope(element_counts=(1, 2, 4), degree=3, rate=-1.0):
    """Least-squares log-log slope of the error at t = 1 against 1/N."""
    errors = [abs(linear_test_solution(n, degree, rate) - np.exp(rate))
              for n in element_counts]
    h = 1.0 / np.asarray(element_counts, dtype=float)
    slope = np.polyfit(np.log(h), np.log(errors), 1)[0]
    return float(slope), errors


def nominal_flotation_nlp(feed_lpm=56.0, params_bundle=None):
    """
    The controller's NLP at the nominal operating point and a decision vector
    holding the steady state over the horizon.
    """
    bundle = params_bundle or load_default_params()
    params, nominal = bundle['params'], bundle['nominal']
    u = np.array([nominal['jg_setpoint'], nominal['pulp_height_setpoint']])
    d = DisturbanceInput.from_lpm(feed_lpm).as_array()
    mpc = EconomicMpc(params, bundle['scales'])
    x, z = steady_state_solve(u, d, params)
    nlp = mpc.transcribe(x, d, u)
    return mpc, nlp, nlp.initial_guess_constant(x, z, u)


##############################################################################
# Checks
##############################################################################


def check_quadrature():
    worst = 0.0
    for d in (1, 2, 3):
        tau = radau_points(d)
        w = radau_weights(tau)
        for k in range(2 * d - 1):
            worst = max(worst, abs(np.dot(w, tau ** k) - 1.0 / (k + 1)))
    return CheckResult('quadrature', worst <= 1e-12, 'max error %.2e' % worst)


def check_collocation_order():
    slope, errors = convergence_slope()
    return CheckResult('collocation_order', abs(slope - 5.0) <= 0.4,
                       'slope %.3f, errors %s' % (slope, ', '.join('%.2e' % e
                                                                   for e in errors)))


def _lagrangian_gradient(nlp, w, y_eq, y_ineq):
    g = nlp.objective_gradient(w)
    g = g + nlp.eq_jacobian(w).T.dot(y_eq)
    if nlp.m_ineq:
        g = g + nlp.ineq_jacobian(w).T.dot(y_ineq)
    return g


def check_derivatives(n_points=10, n_columns=12, seed=0, atol=1e-5, rtol=1e-3):
    """
    Equality and inequality Jacobians and the Lagrangian Hessian of the
    flotation NLP against central differences on random columns at perturbed
    steady-state points. Tolerances are absolute or relative to each entry.
    """
    mpc, nlp, w0 = nominal_flotation_nlp()
    rng = np.random.default_rng(seed)
    ok = True
    worst = 0.0
    worst_hessian = 0.0
    for _ in range(n_points):
        w = w0 * (1.0 + 0.01 * rng.standard_normal(w0.size))
        y_eq = rng.standard_normal(nlp.m_eq)
        y_ineq = np.abs(rng.standard_normal(nlp.m_ineq))
        J = nlp.eq_jacobian(w).tocsc()
        J_I = nlp.ineq_jacobian(w).tocsc() if nlp.m_ineq else None
        H = nlp.lagrangian_hessian(w, 1.0, y_eq, y_ineq).tocsc()
        h1 = first_order_step(w)
        for j in rng.choice(nlp.n, size=n_columns, replace=False):
            e = np.zeros(nlp.n)
            e[j] = h1[j]
            num = (nlp.eq_constraints(w + e) - nlp.eq_constraints(w - e)) / (2 * h1[j])
            ana = J[:, j].toarray().ravel()
            ok &= within_tolerance(ana, num, atol, rtol)
            worst = max(worst, float(np.max(np.abs(ana - num))))
            if J_I is not None:
                num = (nlp.ineq_constraints(w + e) - nlp.ineq_constraints(w - e)) / (2 * h1[j])
                ana = J_I[:, j].toarray().ravel()
                ok &= within_tolerance(ana, num, atol, rtol)
                worst = max(worst, float(np.max(np.abs(ana - num))))
            h2 = np.cbrt(np.finfo(float).eps) * max(1.0, abs(w[j]))
            e[j] = h2
            num = (_lagrangian_gradient(nlp, w + e, y_eq, y_ineq)
                   - _lagrangian_gradient(nlp, w - e, y_eq, y_ineq)) / (2 * h2)
            ana = H[:, j].toarray().ravel()
            ok &= within_tolerance(ana, num, atol, rtol)
            worst_hessian = max(worst_hessian, float(np.max(np.abs(ana - num))))
    return CheckResult('derivatives', bool(ok), 'worst deviation: Jacobian %.2e, Hessian %.2e'
                       % (worst, worst_hessian))


def check_solver_suite(tol=1e-6):
    failures = []
    for name in sorted(ANALYTIC_PROBLEMS):
        spec, x_star, f_star = analytic_problem(name)
        result = solve(spec)
        if (result.status != OPTIMAL or np.max(np.abs(result.x - x_star)) > tol
                or abs(result.objective - f_star) > tol * max(1.0, abs(f_star))):
            failures.append('%s (%s)' % (name, result.status))
    return CheckResult('solver_suite', not failures,
                       'failed: %s' % ', '.join(failures) if failures else
                       '%d problems' % len(ANALYTIC_PROBLEMS))


def check_steady_state_balance():
    bundle = load_default_params()
    params, nominal = bundle['params'], bundle['nominal']
    u = np.array([nominal['jg_setpoint'], nominal['pulp_height_setpoint']])
    d = DisturbanceInput.from_lpm(nominal['feed_lpm'])
    x, z = steady_state_solve(u, d, params)
    flows = stream_flows(x, z, d, params)
    gap = np.abs(flows['feed'] - flows['tails'] - flows['concentrate']) / flows['feed']
    return CheckResult('steady_state_balance', bool(np.all(gap <= 1e-8)),
                       'max relative gap %.2e' % float(np.max(gap)))


CHECKS = (check_quadrature, check_collocation_order, check_derivatives,
          check_solver_suite, check_steady_state_balance)


def run_selfcheck(verbose=True):
    """Run every check; returns (all_passed, list of CheckResult)."""
    results = []
    for check in CHECKS:
        try:
            result = check()
        except Exception as e:
            result = CheckResult(check.__name__[len('check_'):], False,
                                 '%s: %s' % (type(e).__name__, e))
        results.append(result)
        if verbose:
            logger.info('%-22s %s  %s', result.name, 'ok' if result.passed else 'FAILED',
                        result.detail)
    return all(r.passed for r in results), results
