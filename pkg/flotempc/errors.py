"""
Exception types shared across the package.

Solver outcomes are reported through SolveResult.status and are not raised;
everything here is for bad inputs, broken configuration and simulation faults.
"""


class FlotationError(Exception):
    """Base class for all errors raised by flotempc."""


class ConfigurationError(FlotationError, ValueError):
    pass


class InputError(FlotationError, ValueError):
    pass


class DomainError(FlotationError, ValueError):
    """A state left its physical domain; `variable` names the offender."""

    def __init__(self, variable, value, message=None):
        self.variable = variable
        self.value = value
        if message is None:
            message = '%s = %r is outside its physical domain' % (variable, value)
        super(DomainError, self).__init__(message)


class LayoutError(FlotationError, ValueError):
    pass


class PropagationError(FlotationError, ArithmeticError):
    """NaN or Inf appeared while propagating derivatives through row `row`."""

    def __init__(self, row, message=None):
        self.row = row
        if message is None:
            message = 'non-finite value while differentiating output row %d' % row
        super(PropagationError, self).__init__(message)


class NonConvergenceError(FlotationError, RuntimeError):

    def __init__(self, message, residual_norm):
        self.residual_norm = residual_norm
        super(NonConvergenceError, self).__init__(
            '%s (last residual norm %.3e)' % (message, residual_norm))


class InfeasibleSteadyStateError(FlotationError, RuntimeError):
    pass


class SimulationFault(FlotationError, RuntimeError):

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super(SimulationFault, self).__init__(message)


class ComparisonError(FlotationError, ValueError):
    pass
