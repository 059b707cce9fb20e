"""Exception hierarchy shared by every module."""


class DivmaxError(Exception):
    """Base class for library errors."""


class ContractViolation(DivmaxError, ValueError):
    """A precondition on shapes, layouts or simplex weights was broken."""


class ConfigurationError(DivmaxError, ValueError):
    """An unknown option or an impossible parameter combination."""


class NumericalError(DivmaxError, ArithmeticError):
    """A loss or gradient became non-finite; the run diverged."""


class DegenerateSupportError(DivmaxError):
    """The point set spans less than its ambient dimension."""


class GuardConflictError(ConfigurationError):
    """Guards request mutually exclusive support regimes."""
