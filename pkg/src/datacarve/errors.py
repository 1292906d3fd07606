"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map it onto its
documented exit-code contract without a lookup table.
"""


class CarveError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class DataError(CarveError):
    """Input data or a summary violates a documented invariant."""


class DegenerateSampleError(DataError):
    pass


class InvalidSelectionError(DataError):
    pass


class DegenerateDesignError(DataError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class InsufficientSampleError(DataError):
    pass


class IncompatibleStudiesError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class FormatVersionError(DataError):
    pass


class ParseError(DataError):
    pass


class UnavailableDiagnosticError(DataError):
    pass


class CapabilityError(DataError):
    """A site cannot produce the requested summary from what it retained."""


class BarrierDomainError(DataError):
    pass


class OracleInfeasibleError(CarveError):
    pass


class ConfigurationError(DataError):
    pass


class SolverError(CarveError):
    """An iterative solver failed to reach its tolerance."""

    exit_code = 3

    def __init__(self, message, last_iterate=None, trace=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.trace = trace
