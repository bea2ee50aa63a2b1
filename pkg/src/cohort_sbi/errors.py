"""Exception hierarchy shared by the library and the CLI.

The CLI prints ``<ClassName>: <message>`` on one line, so class names are
part of the machine-readable surface.
"""


class CohortSBIError(Exception):
    """Base class for all package errors."""


class DomainError(CohortSBIError, ValueError):
    """A numeric argument lies outside the domain of an operation."""


class ConfigurationError(CohortSBIError):
    pass


class FormatError(CohortSBIError, ValueError):
    """Malformed input file."""


class ConsistencyError(CohortSBIError, ValueError):
    """Inputs are individually valid but contradict each other."""


class ContractError(CohortSBIError, ValueError):
    """Caller violated a shape or size precondition."""


class NumericError(CohortSBIError, ArithmeticError):
    pass


class LeakageError(CohortSBIError):
    """Posterior estimate puts almost no mass inside the prior support."""


class TrainingError(CohortSBIError):
    pass
