"""Exception hierarchy.

Every error raised by the package derives from :class:`RerandError`. The
two intermediate classes map onto CLI exit codes: validation problems
exit with 2, numerical problems exit with 3.
"""


class RerandError(Exception):
    """Base class for all package errors."""


class ValidationError(RerandError, ValueError):
    """Bad input: wrong shape, wrong values, wrong file contents."""


class NumericalError(RerandError, ArithmeticError):
    """A computation is ill-posed for the given data."""


class InvalidDimensionError(ValidationError):
    pass


class EmptyPoolError(ValidationError):
    pass


class CapacityError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class InvalidGramError(ValidationError):
    pass


class DesignMismatchError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class SingularDesignError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class CollinearDesignError(NumericalError):
    pass


class DegenerateDistributionError(NumericalError):
    pass


class CriterionError(NumericalError):
    """Criterion evaluation failed at a given prefix length."""

    def __init__(self, s, cause):
        super().__init__(f"criterion failed at prefix s={s}: {cause}")
        self.s = s
        self.cause = cause
