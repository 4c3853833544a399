"""Exception hierarchy shared by every module.

All errors derive from :class:`StrataRandError` (itself a ``ValueError``) so
callers can catch one type at the CLI boundary and map it to exit code 1.
"""


class StrataRandError(ValueError):
    pass


class SchemaError(StrataRandError):
    """A required column is missing from the input file."""


class ParseError(StrataRandError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyInputError(StrataRandError):
    pass


class DimensionError(StrataRandError):
    pass


class DomainError(StrataRandError):
    """Argument outside the mathematical domain of an operation."""


class EnumerationTooLarge(StrataRandError):
    def __init__(self, message, log_count):
        super().__init__(message)
        self.log_count = log_count


class CouplingUndefined(StrataRandError):
    pass


class TieError(StrataRandError):
    def __init__(self, message, stratum=None):
        super().__init__(message)
        self.stratum = stratum


class DegenerateVarianceError(StrataRandError):
    pass


class SingularCovarianceError(StrataRandError):
    def __init__(self, message, lambda_min):
        super().__init__(message)
        self.lambda_min = lambda_min
