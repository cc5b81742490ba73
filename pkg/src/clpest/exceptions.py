"""Typed errors raised across the package.

Every error carries a stable ``code`` string and the CLI exit status it maps
to (2 configuration, 3 data, 4 numerical).
"""


class ClpError(Exception):
    code = "error"
    exit_status = 1

    def to_record(self):
        return {"error": self.code, "message": str(self)}


class ConfigError(ClpError, ValueError):
    code = "config_error"
    exit_status = 2


class DataError(ClpError, ValueError):
    code = "data_error"
    exit_status = 3


class ParseError(DataError):
    code = "parse_error"


class MissingColumn(DataError):
    code = "missing_column"


class NonNumericCell(DataError):
    code = "non_numeric_cell"


class EmptyData(DataError):
    code = "empty_data"


class SupportViolation(DataError):
    code = "support_violation"


class CellTooSmall(DataError):
    code = "cell_too_small"


class NegativeDensity(DataError):
    code = "negative_density"


class NumericalError(ClpError, ArithmeticError):
    code = "numerical_error"
    exit_status = 4


class SingularSystem(NumericalError):
    code = "singular_system"


class NonFiniteMoment(NumericalError):
    code = "non_finite_moment"


class DegenerateVariance(NumericalError):
    code = "degenerate_variance"


class ConvergenceError(NumericalError):
    code = "non_convergence"


class Separation(ConvergenceError):
    code = "separation"


class TooManyFailures(NumericalError):
    code = "too_many_failures"
