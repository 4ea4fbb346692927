"""Exception hierarchy shared by all arccap modules.

The CLI maps each family onto an exit code: data/format problems exit 2,
numeric or convergence failures exit 3.
"""


class ArcCapError(Exception):
    exit_code = 1


class ValidationError(ArcCapError, ValueError):
    exit_code = 2


class SubmodularityError(ValidationError):
    """A pairwise weight is negative, so the energy is not graph-representable."""


class SchemaError(ValidationError):
    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ReferentialError(ValidationError):
    pass


class FormatError(ValidationError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class NumericError(ArcCapError, ArithmeticError):
    exit_code = 3


class ConvergenceError(NumericError):
    def __init__(self, message, regret=float("nan")):
        self.regret = regret
        super().__init__(f"{message} (last regret {regret:.3g})")
