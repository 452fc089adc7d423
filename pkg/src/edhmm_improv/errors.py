"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class ImprovError(Exception):
    exit_code = 1


class InputError(ImprovError):
    exit_code = 2


class ParseError(InputError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class OrderingError(InputError):
    pass


class AlignmentError(InputError):
    pass


class NumericError(ImprovError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class TractabilityError(ImprovError):
    exit_code = 3

    def __init__(self, message, size=None, limit=None):
        super().__init__(message)
        self.size = size
        self.limit = limit


class CalibrationError(ImprovError, ValueError):
    pass


class SynthesisFailure(ImprovError):
    """Raised when the check/calibrate loop cannot produce an improviser."""

    exit_code = 4

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report
