"""Exception hierarchy.

Every error carries the process exit status the command-line driver uses
when it surfaces: 1 for usage/config problems, 2 for data problems and
3 for training or numerical failures.
"""


class BranchyError(Exception):
    exit_code = 1


class ConfigError(BranchyError, ValueError):
    exit_code = 1


class StateError(BranchyError, RuntimeError):
    """Operation called on an object in the wrong lifecycle state."""

    exit_code = 1


class DataError(BranchyError):
    exit_code = 2


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EmptyUtteranceError(DataError, ValueError):
    pass


class FormatError(DataError):
    """Model file is truncated or otherwise unreadable."""


class VersionError(FormatError):
    pass


class NumericalError(BranchyError):
    exit_code = 3


class DimensionError(NumericalError, ValueError):
    pass


class BackwardError(NumericalError, RuntimeError):
    pass


class CalibrationError(NumericalError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None, batch=None):
        if epoch is not None:
            message = f"epoch {epoch}, batch {batch}: {message}"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
