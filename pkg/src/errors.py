"""Exception hierarchy shared by every component.

Each family maps onto one CLI exit code, see ``exit_code_for``.
"""


class EcgEngineError(Exception):
    """Base class for all errors raised by the engine."""

    exit_code = 1


class UsageError(EcgEngineError):
    """Invalid command-line usage or a missing input path."""

    exit_code = 2


class DataError(EcgEngineError):
    """Input data could not be parsed or violates a data contract."""

    exit_code = 3


class NumericError(EcgEngineError):
    """A numerical contract was violated during computation."""

    exit_code = 4


# Data errors
class MalformedHeader(DataError):
    pass


class LeadCountMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MalformedClassMap(DataError):
    pass


class InvalidAge(DataError):
    pass


class InvalidSpec(DataError):
    pass


class DegenerateSignal(DataError):
    pass


class ModelClassMapMismatch(DataError):
    pass


class CheckpointFormatError(DataError):
    pass


class NoDecisiveExamples(DataError):
    pass


class DegenerateMarginals(DataError):
    pass


class MalformedTable(DataError):
    pass


# Numeric errors
class ShapeMismatch(NumericError):
    pass


class DegenerateBatch(NumericError):
    pass


class DoubleBackward(NumericError):
    pass


class TrainingDiverged(NumericError):
    pass


class DegenerateNormalization(NumericError):
    pass


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception onto the CLI exit code convention.

    Args:
        error (BaseException): Raised error

    Returns:
        int: 2 usage, 3 data, 4 numeric, 1 anything else
    """
    if isinstance(error, EcgEngineError):
        return error.exit_code
    return 1
