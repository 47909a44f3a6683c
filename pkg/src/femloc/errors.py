"""Exception hierarchy shared by all femloc modules.

Exit-code mapping used by the CLI: usage errors are 1, data errors
(parse/format/argument) are 2, numerical failures are 3.
"""


class FemlocError(Exception):
    """Base class for all femloc errors."""


class InvalidArgument(FemlocError):
    """An argument violates a documented precondition."""


class DegenerateGeometry(FemlocError):
    """Geometric configuration admits no unique solution (e.g. zero baseline)."""


class FormatError(FemlocError):
    """Binary file is malformed. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ParseError(FemlocError):
    """Text file is malformed. Carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InsufficientData(FemlocError):
    """Too few samples to run an estimator."""


class EstimationFailed(FemlocError):
    """An estimator ran but did not reach its acceptance condition."""


class AmbiguousCheirality(FemlocError):
    """No unique relative-pose candidate wins the in-front-of-camera vote."""


class DegenerateWeights(FemlocError):
    """Particle weights are all zero (or otherwise unusable)."""


USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3

# CLI classifies exceptions into exit codes with this table.
DATA_ERRORS = (InvalidArgument, FormatError, ParseError)
NUMERIC_ERRORS = (
    DegenerateGeometry,
    InsufficientData,
    EstimationFailed,
    AmbiguousCheirality,
    DegenerateWeights,
)
