"""Exception hierarchy. All expected failures derive from AdnetError so the
CLI can map them to exit code 1; anything else is an internal error (exit 2).
"""


class AdnetError(Exception):
    """Base class for all expected, user-facing errors."""


class ShapeError(AdnetError):
    """Tensor shapes, dtypes, or positions violate an operation's contract."""


class SpecError(AdnetError):
    """A network description is inconsistent or used in the wrong mode."""


class FormatError(AdnetError):
    """A container file is malformed: bad magic, unknown version, bad CRC,
    size mismatch, or invalid payload values."""


class DataError(AdnetError):
    """Dataset-level problem: missing class, disjointness violation,
    infeasible synthesis, misaligned grids."""


class TrainingDiverged(AdnetError):
    """Non-finite loss encountered during training."""
