"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class DomainError(ValueError):
    """A value lies outside an operation's mathematical domain."""


class ContractError(RuntimeError):
    """A call violated a documented precondition (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Missing, malformed or inconsistent data (manifests, feature files)."""


class FormatError(DataError):
    """A binary or text file does not match its expected format.

    ``offset`` is the byte offset (or line number for text formats) where
    parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Training aborted, e.g. because a gradient became NaN."""
