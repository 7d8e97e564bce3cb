"""Exception hierarchy shared across the package.

The CLI maps each family onto a process exit code, so every error raised by
library code derives from :class:`APNError`.
"""


class APNError(Exception):
    """Base class for all library errors."""


class ConfigError(APNError):
    """Invalid configuration, dimensions or command-line usage."""


class DataError(APNError):
    """Problems with dataset contents or files."""


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DataError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class ValidationError(DataError):
    pass


class SplitError(DataError):
    pass


class BatchError(DataError):
    pass


class FormatError(DataError):
    """Corrupted or unrecognized checkpoint / artifact file."""


class ShapeError(APNError):
    def __init__(self, op: str, *shapes):
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")
        self.op = op
        self.shapes = shapes


class NumericError(APNError):
    """Non-finite values produced during computation."""


class ContractError(APNError):
    """A documented precondition was violated by the caller."""
