"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericError -> 2,
ParseError / IO failures -> 3.
"""


class GazeRegError(Exception):
    pass


class ParseError(GazeRegError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class OrderingError(ParseError):
    """Timestamps out of order in a gaze log."""


class ShapeError(GazeRegError):
    """Array dimensions violate a contract (mismatch, divisibility, ...)."""


class ParameterError(GazeRegError):
    """A scalar argument is outside its allowed range."""


class ConfigError(GazeRegError):
    """Invalid run configuration or invalid combination of options."""


class NumericError(GazeRegError):
    """Non-finite value encountered; message names the offending tensor."""


class FlowProviderError(GazeRegError):
    """A flow provider could not supply flow for a frame pair."""

    def __init__(self, src_frame, dst_frame, message=""):
        self.src_frame = src_frame
        self.dst_frame = dst_frame
        detail = f"no flow for frame pair ({src_frame} -> {dst_frame})"
        if message:
            detail = f"{detail}: {message}"
        super().__init__(detail)


class HashMismatchError(GazeRegError):
    """Checkpoint config hash does not match the active configuration."""

    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"config hash mismatch: checkpoint has {expected}, run has {actual}"
        )
