"""Exception types shared across the package.

Out-of-range grid indices raise IndexError and invalid argument values raise
ValueError (plain built-ins); everything with a more specific failure mode
gets its own class below so callers and the CLI can map errors to exit codes.
"""


class ParseError(ValueError):
    """A text file (height grid, radio map, config) failed to parse."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(ValueError):
    """Tensor shapes are inconsistent; message lists expected vs actual."""


class ConfigError(ValueError):
    """A run configuration or model configuration is invalid."""


class SplitError(ValueError):
    """A train/test split produced an empty partition."""


class ReportError(ValueError):
    """A benchmark report is incomplete (missing prediction)."""


class FitError(RuntimeError):
    """A model fit (variogram) had insufficient or degenerate input."""


class NumericError(ArithmeticError):
    """A linear system or numeric routine failed (e.g. singular matrix)."""


class TransferError(RuntimeError):
    """Weights do not match the model configuration they are applied to."""


class WeightsFormatError(RuntimeError):
    """A weights file is corrupt: bad magic, bad version, or truncated."""
