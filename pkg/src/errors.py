"""Exception hierarchy shared by the model, sampler, and command-line layers."""

from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:  # pragma: no cover
    from .model import ValidationReport


class MacauError(Exception):
    """Base class for every error raised by this package."""


class ModelError(MacauError, ValueError):
    """Invalid entity or relation definition."""


class ParseError(ModelError):
    """Malformed observation, feature, or split file.

    Attributes:
        path: File being parsed.
        line: 1-based line number of the offending line, if known.
    """

    def __init__(self, message: str, path: str = "", line: Optional[int] = None):
        location = path
        if line is not None:
            location = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.line = line


class ConfigError(MacauError, ValueError):
    """Invalid run configuration; ``key`` is the dotted path of the bad entry."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class ValidationFailedError(MacauError):
    """The model is not factorizable; sampling was refused."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("; ".join(f.message for f in report.findings))
        self.report = report


class NumericalError(MacauError, ArithmeticError):
    """Matrix not positive definite after jitter, or invalid distribution parameters."""


class PredictionError(MacauError, ValueError):
    """Mismatched query, accumulator, or evaluation inputs."""
