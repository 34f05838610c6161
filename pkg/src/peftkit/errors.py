"""Exception types. Each maps to one CLI exit status."""


class PeftError(Exception):
    """Base class for toolkit errors."""


class ShapeError(PeftError, ValueError):
    """Operands have incompatible dimensions."""


class ConvergenceError(PeftError, ArithmeticError):
    """An iterative routine hit its iteration cap."""


class FormatError(PeftError, ValueError):
    """A binary file has a bad magic, bad header or is truncated."""


class UndefinedMetricError(PeftError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty reference)."""


class ConfigError(PeftError, ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TrainingError(PeftError, RuntimeError):
    """Training diverged."""
