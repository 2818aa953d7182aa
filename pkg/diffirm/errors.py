"""
Exception hierarchy shared by every module.

The CLI maps these onto exit codes (see diffirm.cli), so library code raises
the most specific class it can and never calls sys.exit itself.
"""


class DiffIRMError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DiffIRMError, ValueError):
    """Operand shapes do not agree."""


class ContractError(DiffIRMError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(DiffIRMError, FloatingPointError):
    """A NaN or Inf entered or left a tensor operation."""


class ConfigError(DiffIRMError):
    """Unknown key, unknown method, or an out-of-range configuration value."""


class IngestError(DiffIRMError):
    """A features/adjacency CSV could not be turned into a dataset."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class DivergenceError(DiffIRMError):
    """Training produced a non-finite or exploding loss and was aborted."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AcceptanceError(DiffIRMError):
    """A benchmark ran to completion but a threshold was not met."""

    def __init__(self, message: str, failed: list[str] | None = None, report: dict | None = None):
        super().__init__(message)
        self.failed = failed or []
        self.report = report or {}
