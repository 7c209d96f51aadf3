"""Exception hierarchy shared by the library, the harness and the CLI."""

from typing import Any, Dict, Optional


class TRError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TRError, ValueError):
    """Structural mismatch: ranks, extents, element counts or mode indices."""


class EmptyObservationError(TRError, ValueError):
    """The observation set is empty, so there is nothing to fit."""


class NumericalError(TRError, ArithmeticError):
    """A posterior system lost positive definiteness or produced non-finite values.

    ``diagnostics`` carries whatever the raising site knew (iteration, mode,
    ranks, E[tau]) so the failure can be dumped without a debugger.
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SingularSystemError(NumericalError):
    """Unregularized least-squares normal equations are singular."""


class FormatError(TRError, ValueError):
    """A DTF/MSK/image/checkpoint file could not be parsed."""


class ConfigError(TRError, ValueError):
    """Unknown key or badly typed value in a config or sweep file."""


class MetricError(TRError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero-norm truth)."""
