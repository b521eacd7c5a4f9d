"""Exception hierarchy for mixquant."""

from __future__ import annotations

from typing import Any


class MixQuantError(Exception):
    """Base class for all mixquant errors."""


class ConfigError(MixQuantError):
    """Raised when a run configuration is invalid or references missing columns."""


class DataValidationError(MixQuantError):
    """Raised when panel data violates the dataset invariants.

    Attributes:
        locations: Offending (unit_id, time) pairs, when the problem is record-level.
    """

    def __init__(self, message: str, locations: list[tuple[str, int]] | None = None) -> None:
        self.locations = locations or []
        if self.locations:
            shown = ", ".join(f"({u}, {t})" for u, t in self.locations[:10])
            if len(self.locations) > 10:
                shown += f" (+{len(self.locations) - 10} more)"
            message = f"{message}: {shown}"
        super().__init__(message)


class NumericalError(MixQuantError):
    """Raised when a likelihood or posterior computation produces non-finite values."""

    def __init__(self, message: str, unit: int | None = None) -> None:
        self.unit = unit
        if unit is not None:
            message = f"{message} (unit index {unit})"
        super().__init__(message)


class FitError(MixQuantError):
    """Raised when no EM start converged.

    Attributes:
        traces: Log-likelihood trace of every attempted start.
        details: Free-form per-start status, e.g. "max_iter" or "degenerate".
    """

    def __init__(self, message: str, traces: list[list[float]] | None = None, details: list[str] | None = None) -> None:
        self.traces = traces or []
        self.details = details or []
        super().__init__(message)

    def report(self) -> dict[str, Any]:
        """Machine-readable summary of the failed starts."""
        return {
            "n_starts": len(self.traces),
            "start_status": self.details,
            "final_loglik": [trace[-1] if trace else None for trace in self.traces],
        }
