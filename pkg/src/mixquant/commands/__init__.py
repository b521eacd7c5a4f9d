"""Command modules for the mixquant CLI.

Exit codes shared by every command: 0 success, 2 configuration error,
3 data error, 4 fit or numerical failure, 5 I/O error.
"""

from __future__ import annotations

from typing import Any

from pydantic import ValidationError

from mixquant.core.errors import ConfigError, DataValidationError, FitError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FIT = 4
EXIT_IO = 5


def exit_code_for(error: BaseException) -> int | None:
    """Exit code of a known failure, None for anything unexpected."""
    if isinstance(error, ConfigError | ValidationError):
        return EXIT_CONFIG
    if isinstance(error, DataValidationError):
        return EXIT_DATA
    if isinstance(error, FitError | NumericalError):
        return EXIT_FIT
    if isinstance(error, OSError):
        return EXIT_IO
    return None


def error_report(error: BaseException, exit_code: int) -> dict[str, Any]:
    """Machine-readable description of a failed command."""
    details: Any = None
    if isinstance(error, FitError):
        details = error.report()
    elif isinstance(error, DataValidationError):
        details = {"locations": [[unit, time] for unit, time in error.locations]}
    elif isinstance(error, NumericalError):
        details = {"unit": error.unit}
    elif isinstance(error, ValidationError):
        details = {"errors": error.errors(include_url=False, include_context=False, include_input=False)}
    return {
        "status": "error",
        "exit_code": exit_code,
        "error_type": type(error).__name__,
        "message": str(error),
        "details": details,
    }
