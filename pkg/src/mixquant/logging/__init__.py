"""Logging infrastructure for mixquant runs."""

from mixquant.logging.run_logger import RunLogger

__all__ = [
    "RunLogger",
]
