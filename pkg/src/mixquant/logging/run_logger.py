"""Run-level event logging.

Events of a ``mixquant run`` are written to ``<out_dir>/run.log``:
- configuration and CLI overrides
- data summary
- fit start/finish with log-likelihood traces and diagnostics
- selection, cross-validation and bootstrap outcomes
- run completion or failure

While a run is active the ``mixquant`` package logger is attached to the same
file, so warnings from the fitting code land next to the events.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from mixquant.core.models import CVRow, FitResult, SelectionTable

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
# Longest loglik trace written verbatim; longer traces keep their head and tail
TRACE_LIMIT = 20


def _format_trace(trace: list[float]) -> str:
    if len(trace) <= TRACE_LIMIT:
        return ", ".join(f"{value:.6f}" for value in trace)
    half = TRACE_LIMIT // 2
    head = ", ".join(f"{value:.6f}" for value in trace[:half])
    tail = ", ".join(f"{value:.6f}" for value in trace[-half:])
    return f"{head}, ... ({len(trace) - TRACE_LIMIT} more), {tail}"


class RunLogger:
    """Logger for run-level events.

    Attributes:
        logger: The underlying Python logger instance.
        log_path: Path to the run log file.
    """

    def __init__(self, out_dir: Path, package_level: int = logging.INFO) -> None:
        """Initialize the run logger.

        Args:
            out_dir: Run output directory; the log is ``{out_dir}/run.log``.
            package_level: Level at which library messages are captured in the log.
        """
        out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = out_dir / "run.log"

        # Unique name per log path so loggers from different runs (or tests) don't share handlers
        self.logger = logging.getLogger(f"mixquant.run.events.{hash(str(self.log_path))}")
        self.logger.setLevel(logging.DEBUG)
        for handler in self.logger.handlers[:]:
            handler.close()
            self.logger.removeHandler(handler)

        self._handler = logging.FileHandler(self.log_path, mode="w", encoding="utf-8")
        self._handler.setLevel(logging.DEBUG)
        self._handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
        self.logger.addHandler(self._handler)
        self.logger.propagate = False

        self._package = logging.getLogger("mixquant.core")
        self._package_level = self._package.level
        self._package.setLevel(package_level)
        self._package.addHandler(self._handler)

    def close(self) -> None:
        """Detach from the package logger and close the file."""
        self._package.removeHandler(self._handler)
        self._package.setLevel(self._package_level)
        self.logger.removeHandler(self._handler)
        self._handler.close()

    def __enter__(self) -> RunLogger:
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    # =========================================================================
    # Run Events
    # =========================================================================

    def log_run_init(self, config_path: str, data_path: str, seed: int) -> None:
        self.logger.info("[RUN_INIT] config=%r data=%r seed=%d", config_path, data_path, seed)

    def log_config(self, taus: list[float], G_range: list[int], penalty: str, bootstrap: int, workers: int) -> None:
        """Log the effective run configuration."""
        self.logger.info(
            "[CONFIG] taus=%s G_range=%s penalty=%s bootstrap=%d workers=%d",
            [f"{tau:g}" for tau in taus],
            G_range,
            penalty,
            bootstrap,
            workers,
        )

    def log_config_override(self, key: str, value: object, source: str = "cli") -> None:
        """Log a configuration override from CLI flags.

        Args:
            key: The configuration key being overridden.
            value: The new value.
            source: Where the override came from.
        """
        self.logger.info("[CONFIG_OVERRIDE] key=%s value=%r source=%s", key, value, source)

    def log_data(self, n_units: int, n_observations: int, zero_fraction: float, binary: list[str], positive: list[str]) -> None:
        self.logger.info(
            "[DATA] units=%d observations=%d zero_fraction=%.4f binary=%s positive=%s",
            n_units,
            n_observations,
            zero_fraction,
            binary,
            positive,
        )

    # =========================================================================
    # Fit Events
    # =========================================================================

    def log_fit_start(self, tau: float, G: int, seed: int, lam: float | None = None) -> None:
        if lam is None:
            self.logger.info("[FIT_START] tau=%g G=%d seed=%d", tau, G, seed)
        else:
            self.logger.info("[FIT_START] tau=%g G=%d seed=%d lambda=%.6g", tau, G, seed, lam)

    def log_fit_done(self, result: FitResult) -> None:
        """Log a finished fit with its trace and any recorded diagnostics."""
        self.logger.info(
            "[FIT_DONE] tau=%g G=%d loglik=%.6f iterations=%d converged=%s start=%d trace=[%s]",
            result.tau,
            result.n_components,
            result.loglik,
            result.n_iterations,
            result.converged,
            result.start_index,
            _format_trace(result.loglik_trace),
        )
        diag = result.diagnostics
        counters = {
            "ridge_jitter": diag.ridge_jitter,
            "irls_capped": diag.irls_capped,
            "sigma_clamped": diag.sigma_clamped,
            "degenerate_restarts": diag.degenerate_restarts,
            "safeguard_rejections": diag.safeguard_rejections,
        }
        active = {name: count for name, count in counters.items() if count}
        if active or diag.unidentified_components:
            self.logger.warning(
                "[DIAGNOSTIC] tau=%g G=%d %s unidentified=%s",
                result.tau,
                result.n_components,
                " ".join(f"{name}={count}" for name, count in active.items()),
                diag.unidentified_components,
            )
        for message in diag.messages[:5]:
            self.logger.debug("[DIAGNOSTIC] %s", message)

    def log_fit_failed(self, tau: float, G: int, error: str) -> None:
        self.logger.warning("[DIAGNOSTIC] tau=%g G=%d fit failed: %s", tau, G, error)

    # =========================================================================
    # Inference Events
    # =========================================================================

    def log_selection(self, table: SelectionTable) -> None:
        for row in table.rows:
            if row.selected:
                self.logger.info("[SELECTION] tau=%g G=%d bic=%.4f", row.tau, row.G, row.bic)

    def log_cv(self, tau: float, G: int, rows: list[CVRow]) -> None:
        """Log the cross-validation table and the selected penalty."""
        for row in rows:
            self.logger.debug("[CV] tau=%g lambda=%.6g mean_loss=%.6f se=%.6f", tau, row.lam, row.mean_loss, row.se)
        for row in rows:
            if row.selected:
                self.logger.info("[CV] tau=%g G=%d selected lambda=%.6g mean_loss=%.6f", tau, G, row.lam, row.mean_loss)

    def log_bootstrap(self, tau: float, n_replicates: int, n_failed: int, n_ambiguous: int, seed: int) -> None:
        self.logger.info(
            "[BOOTSTRAP] tau=%g replicates=%d failed=%d ambiguous=%d seed=%d",
            tau,
            n_replicates,
            n_failed,
            n_ambiguous,
            seed,
        )

    def log_run_complete(self, artifacts: list[str]) -> None:
        self.logger.info("[RUN_COMPLETE] artifacts=%s", artifacts)

    def log_run_failed(self, exit_code: int, error_type: str, message: str) -> None:
        self.logger.error("[RUN_FAILED] exit_code=%d error=%s message=%r", exit_code, error_type, message)
