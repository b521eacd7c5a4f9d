"""Run command: selection, optional penalization and bootstrap, artifact writing."""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING, Annotated, Any

import pandas as pd
import typer
from rich.console import Console
from rich.table import Table

from mixquant.commands import error_report, exit_code_for
from mixquant.config import RunConfig
from mixquant.core.data import prepare, read_panel_csv, zero_fraction
from mixquant.core.errors import FitError
from mixquant.core.inference import bootstrap_se, fit_grid
from mixquant.core.models import CVRow, FitOptions, PenaltyConfig, QuantileConfig
from mixquant.core.penalized import cross_validate_lambda, default_lambda_grid, fit_penalized, lambda_max
from mixquant.core.seeding import substream
from mixquant.logging import RunLogger
from mixquant.report import PATH_COLUMNS, coefficient_panels, coefficients_filename, describe, json_safe, path_rows, write_frame, write_json

if TYPE_CHECKING:
    from mixquant.core.data import PanelDataset, PreparedData
    from mixquant.core.models import BootstrapResult, FitResult, SelectionTable

console = Console()


def _apply_overrides(config: RunConfig, flags: dict[str, Any]) -> tuple[RunConfig, list[tuple[str, Any]]]:
    """Apply explicitly passed CLI flags on top of the file configuration.

    ``flags`` maps dotted config keys to values; None means the flag was not given.
    """
    data = config.model_dump(by_alias=True)
    applied = []
    for key, value in flags.items():
        if value is None:
            continue
        target = data
        *parents, leaf = key.split(".")
        for parent in parents:
            target = target[parent]
        target[leaf] = value
        applied.append((key, value))
    return RunConfig.model_validate(data), applied


def _cell_options(config: RunConfig, tau: float, n_components: int) -> FitOptions:
    return config.fit_options().model_copy(update={"seed": substream(config.seed, f"starts/{tau:g}/{n_components}")})


def _penalized_fit(
    config: RunConfig,
    prepared: PreparedData,
    cfg: QuantileConfig,
    base: FitResult,
    run_logger: RunLogger,
) -> tuple[FitResult, list[CVRow] | None]:
    """Refit the selected model with the configured penalty, warm-started from the unpenalized fit."""
    options = _cell_options(config, cfg.tau, base.n_components)
    cv_rows = None
    if config.penalty.mode == "fixed":
        lam = float(config.penalty.lambda_ or 0.0)
    else:
        grid = config.penalty.grid or default_lambda_grid(lambda_max(prepared, cfg, base.n_components, options), config.penalty.n_lambdas)
        pcfg = PenaltyConfig(
            lambda_grid=grid,
            n_folds=config.penalty.n_folds,
            fold_seed=substream(config.seed, f"folds/{cfg.tau:g}"),
            one_se_rule=config.penalty.one_se_rule,
        )
        lam, cv_rows = cross_validate_lambda(prepared, cfg, base.n_components, pcfg, options)
        run_logger.log_cv(cfg.tau, base.n_components, cv_rows)

    run_logger.log_fit_start(cfg.tau, base.n_components, options.seed, lam)
    result = fit_penalized(prepared, cfg, base.n_components, lam, options.model_copy(update={"start": base.params}))
    run_logger.log_fit_done(result)
    return result, cv_rows


def _show_selection(table: SelectionTable) -> None:
    view = Table(show_header=True, header_style="bold", box=None, padding=(0, 2))
    view.add_column("tau", style="cyan")
    view.add_column("G")
    view.add_column("loglik", justify="right")
    view.add_column("nu", justify="right")
    view.add_column("BIC", justify="right")
    view.add_column("")
    for row in table.rows:
        if row.failed:
            view.add_row(f"{row.tau:g}", str(row.G), "-", "-", "-", "[red]failed[/red]")
            continue
        mark = "[green]selected[/green]" if row.selected else ""
        view.add_row(f"{row.tau:g}", str(row.G), f"{row.loglik:.3f}", str(row.n_parameters), f"{row.bic:.3f}", mark)
    console.print(view)


def execute_run(config: RunConfig, run_logger: RunLogger) -> list[str]:
    """Run the full analysis described by ``config`` and write its artifacts.

    Returns:
        Names of the artifact files written to ``config.out_dir``.
    """
    out = config.out_dir
    columns = config.columns
    data: PanelDataset = read_panel_csv(
        config.data_path,
        columns.binary,
        columns.positive,
        unit_col=columns.unit,
        time_col=columns.time,
        y_col=columns.outcome,
    )
    prepared = prepare(data, standardize=config.standardize, zero_threshold=config.zero_threshold)
    run_logger.log_data(data.n_units, data.n_observations, zero_fraction(data), columns.binary, columns.positive)

    write_frame(describe(data), out / "summary.csv")
    artifacts = ["summary.csv"]

    for tau in config.taus:
        for n_components in config.G_range:
            run_logger.log_fit_start(tau, n_components, substream(config.seed, f"starts/{tau:g}/{n_components}"))
    with console.status("[cyan]Fitting selection grid...[/cyan]"):
        table, fits = fit_grid(prepared, config.taus, config.G_range, config.fit_options())
    for row in table.rows:
        if row.failed:
            run_logger.log_fit_failed(row.tau, row.G, row.error or "")
        else:
            run_logger.log_fit_done(fits[(row.tau, row.G)])
    run_logger.log_selection(table)
    write_frame(table.to_frame(), out / "selection.csv")
    artifacts.append("selection.csv")
    _show_selection(table)

    paths: list[dict[str, Any]] = []
    for tau in config.taus:
        selected = table.selected(tau)
        if selected is None:
            raise FitError(
                f"every fit failed at tau={tau:g}",
                details=[row.error or "" for row in table.rows if row.tau == tau],
            )
        cfg = QuantileConfig(tau=tau)
        result = fits[(tau, selected.G)]
        cv_rows = None
        if config.penalty.mode != "off":
            result, cv_rows = _penalized_fit(config, prepared, cfg, result, run_logger)

        bootstrap: BootstrapResult | None = None
        if config.bootstrap.replicates:
            seed = substream(config.seed, f"bootstrap/{tau:g}")
            with console.status(f"[cyan]Bootstrapping tau={tau:g}...[/cyan]"):
                bootstrap = bootstrap_se(
                    result,
                    data,
                    cfg,
                    config.bootstrap.replicates,
                    seed,
                    options=_cell_options(config, tau, selected.G),
                    lam=result.lam,
                    standardize=config.standardize,
                    zero_threshold=config.zero_threshold,
                    multi_start=config.bootstrap.multi_start,
                )
            run_logger.log_bootstrap(tau, bootstrap.n_replicates, bootstrap.n_failed, bootstrap.n_ambiguous, seed)

        raw_params = None
        if config.raw_scale:
            scaling = prepared.standardization
            raw_params = scaling.to_raw(result.params) if scaling is not None else result.params
        document = coefficient_panels(result, prepared, bootstrap, raw_params)
        if cv_rows is not None:
            document["fit"]["cross_validation"] = [row.model_dump() for row in cv_rows]
        write_json(document, out / coefficients_filename(tau))
        artifacts.append(coefficients_filename(tau))
        paths.extend(path_rows(result, prepared, bootstrap))

    write_frame(pd.DataFrame(paths, columns=PATH_COLUMNS), out / "paths.csv")
    artifacts += ["paths.csv", "run.log"]
    run_logger.log_run_complete(artifacts)
    return artifacts


def _fail(error: BaseException, exit_code: int, out_dir: Path | None, run_logger: RunLogger | None) -> None:
    report = error_report(error, exit_code)
    if run_logger is not None:
        run_logger.log_run_failed(exit_code, report["error_type"], report["message"])
    if out_dir is not None:
        try:
            write_json(report, out_dir / "error.json")
        except OSError:
            pass  # best effort; the report still goes to stdout
    typer.echo(json.dumps(json_safe(report)))


def register(app: typer.Typer) -> None:
    """Register the run command on the given Typer app."""

    @app.command()
    def run(
        config_path: Annotated[
            Path,
            typer.Argument(
                help="Path to the YAML run configuration",
                exists=True,
                file_okay=True,
                dir_okay=False,
                resolve_path=True,
            ),
        ],
        tau: Annotated[
            list[float] | None,
            typer.Option("--tau", "-t", help="Quantile level (repeatable); replaces the configured taus"),
        ] = None,
        groups: Annotated[
            list[int] | None,
            typer.Option("--groups", "-G", help="Number of components to compare (repeatable)"),
        ] = None,
        seed: Annotated[int | None, typer.Option("--seed", "-s", help="Master seed")] = None,
        out: Annotated[Path | None, typer.Option("--out", "-o", help="Output directory")] = None,
        bootstrap: Annotated[
            int | None,
            typer.Option("--bootstrap", "-b", help="Bootstrap replicates (0 disables)"),
        ] = None,
        lambda_: Annotated[
            float | None,
            typer.Option("--lambda", help="Fixed LASSO penalty on the positive-part slopes"),
        ] = None,
        cv: Annotated[
            bool | None,
            typer.Option("--cv/--no-cv", help="Cross-validate the LASSO penalty (--no-cv turns penalization off)"),
        ] = None,
        workers: Annotated[int | None, typer.Option("--workers", "-w", help="Worker threads")] = None,
        starts: Annotated[int | None, typer.Option("--starts", help="EM starts per fit")] = None,
        zero_threshold: Annotated[
            float | None,
            typer.Option("--zero-threshold", help="Outcomes below this count as zero"),
        ] = None,
        raw_scale: Annotated[
            bool | None,
            typer.Option("--raw-scale/--no-raw-scale", help="Also report raw-scale coefficients"),
        ] = None,
        multi_start_bootstrap: Annotated[
            bool | None,
            typer.Option("--multi-start-bootstrap/--warm-start-bootstrap", help="Refit bootstrap replicates from fresh starts"),
        ] = None,
    ) -> None:
        """Fit the selection grid and write summary, selection, coefficient and path artifacts."""
        penalty_mode = None
        if lambda_ is not None:
            penalty_mode = "fixed"
        elif cv is not None:
            penalty_mode = "cv" if cv else "off"
        flags: dict[str, Any] = {
            "taus": tau or None,
            "G_range": groups or None,
            "seed": seed,
            "out_dir": out,
            "bootstrap.replicates": bootstrap,
            "penalty.mode": penalty_mode,
            "penalty.lambda": lambda_,
            "workers": workers,
            "fit.n_starts": starts,
            "zero_threshold": zero_threshold,
            "raw_scale": raw_scale,
            "bootstrap.multi_start": multi_start_bootstrap,
        }

        try:
            config, applied = _apply_overrides(RunConfig.load(config_path), flags)
        except Exception as e:
            code = exit_code_for(e)
            if code is None:
                raise
            _fail(e, code, out, None)
            raise typer.Exit(code) from e

        run_logger = RunLogger(config.out_dir)
        try:
            run_logger.log_run_init(str(config_path), str(config.data_path), config.seed)
            for key, value in applied:
                run_logger.log_config_override(key, value)
            run_logger.log_config(config.taus, config.G_range, config.penalty.mode, config.bootstrap.replicates, config.workers)
            artifacts = execute_run(config, run_logger)
        except Exception as e:
            code = exit_code_for(e)
            if code is None:
                run_logger.log_run_failed(1, type(e).__name__, str(e))
                run_logger.close()
                raise
            _fail(e, code, config.out_dir, run_logger)
            run_logger.close()
            raise typer.Exit(code) from e
        run_logger.close()

        console.print(f"[green]Wrote {len(artifacts)} artifacts to {config.out_dir}[/green]")
        for name in artifacts:
            console.print(f"  [dim]-[/dim] {name}")
