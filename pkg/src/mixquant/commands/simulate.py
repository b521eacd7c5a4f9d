"""Simulate command: draw a dataset from a parameter file on a template panel."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated

import pandas as pd
import typer
from rich.console import Console

from mixquant.commands import error_report, exit_code_for
from mixquant.core.data import OUTCOME_COLUMN, TIME_COLUMN, UNIT_COLUMN, PanelDataset, write_panel_csv, zero_fraction
from mixquant.core.errors import DataValidationError
from mixquant.core.inference import simulate
from mixquant.core.models import ParamsFile, QuantileConfig
from mixquant.core.seeding import substream
from mixquant.report import json_safe

console = Console()


def load_template(path: Path, params: ParamsFile) -> PanelDataset:
    """Read the template panel; the outcome column is optional since it gets replaced."""
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype={UNIT_COLUMN: str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataValidationError(f"cannot parse {path}: {e}") from e
    if OUTCOME_COLUMN not in frame.columns:
        frame[OUTCOME_COLUMN] = 0.0
    return PanelDataset.from_frame(frame, params.binary_covariates, params.positive_covariates, UNIT_COLUMN, TIME_COLUMN, OUTCOME_COLUMN)


def register(app: typer.Typer) -> None:
    """Register the simulate command on the given Typer app."""

    @app.command(name="simulate")
    def simulate_cmd(
        params_file: Annotated[
            Path,
            typer.Argument(help="JSON parameter file (tau, gamma, beta, sigma, b0, b1, pi, covariate names)", exists=True, dir_okay=False),
        ],
        template: Annotated[
            Path,
            typer.Argument(help="Template panel CSV supplying units, times and covariates", exists=True, dir_okay=False),
        ],
        out: Annotated[Path, typer.Option("--out", "-o", help="Output CSV path")] = Path("simulated.csv"),
        seed: Annotated[int, typer.Option("--seed", "-s", help="Master seed")] = 0,
    ) -> None:
        """Simulate outcomes from the two-part mixture and write them in the ingestion schema."""
        try:
            params = ParamsFile.model_validate_json(params_file.read_text(encoding="utf-8"))
            data = load_template(template, params)
            sample = simulate(params.to_params(), data, QuantileConfig(tau=params.tau), substream(seed, "simulate"))
            write_panel_csv(sample, out)
        except Exception as e:
            code = exit_code_for(e)
            if code is None:
                raise
            typer.echo(json.dumps(json_safe(error_report(e, code))))
            raise typer.Exit(code) from e

        console.print(
            f"[green]Simulated {sample.n_units} units / {sample.n_observations} observations "
            f"(zero fraction {zero_fraction(sample):.3f}) -> {out}[/green]"
        )
