"""Init command: write the bundled demo panel, config and parameter file."""

from __future__ import annotations

from pathlib import Path
from typing import Annotated

import typer
from rich.console import Console

from mixquant.resources.loader import DEMO_FILES, copy_resource_to

console = Console()


def register(app: typer.Typer) -> None:
    """Register the init command on the given Typer app."""

    @app.command()
    def init(
        target: Annotated[
            Path,
            typer.Argument(help="Directory to write the demo files into", file_okay=False, dir_okay=True),
        ] = Path(),
        force: Annotated[
            bool,
            typer.Option("--force", "-f", help="Overwrite existing files"),
        ] = False,
    ) -> None:
        """Write a demo panel, run configuration and parameter file.

        Run ``mixquant run demo_config.yaml`` in the target directory afterwards.
        """
        target.mkdir(parents=True, exist_ok=True)
        for filename in DEMO_FILES:
            dest = target / filename
            if dest.exists() and not force:
                console.print(f"[yellow]exists (skipped): {dest.name}[/yellow]")
                continue
            copy_resource_to(filename, dest)
            console.print(f"[green]Wrote {dest.name}[/green]")
