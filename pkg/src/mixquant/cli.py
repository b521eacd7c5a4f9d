"""CLI interface for mixquant."""

from __future__ import annotations

from typing import Annotated

import typer
from rich.console import Console

from mixquant import __version__

app = typer.Typer(
    name="mixquant",
    help="Two-part finite-mixture quantile regression for longitudinal semi-continuous data.",
    no_args_is_help=True,
)
console = Console()


def _version_callback(value: bool) -> None:
    if value:
        console.print(f"mixquant {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Annotated[
        bool,
        typer.Option("--version", callback=_version_callback, is_eager=True, help="Show the version and exit"),
    ] = False,
) -> None:
    """Fit, select and bootstrap mixture quantile models from the command line."""


# ---------------------------------------------------------------------------
# Register command modules
# ---------------------------------------------------------------------------

from mixquant.commands import init_cmd, run, simulate  # noqa: E402

run.register(app)
simulate.register(app)
init_cmd.register(app)


if __name__ == "__main__":
    app()
