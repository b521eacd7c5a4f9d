"""Resource loader using importlib.resources for packaged files."""

from importlib import resources
from pathlib import Path

DEMO_FILES = ("demo_panel.csv", "demo_config.yaml", "demo_params.json")


def get_resource_text(filename: str) -> str:
    """Load a bundled file from the mixquant.resources package.

    Raises:
        FileNotFoundError: If the resource doesn't exist
    """
    return resources.files("mixquant.resources").joinpath(filename).read_text(encoding="utf-8")


def copy_resource_to(filename: str, dest: Path) -> None:
    dest.write_text(get_resource_text(filename), encoding="utf-8")
