"""End-to-end tests of the mixquant command line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from mixquant import __version__
from mixquant.cli import app
from mixquant.commands import EXIT_CONFIG, EXIT_DATA, EXIT_FIT, EXIT_IO
from mixquant.resources.loader import DEMO_FILES, copy_resource_to

runner = CliRunner()

ARTIFACTS = ["summary.csv", "selection.csv", "coefficients_0.5.json", "paths.csv", "run.log"]


@pytest.fixture
def workspace(temp_dir: Path) -> Path:
    """Directory holding the demo panel and parameter file."""
    for filename in DEMO_FILES:
        copy_resource_to(filename, temp_dir / filename)
    return temp_dir


def write_config(directory: Path, **overrides: Any) -> Path:
    """A quick run configuration over the demo panel."""
    settings: dict[str, Any] = {
        "data_path": "demo_panel.csv",
        "columns": {"binary": ["s1"], "positive": ["x1"]},
        "taus": [0.5],
        "G_range": [1, 2],
        "bootstrap": {"replicates": 4},
        "fit": {"n_starts": 2},
        "seed": 3,
    }
    settings.update(overrides)
    path = directory / "run.yaml"
    path.write_text(yaml.safe_dump(settings), encoding="utf-8")
    return path


def error_payload(output: str) -> dict[str, Any]:
    line = next(line for line in output.splitlines() if line.startswith("{"))
    return json.loads(line)


class TestRunCommand:
    """Tests for `mixquant run`."""

    def test_writes_artifacts(self, workspace: Path) -> None:
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace)), "--out", str(out)])

        assert result.exit_code == 0, result.output
        for name in ARTIFACTS:
            assert (out / name).exists(), name

        summary = pd.read_csv(out / "summary.csv")
        assert list(summary["variable"]) == ["y", "log_y_positive", "s1", "x1"]

        selection = pd.read_csv(out / "selection.csv")
        assert list(selection["G"]) == [1, 2]
        assert selection["selected"].sum() == 1

        document = json.loads((out / "coefficients_0.5.json").read_text(encoding="utf-8"))
        assert set(document) >= {"tau", "G", "binary", "positive", "mixing", "fit"}
        assert document["fit"]["bootstrap"]["n_replicates"] == 4
        assert all("se" in entry for entry in document["positive"])

    def test_paths_have_one_row_per_parameter(self, workspace: Path) -> None:
        out = workspace / "out"
        runner.invoke(app, ["run", str(write_config(workspace, taus=[0.25, 0.5])), "--out", str(out), "--bootstrap", "0"])

        selection = pd.read_csv(out / "selection.csv")
        chosen = selection[selection["selected"]]
        paths = pd.read_csv(out / "paths.csv")
        # m + p + 3G + 1 rows per tau with m = p = 1
        assert len(paths) == sum(3 * g + 3 for g in chosen["G"])
        assert sorted(paths["tau"].unique()) == [0.25, 0.5]

    def test_same_seed_gives_identical_artifacts(self, workspace: Path) -> None:
        config = write_config(workspace)
        runner.invoke(app, ["run", str(config), "--out", str(workspace / "a")])
        runner.invoke(app, ["run", str(config), "--out", str(workspace / "b")])

        for name in ARTIFACTS[:-1]:
            assert (workspace / "a" / name).read_bytes() == (workspace / "b" / name).read_bytes(), name

    def test_cli_override_is_logged(self, workspace: Path) -> None:
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace)), "--out", str(out), "--bootstrap", "0"])

        assert result.exit_code == 0, result.output
        assert "[CONFIG_OVERRIDE] key=bootstrap.replicates value=0" in (out / "run.log").read_text(encoding="utf-8")
        document = json.loads((out / "coefficients_0.5.json").read_text(encoding="utf-8"))
        assert "bootstrap" not in document["fit"]

    def test_raw_scale_block(self, workspace: Path) -> None:
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace)), "--out", str(out), "--bootstrap", "0", "--raw-scale"])

        assert result.exit_code == 0, result.output
        document = json.loads((out / "coefficients_0.5.json").read_text(encoding="utf-8"))
        assert [entry["parameter"] for entry in document["raw_scale"]["positive"]][0] == "x1"

    def test_fixed_penalty_hides_slope_errors(self, workspace: Path) -> None:
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace)), "--out", str(out), "--lambda", "0.05", "--bootstrap", "3"])

        assert result.exit_code == 0, result.output
        document = json.loads((out / "coefficients_0.5.json").read_text(encoding="utf-8"))
        assert document["fit"]["lambda"] == 0.05
        for entry in document["positive"]:
            assert ("se" in entry) == (entry["block"] != "beta")

    def test_cross_validated_penalty(self, workspace: Path) -> None:
        out = workspace / "out"
        config = write_config(workspace, G_range=[1], penalty={"mode": "cv", "grid": [0.0, 0.1], "n_folds": 3})
        result = runner.invoke(app, ["run", str(config), "--out", str(out), "--bootstrap", "0"])

        assert result.exit_code == 0, result.output
        document = json.loads((out / "coefficients_0.5.json").read_text(encoding="utf-8"))
        rows = document["fit"]["cross_validation"]
        assert [row["lam"] for row in rows] == [0.0, 0.1]
        assert sum(row["selected"] for row in rows) == 1


class TestRunFailures:
    """Tests for exit codes and error reports."""

    def test_invalid_config_value(self, workspace: Path) -> None:
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace, taus=[1.5])), "--out", str(out)])

        assert result.exit_code == EXIT_CONFIG
        payload = error_payload(result.output)
        assert payload["error_type"] == "ValidationError"
        assert json.loads((out / "error.json").read_text(encoding="utf-8"))["exit_code"] == EXIT_CONFIG

    def test_missing_column(self, workspace: Path) -> None:
        out = workspace / "out"
        config = write_config(workspace, columns={"binary": ["s1"], "positive": ["income"]})
        result = runner.invoke(app, ["run", str(config), "--out", str(out)])

        assert result.exit_code == EXIT_CONFIG
        assert error_payload(result.output)["error_type"] == "ConfigError"
        assert "[RUN_FAILED] exit_code=2" in (out / "run.log").read_text(encoding="utf-8")

    def test_negative_outcome(self, workspace: Path) -> None:
        frame = pd.read_csv(workspace / "demo_panel.csv")
        frame.loc[0, "y"] = -1.0
        frame.to_csv(workspace / "bad.csv", index=False)
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace, data_path="bad.csv")), "--out", str(out)])

        assert result.exit_code == EXIT_DATA
        report = json.loads((out / "error.json").read_text(encoding="utf-8"))
        assert report["error_type"] == "DataValidationError"
        assert report["details"]["locations"] == [[str(frame.loc[0, "unit_id"]), int(frame.loc[0, "time"])]]

    def test_no_fit_converges(self, workspace: Path) -> None:
        out = workspace / "out"
        config = write_config(workspace, fit={"n_starts": 1, "max_iter": 1, "tol": 1e-300})
        result = runner.invoke(app, ["run", str(config), "--out", str(out)])

        assert result.exit_code == EXIT_FIT
        assert error_payload(result.output)["error_type"] == "FitError"
        selection = pd.read_csv(out / "selection.csv")
        assert selection["failed"].all()

    def test_missing_data_file(self, workspace: Path) -> None:
        out = workspace / "out"
        result = runner.invoke(app, ["run", str(write_config(workspace, data_path="nowhere.csv")), "--out", str(out)])

        assert result.exit_code == EXIT_IO
        assert error_payload(result.output)["error_type"] == "FileNotFoundError"


class TestSimulateCommand:
    """Tests for `mixquant simulate`."""

    def test_writes_panel(self, workspace: Path) -> None:
        out = workspace / "sim.csv"
        result = runner.invoke(app, ["simulate", str(workspace / "demo_params.json"), str(workspace / "demo_panel.csv"), "--out", str(out), "--seed", "4"])

        assert result.exit_code == 0, result.output
        simulated = pd.read_csv(out)
        template = pd.read_csv(workspace / "demo_panel.csv")
        assert list(simulated.columns) == ["unit_id", "time", "y", "s1", "x1"]
        assert len(simulated) == len(template)
        assert (simulated["y"] >= 0).all()

    def test_seed_is_reproducible(self, workspace: Path) -> None:
        args = ["simulate", str(workspace / "demo_params.json"), str(workspace / "demo_panel.csv"), "--seed", "9"]
        runner.invoke(app, [*args, "--out", str(workspace / "a.csv")])
        runner.invoke(app, [*args, "--out", str(workspace / "b.csv")])
        assert (workspace / "a.csv").read_bytes() == (workspace / "b.csv").read_bytes()

    def test_template_without_outcome(self, workspace: Path) -> None:
        pd.read_csv(workspace / "demo_panel.csv").drop(columns=["y"]).to_csv(workspace / "template.csv", index=False)
        out = workspace / "sim.csv"
        result = runner.invoke(app, ["simulate", str(workspace / "demo_params.json"), str(workspace / "template.csv"), "--out", str(out)])

        assert result.exit_code == 0, result.output
        assert "y" in pd.read_csv(out).columns

    def test_invalid_parameters(self, workspace: Path) -> None:
        params = json.loads((workspace / "demo_params.json").read_text(encoding="utf-8"))
        params["pi"] = [0.7, 0.7]
        (workspace / "bad.json").write_text(json.dumps(params), encoding="utf-8")
        result = runner.invoke(app, ["simulate", str(workspace / "bad.json"), str(workspace / "demo_panel.csv"), "--out", str(workspace / "sim.csv")])

        assert result.exit_code == EXIT_CONFIG
        assert error_payload(result.output)["error_type"] == "ValidationError"


class TestInitCommand:
    """Tests for `mixquant init`."""

    def test_writes_demo_files(self, temp_dir: Path) -> None:
        result = runner.invoke(app, ["init", str(temp_dir / "demo")])

        assert result.exit_code == 0, result.output
        for filename in DEMO_FILES:
            assert (temp_dir / "demo" / filename).exists()

    def test_keeps_existing_files_without_force(self, temp_dir: Path) -> None:
        (temp_dir / "demo_config.yaml").write_text("mine\n", encoding="utf-8")
        runner.invoke(app, ["init", str(temp_dir)])
        assert (temp_dir / "demo_config.yaml").read_text(encoding="utf-8") == "mine\n"

        runner.invoke(app, ["init", str(temp_dir), "--force"])
        assert (temp_dir / "demo_config.yaml").read_text(encoding="utf-8") != "mine\n"

    def test_demo_runs_end_to_end(self, temp_dir: Path) -> None:
        runner.invoke(app, ["init", str(temp_dir)])
        result = runner.invoke(
            app,
            ["run", str(temp_dir / "demo_config.yaml"), "--out", str(temp_dir / "out"), "--bootstrap", "0", "-G", "1", "-G", "2", "--tau", "0.5"],
        )
        assert result.exit_code == 0, result.output
        assert (temp_dir / "out" / "coefficients_0.5.json").exists()

    @pytest.mark.slow
    def test_demo_selects_two_components(self, temp_dir: Path) -> None:
        """The bundled panel is drawn from a two-component model, and BIC finds it."""
        runner.invoke(app, ["init", str(temp_dir)])
        out = temp_dir / "out"
        result = runner.invoke(app, ["run", str(temp_dir / "demo_config.yaml"), "--out", str(out), "--bootstrap", "0", "--tau", "0.5"])

        assert result.exit_code == 0, result.output
        selection = pd.read_csv(out / "selection.csv")
        assert list(selection["G"]) == [1, 2, 3]
        assert list(selection.loc[selection["selected"], "G"]) == [2]


class TestVersion:
    """Tests for the version flag."""

    def test_version(self) -> None:
        result = runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output
