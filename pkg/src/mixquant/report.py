"""Artifact assembly: descriptive statistics, coefficient panels, plot-ready paths."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
from scipy import stats

from mixquant.core.models import parameter_labels

if TYPE_CHECKING:
    from mixquant.core.data import PanelDataset, PreparedData
    from mixquant.core.models import BootstrapResult, FitResult, MixtureParams

SUMMARY_COLUMNS = [
    "variable",
    "n",
    "mean",
    "sd",
    "skewness",
    "kurtosis",
    "zero_fraction",
    "maximum",
    "q10",
    "q25",
    "q50",
    "q75",
    "q90",
]
PATH_COLUMNS = ["tau", "panel", "block", "parameter", "estimate", "se"]
# Two-sided 5% critical value of the standard normal
Z_CRITICAL = 1.96


# =============================================================================
# Descriptive statistics
# =============================================================================


def _describe_column(name: str, values: np.ndarray) -> dict[str, Any]:
    n = values.size
    row: dict[str, Any] = {"variable": name, "n": n}
    if n == 0:
        return row | {column: float("nan") for column in SUMMARY_COLUMNS[2:]}
    q = np.quantile(values, [0.1, 0.25, 0.5, 0.75, 0.9])
    spread = n > 2 and float(np.ptp(values)) > 0.0
    row.update(
        mean=float(values.mean()),
        sd=float(values.std(ddof=1)) if n > 1 else float("nan"),
        skewness=float(stats.skew(values)) if spread else float("nan"),
        kurtosis=float(stats.kurtosis(values, fisher=False)) if spread else float("nan"),
        zero_fraction=float(np.mean(values == 0.0)),
        maximum=float(values.max()),
        q10=float(q[0]),
        q25=float(q[1]),
        q50=float(q[2]),
        q75=float(q[3]),
        q90=float(q[4]),
    )
    return row


def describe(data: PanelDataset) -> pd.DataFrame:
    """Descriptive statistics of the outcome, its positive log values and every covariate."""
    frame = data.to_frame()
    y = frame["y"].to_numpy(dtype=float)
    positive = y[y > 0.0]
    rows = [_describe_column("y", y), _describe_column("log_y_positive", np.log(positive))]
    rows += [_describe_column(name, frame[name].to_numpy(dtype=float)) for name in data.covariate_columns()]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


# =============================================================================
# Coefficient panels
# =============================================================================


def _entries(
    params: MixtureParams,
    prepared: PreparedData,
    se: np.ndarray | None,
    hide_beta_se: bool,
) -> dict[str, list[dict[str, Any]]]:
    labels = parameter_labels(params, prepared.binary_names, prepared.positive_names)
    panels: dict[str, list[dict[str, Any]]] = {"binary": [], "positive": [], "mixing": []}
    for i, (label, estimate) in enumerate(zip(labels, params.to_vector(), strict=True)):
        entry: dict[str, Any] = {"parameter": label.name, "block": label.block, "estimate": float(estimate)}
        if se is not None and not (hide_beta_se and label.block == "beta"):
            error = float(se[i])
            entry["se"] = error
            if math.isfinite(error) and error > 0.0:
                entry["z"] = float(estimate) / error
                entry["significant"] = abs(entry["z"]) > Z_CRITICAL
        panels[label.panel].append(entry)
    return panels


def coefficient_panels(
    result: FitResult,
    prepared: PreparedData,
    bootstrap: BootstrapResult | None = None,
    raw_params: MixtureParams | None = None,
) -> dict[str, Any]:
    """Per-tau coefficient document: binary, positive and mixing panels plus the fit summary.

    Penalized slopes get no standard errors. ``raw_params`` adds a block with
    the estimates on the raw covariate scale.
    """
    se = bootstrap.se if bootstrap is not None else None
    panels = _entries(result.params, prepared, se, hide_beta_se=result.lam is not None)
    fit_panel = result.summary()
    if bootstrap is not None:
        fit_panel["bootstrap"] = {
            "n_replicates": bootstrap.n_replicates,
            "n_failed": bootstrap.n_failed,
            "n_ambiguous": bootstrap.n_ambiguous,
            "warnings": bootstrap.warnings,
        }
    diag = result.diagnostics
    fit_panel["diagnostics"] = diag.model_dump(exclude={"messages"})

    document: dict[str, Any] = {
        "tau": result.tau,
        "G": result.n_components,
        "binary": panels["binary"],
        "positive": panels["positive"],
        "mixing": panels["mixing"],
        "fit": fit_panel,
    }
    if raw_params is not None:
        raw = _entries(raw_params, prepared, None, hide_beta_se=True)
        document["raw_scale"] = {"binary": raw["binary"], "positive": raw["positive"]}
    return document


def path_rows(
    result: FitResult,
    prepared: PreparedData,
    bootstrap: BootstrapResult | None = None,
) -> list[dict[str, Any]]:
    """Long-format rows (one per parameter) of a fit, for coefficient-by-tau plots."""
    labels = parameter_labels(result.params, prepared.binary_names, prepared.positive_names)
    rows = []
    for i, (label, estimate) in enumerate(zip(labels, result.params.to_vector(), strict=True)):
        se = float("nan")
        if bootstrap is not None and not (result.lam is not None and label.block == "beta"):
            se = float(bootstrap.se[i])
        rows.append(
            {
                "tau": result.tau,
                "panel": label.panel,
                "block": label.block,
                "parameter": label.name,
                "estimate": float(estimate),
                "se": se,
            }
        )
    return rows


# =============================================================================
# Writers
# =============================================================================


def json_safe(value: Any) -> Any:
    """Plain-Python copy of ``value`` with NaN and infinities replaced by None."""
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, list | tuple):
        return [json_safe(item) for item in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(payload: dict[str, Any], path: Path) -> None:
    """Write deterministic JSON (NaN and infinities become null)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(payload), indent=2) + "\n", encoding="utf-8")


def write_frame(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


def coefficients_filename(tau: float) -> str:
    return f"coefficients_{tau:g}.json"
