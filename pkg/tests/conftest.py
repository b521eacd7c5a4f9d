"""Pytest configuration and shared fixtures."""

from __future__ import annotations

import tempfile
from collections.abc import Callable
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pytest

from mixquant.core.data import Observation, PanelDataset, UnitRecord
from mixquant.core.inference import simulate
from mixquant.core.models import MixtureParams, QuantileConfig

if TYPE_CHECKING:
    from collections.abc import Generator

TemplateFactory = Callable[..., PanelDataset]


@pytest.fixture
def temp_dir() -> Generator[Path]:
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def demo_panel_path() -> Path:
    """Path of the bundled demo panel."""
    return Path(str(resources.files("mixquant.resources").joinpath("demo_panel.csv")))


@pytest.fixture
def median() -> QuantileConfig:
    return QuantileConfig(tau=0.5)


def build_template(n_units: int, n_times: int, m: int, p: int, seed: int = 0) -> PanelDataset:
    """Panel with Gaussian covariates and placeholder outcomes of 1.0."""
    rng = np.random.default_rng(seed)
    units = []
    for i in range(n_units):
        observations = [
            Observation(time=t, y=1.0, s=tuple(rng.normal(size=m).tolist()), x=tuple(rng.normal(size=p).tolist()))
            for t in range(1, n_times + 1)
        ]
        units.append(UnitRecord(f"u{i:03d}", observations))
    return PanelDataset(
        units=units,
        covariate_names_binary=[f"s{j + 1}" for j in range(m)],
        covariate_names_positive=[f"x{j + 1}" for j in range(p)],
    )


@pytest.fixture
def template_factory() -> TemplateFactory:
    """Factory for covariate templates: ``template_factory(n_units, n_times, m, p, seed)``."""
    return build_template


@pytest.fixture
def two_component_params() -> MixtureParams:
    """Well-separated two-component model with one binary and two positive covariates."""
    return MixtureParams(
        gamma=np.array([0.6]),
        beta=np.array([0.8, -0.4]),
        sigma=0.25,
        b0=np.array([-0.8, 0.4]),
        b1=np.array([0.0, 3.0]),
        pi=np.array([0.45, 0.55]),
    )


@pytest.fixture
def two_component_panel(two_component_params: MixtureParams, median: QuantileConfig) -> PanelDataset:
    """300 units x 4 waves simulated from ``two_component_params`` at the median."""
    return simulate(two_component_params, build_template(300, 4, 1, 2, seed=11), median, seed=5)


@pytest.fixture
def small_panel() -> PanelDataset:
    """Hand-written panel of 4 units with zeros, one covariate per block."""
    rows = {
        "a": [(1, 0.0, 0.5, 1.0), (2, 2.0, -0.2, 0.3), (3, 1.5, 0.1, -0.7)],
        "b": [(1, 3.0, -1.0, 0.2), (2, 0.0, 0.4, 1.1), (3, 4.5, 0.9, -0.4)],
        "c": [(1, 0.7, 0.3, -1.2), (2, 0.9, -0.6, 0.8)],
        "d": [(1, 0.0, 1.2, 0.0), (2, 12.0, -0.3, 1.5), (3, 8.0, 0.0, 0.6), (4, 0.0, 0.7, -0.9)],
    }
    units = [
        UnitRecord(uid, [Observation(time=t, y=y, s=(s,), x=(x,)) for t, y, s, x in obs])
        for uid, obs in rows.items()
    ]
    return PanelDataset(units=units, covariate_names_binary=["s1"], covariate_names_positive=["x1"])


@pytest.fixture
def modest_panel(two_component_params: MixtureParams, median: QuantileConfig) -> PanelDataset:
    """80 units x 3 waves from the two-component model; quick to fit."""
    return simulate(two_component_params, build_template(80, 3, 1, 2, seed=2), median, seed=9)


@pytest.fixture
def positive_panel(modest_panel: PanelDataset) -> PanelDataset:
    """``modest_panel`` with every zero replaced by 1.0."""
    y = modest_panel.outcomes()
    return modest_panel.with_outcomes(np.where(y == 0.0, 1.0, y))
