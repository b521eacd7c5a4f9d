"""Run configuration for mixquant."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mixquant.core.data import OUTCOME_COLUMN, TIME_COLUMN, UNIT_COLUMN
from mixquant.core.errors import ConfigError
from mixquant.core.models import FitOptions

DEFAULT_TAUS = [0.1, 0.25, 0.5, 0.75, 0.9]
DEFAULT_G_RANGE = [1, 2, 3, 4, 5, 6]


class ColumnMapping(BaseModel):
    """Where each variable lives in the input CSV."""

    unit: str = Field(default=UNIT_COLUMN, description="Unit identifier column")
    time: str = Field(default=TIME_COLUMN, description="Integer time index column")
    outcome: str = Field(default=OUTCOME_COLUMN, description="Nonnegative outcome column")
    binary: list[str] = Field(default_factory=list, description="Covariates of the zero/positive (logit) part")
    positive: list[str] = Field(default_factory=list, description="Covariates of the positive (quantile) part")


class PenaltySettings(BaseModel):
    """LASSO penalty on the positive-part slopes."""

    mode: Literal["off", "fixed", "cv"] = Field(default="off", description="off, fixed lambda, or cross-validated lambda")
    lambda_: float | None = Field(default=None, ge=0.0, alias="lambda", description="Penalty for mode=fixed")
    grid: list[float] | None = Field(default=None, description="Lambda grid for mode=cv; derived from lambda_max when empty")
    n_lambdas: int = Field(default=50, ge=1, description="Size of the derived grid")
    n_folds: int = Field(default=10, ge=2, description="Cross-validation folds over units")
    one_se_rule: bool = Field(default=False, description="Pick the largest lambda within one SE of the CV minimum")

    model_config = ConfigDict(validate_by_name=True)

    @field_validator("mode", mode="before")
    @classmethod
    def _unquoted_off(cls, mode: object) -> object:
        # YAML 1.1 reads a bare `off` as False
        return "off" if mode is False else mode

    @model_validator(mode="after")
    def _check_mode(self) -> PenaltySettings:
        if self.mode == "fixed" and self.lambda_ is None:
            raise ValueError("penalty mode 'fixed' needs a lambda value")
        if self.grid is not None:
            if any(lam < 0 for lam in self.grid):
                raise ValueError("lambda grid values must be nonnegative")
            self.grid = sorted(self.grid)
        return self


class BootstrapSettings(BaseModel):
    """Parametric-bootstrap standard errors."""

    replicates: int = Field(default=250, ge=0, description="Number of replicates; 0 turns the bootstrap off")
    multi_start: bool = Field(default=False, description="Refit replicates from the data-driven starts instead of the estimate")

    @field_validator("replicates")
    @classmethod
    def _off_or_enough(cls, replicates: int) -> int:
        if replicates == 1:
            raise ValueError("bootstrap needs 0 (off) or at least 2 replicates")
        return replicates


class FitSettings(BaseModel):
    """EM controls shared by every fit of a run."""

    n_starts: int = Field(default=20, ge=1)
    tol: float = Field(default=1e-5, gt=0.0)
    max_iter: int = Field(default=500, ge=1)
    max_irls_iter: int = Field(default=100, ge=1)
    max_degenerate_restarts: int = Field(default=3, ge=0)
    positive_update: Literal["exact", "closed_form"] = "exact"


class RunConfig(BaseModel):
    """mixquant run configuration.

    Every field can be set in the YAML file; CLI flags override file values.
    """

    data_path: Path = Field(description="Input panel CSV")
    columns: ColumnMapping = Field(default_factory=ColumnMapping)
    taus: list[float] = Field(default_factory=lambda: list(DEFAULT_TAUS), min_length=1, description="Quantile levels")
    G_range: list[int] = Field(default_factory=lambda: list(DEFAULT_G_RANGE), min_length=1, description="Component counts to compare")
    penalty: PenaltySettings = Field(default_factory=PenaltySettings)
    bootstrap: BootstrapSettings = Field(default_factory=BootstrapSettings)
    fit: FitSettings = Field(default_factory=FitSettings)
    seed: int = Field(default=0, ge=0, description="Master seed; every random stream derives from it")
    out_dir: Path = Field(default=Path("mixquant-out"), description="Directory for the run artifacts")
    workers: int = Field(default=1, ge=1, description="Worker threads for starts, folds and replicates")
    standardize: bool = Field(default=True, description="Center and scale covariates before fitting")
    raw_scale: bool = Field(default=False, description="Also report coefficients on the raw covariate scale")
    zero_threshold: float = Field(default=0.0, ge=0.0, description="Outcomes below this count as zero")

    @field_validator("taus")
    @classmethod
    def _check_taus(cls, taus: list[float]) -> list[float]:
        if any(not 0.0 < tau < 1.0 for tau in taus):
            raise ValueError("every tau must lie in (0, 1)")
        return sorted(set(taus))

    @field_validator("G_range")
    @classmethod
    def _check_groups(cls, groups: list[int]) -> list[int]:
        if any(g < 1 for g in groups):
            raise ValueError("component counts must be at least 1")
        return sorted(set(groups))

    def fit_options(self) -> FitOptions:
        return FitOptions(
            n_starts=self.fit.n_starts,
            tol=self.fit.tol,
            max_iter=self.fit.max_iter,
            max_irls_iter=self.fit.max_irls_iter,
            max_degenerate_restarts=self.fit.max_degenerate_restarts,
            positive_update=self.fit.positive_update,
            seed=self.seed,
            n_workers=self.workers,
        )

    @classmethod
    def load(cls, config_path: Path) -> RunConfig:
        """Load a YAML configuration; a relative ``data_path`` is resolved against the file's directory.

        Raises:
            ConfigError: The file is not valid YAML or not a mapping.
            pydantic.ValidationError: A field is invalid.
        """
        try:
            with config_path.open(encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path} must contain a mapping of settings")
        config = cls.model_validate(data)
        if not config.data_path.is_absolute():
            config.data_path = config_path.parent / config.data_path
        return config

    def save(self, config_path: Path) -> None:
        """Save configuration to file."""
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with config_path.open("w", encoding="utf-8") as f:
            yaml.dump(self.model_dump(mode="json", by_alias=True), f, default_flow_style=False, sort_keys=False)
