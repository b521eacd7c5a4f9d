"""Core data models for mixquant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

# Tolerance used when checking that a probability vector sums to one
SIMPLEX_TOL = 1e-8


# =============================================================================
# Quantile level
# =============================================================================


class QuantileConfig(BaseModel):
    """Quantile level tau with the mixture constants of the AL location-scale representation."""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(gt=0.0, lt=1.0, description="Quantile level in (0, 1)")

    @computed_field  # type: ignore[prop-decorator]
    @property
    def theta(self) -> float:
        """Skewness constant (1 - 2 tau) / (tau (1 - tau))."""
        return (1.0 - 2.0 * self.tau) / (self.tau * (1.0 - self.tau))

    @computed_field  # type: ignore[prop-decorator]
    @property
    def rho2(self) -> float:
        """Variance constant 2 / (tau (1 - tau)); at least 8, equal to 8 only at the median."""
        return 2.0 / (self.tau * (1.0 - self.tau))

    @property
    def gig_root(self) -> float:
        """sqrt(theta^2 + 2 rho^2), which simplifies to 1 / (tau (1 - tau))."""
        return math.sqrt(self.theta**2 + 2.0 * self.rho2)


# =============================================================================
# Parameters
# =============================================================================


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Full parameter vector of the two-part G-component model at one quantile level.

    Attributes:
        gamma: Binary-part slopes (length m).
        beta: Positive-part slopes at level tau (length p).
        sigma: AL scale.
        b0: Binary-part component locations (length G).
        b1: Positive-part component locations (length G).
        pi: Component masses (length G), a probability vector.
    """

    gamma: np.ndarray
    beta: np.ndarray
    sigma: float
    b0: np.ndarray
    b1: np.ndarray
    pi: np.ndarray

    def __post_init__(self) -> None:
        for name in ("gamma", "beta", "b0", "b1", "pi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy())
        object.__setattr__(self, "sigma", float(self.sigma))

        n_components = self.b1.shape[0]
        if n_components < 1:
            raise ValueError("at least one mixture component is required")
        if self.b0.shape != (n_components,) or self.pi.shape != (n_components,):
            raise ValueError(f"b0, b1 and pi must all have length G={n_components}")
        if self.gamma.ndim != 1 or self.beta.ndim != 1:
            raise ValueError("gamma and beta must be vectors")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if np.any(self.pi < 0.0) or abs(self.pi.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"pi must be a probability vector, got {self.pi.tolist()}")
        for name in ("gamma", "beta", "b0", "b1"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_components(self) -> int:
        return int(self.b1.shape[0])

    def permuted(self, order: np.ndarray | list[int]) -> MixtureParams:
        """Return a copy with components reordered by ``order``."""
        idx = np.asarray(order, dtype=int)
        return replace(self, b0=self.b0[idx], b1=self.b1[idx], pi=self.pi[idx])

    def canonical(self) -> MixtureParams:
        """Components sorted by b1 ascending (the label-switching convention)."""
        return self.permuted(np.argsort(self.b1, kind="stable"))

    def to_vector(self) -> np.ndarray:
        """Flatten as gamma, b0, beta, b1, sigma, pi (the paths.csv / bootstrap order)."""
        return np.concatenate([self.gamma, self.b0, self.beta, self.b1, [self.sigma], self.pi])

    def to_dict(self) -> dict[str, Any]:
        return {
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma,
            "b0": self.b0.tolist(),
            "b1": self.b1.tolist(),
            "pi": self.pi.tolist(),
        }


@dataclass(frozen=True)
class ParameterLabel:
    """Name and table panel of one entry of ``MixtureParams.to_vector()``."""

    block: str
    name: str
    panel: str


def parameter_labels(params: MixtureParams, binary_names: list[str], positive_names: list[str]) -> list[ParameterLabel]:
    """Labels aligned with ``params.to_vector()``."""
    if len(binary_names) != params.gamma.size or len(positive_names) != params.beta.size:
        raise ValueError("covariate names do not match the parameter dimensions")
    components = range(1, params.n_components + 1)
    labels = [ParameterLabel("gamma", name, "binary") for name in binary_names]
    labels += [ParameterLabel("b0", f"b0_{k}", "binary") for k in components]
    labels += [ParameterLabel("beta", name, "positive") for name in positive_names]
    labels += [ParameterLabel("b1", f"b1_{k}", "positive") for k in components]
    labels.append(ParameterLabel("sigma", "sigma", "positive"))
    labels += [ParameterLabel("pi", f"pi_{k}", "mixing") for k in components]
    return labels


class ParamsFile(BaseModel):
    """JSON mirror of MixtureParams plus tau, as read by ``mixquant simulate``."""

    tau: float = Field(gt=0.0, lt=1.0)
    gamma: list[float] = Field(default_factory=list)
    beta: list[float] = Field(default_factory=list)
    sigma: float = Field(gt=0.0)
    b0: list[float]
    b1: list[float]
    pi: list[float]
    binary_covariates: list[str] = Field(default_factory=list, description="Columns entering the binary block, in gamma order")
    positive_covariates: list[str] = Field(default_factory=list, description="Columns entering the positive block, in beta order")

    @model_validator(mode="after")
    def _check_dimensions(self) -> ParamsFile:
        if len(self.binary_covariates) != len(self.gamma):
            raise ValueError("binary_covariates must name one column per gamma entry")
        if len(self.positive_covariates) != len(self.beta):
            raise ValueError("positive_covariates must name one column per beta entry")
        try:
            self.to_params()
        except ValueError as e:
            raise ValueError(f"invalid mixture parameters: {e}") from e
        return self

    def to_params(self) -> MixtureParams:
        return MixtureParams(
            gamma=np.array(self.gamma),
            beta=np.array(self.beta),
            sigma=self.sigma,
            b0=np.array(self.b0),
            b1=np.array(self.b1),
            pi=np.array(self.pi),
        )


# =============================================================================
# E-step state and fit results
# =============================================================================


@dataclass
class PosteriorState:
    """E-step output.

    Attributes:
        w: Posterior component weights, one row per unit (N x G).
        v_inv: Inverse latent-scale expectations per positive observation and component (n_pos x G).
        loglik: Observed log-likelihood at the parameters the E-step was run with.
    """

    w: np.ndarray
    v_inv: np.ndarray
    loglik: float


class FitDiagnostics(BaseModel):
    """Recoverable numerical events recorded while fitting."""

    ridge_jitter: int = 0
    irls_capped: int = 0
    unidentified_components: list[int] = Field(default_factory=list)
    sigma_clamped: int = 0
    degenerate_restarts: int = 0
    safeguard_rejections: int = 0
    messages: list[str] = Field(default_factory=list)

    def note(self, message: str) -> None:
        # Bounded so long runs don't balloon the record
        if len(self.messages) < 50 and message not in self.messages:
            self.messages.append(message)


def information_criteria(loglik: float, n_parameters: int, n_units: int) -> tuple[float, float]:
    """AIC and BIC, with N the number of units."""
    aic = -2.0 * loglik + 2.0 * n_parameters
    bic = -2.0 * loglik + n_parameters * math.log(n_units)
    return aic, bic


def count_parameters(params: MixtureParams, nonzero_beta_only: bool = False) -> int:
    """Free parameters: dim gamma + dim beta + 1 + 2G + (G - 1)."""
    n_beta = int(np.count_nonzero(params.beta)) if nonzero_beta_only else params.beta.size
    g = params.n_components
    return params.gamma.size + n_beta + 1 + 2 * g + (g - 1)


@dataclass
class FitResult:
    """Result of a (possibly penalized) multi-start EM fit."""

    params: MixtureParams
    loglik_trace: list[float]
    n_iterations: int
    converged: bool
    n_parameters: int
    aic: float
    bic: float
    tau: float
    n_units: int
    lam: float | None = None
    start_index: int = 0
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)
    # loglik - lam * ||beta||_1 per cycle; equals loglik_trace when unpenalized
    objective_trace: list[float] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def n_components(self) -> int:
        return self.params.n_components

    def summary(self) -> dict[str, Any]:
        """Fit summary panel: loglik, parameter count, criteria and lambda."""
        return {
            "loglik": self.loglik,
            "n_parameters": self.n_parameters,
            "aic": self.aic,
            "bic": self.bic,
            "lambda": self.lam,
            "n_components": self.n_components,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
        }


class FitOptions(BaseModel):
    """Controls for the multi-start EM loop."""

    n_starts: int = Field(default=20, ge=1, description="Number of EM starts")
    tol: float = Field(default=1e-5, gt=0.0, description="Convergence threshold on the loglik change")
    max_iter: int = Field(default=500, ge=1, description="Maximum EM cycles per start")
    max_irls_iter: int = Field(default=100, ge=1, description="Maximum IRLS iterations in the binary M-step")
    seed: int = Field(default=0, ge=0, description="Master seed for the start streams")
    n_workers: int = Field(default=1, ge=1, description="Worker threads for the start loop")
    max_degenerate_restarts: int = Field(default=3, ge=0, description="Fresh reseeds allowed when a start degenerates")
    positive_update: Literal["exact", "closed_form"] = Field(
        default="exact", description="Positive-part M-step: exact linear program or closed-form weighted least squares"
    )
    start: Any = Field(default=None, description="Warm start (MixtureParams); replaces the data-driven starts")

    @field_validator("start")
    @classmethod
    def _check_start(cls, start: Any) -> MixtureParams | None:
        if start is not None and not isinstance(start, MixtureParams):
            raise ValueError("start must be a MixtureParams instance")
        return start


class PenaltyConfig(BaseModel):
    """Cross-validation settings for the LASSO penalty."""

    lambda_grid: list[float] = Field(min_length=1)
    n_folds: int = Field(default=10, ge=2)
    fold_seed: int = Field(default=0, ge=0)
    one_se_rule: bool = Field(default=False, description="Pick the largest lambda within one SE of the minimum")

    @field_validator("lambda_grid")
    @classmethod
    def _sorted_nonnegative(cls, grid: list[float]) -> list[float]:
        if any(lam < 0 for lam in grid):
            raise ValueError("lambda values must be nonnegative")
        if any(b < a for a, b in zip(grid, grid[1:], strict=False)):
            raise ValueError("lambda grid must be sorted ascending")
        return grid


class CVRow(BaseModel):
    """Cross-validated held-out check loss at one penalty value."""

    lam: float
    mean_loss: float
    se: float
    fold_losses: list[float]
    selected: bool = False


# =============================================================================
# Inference results
# =============================================================================


@dataclass
class BootstrapResult:
    """Parametric-bootstrap standard errors.

    Attributes:
        n_replicates: Replicates requested.
        se: Standard deviation of each parameter over successful replicates (``to_vector`` order).
        replicate_estimates: One row per successful replicate.
        n_failed: Replicates dropped because the refit failed.
        n_ambiguous: Replicates whose b1 ordering was ambiguous (adjacent gap < 1e-3).
        warnings: Human-readable warnings, e.g. a high failure share.
    """

    n_replicates: int
    se: np.ndarray
    replicate_estimates: np.ndarray
    n_failed: int
    n_ambiguous: int = 0
    warnings: list[str] = field(default_factory=list)


class SelectionRow(BaseModel):
    """One (tau, G) cell of the model-selection table."""

    G: int
    tau: float
    loglik: float | None = None
    n_parameters: int | None = None
    aic: float | None = None
    bic: float | None = None
    selected: bool = False
    failed: bool = False
    error: str | None = None


class SelectionTable(BaseModel):
    """BIC model-selection table over quantile levels and component counts."""

    rows: list[SelectionRow] = Field(default_factory=list)

    def selected(self, tau: float) -> SelectionRow | None:
        for row in self.rows:
            if row.tau == tau and row.selected:
                return row
        return None

    def to_frame(self) -> pd.DataFrame:
        columns = list(SelectionRow.model_fields)
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=columns)
