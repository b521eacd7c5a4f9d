"""Model fitting and inference."""

from mixquant.core.al_math import al_log_density, check_loss, gig_inverse_moment, sample_al
from mixquant.core.data import PanelDataset, PreparedData, prepare, read_panel_csv, zero_fraction
from mixquant.core.em import e_step, fit, observed_loglik
from mixquant.core.errors import ConfigError, DataValidationError, FitError, MixQuantError, NumericalError
from mixquant.core.inference import bootstrap_se, select_model, simulate
from mixquant.core.models import (
    BootstrapResult,
    FitOptions,
    FitResult,
    MixtureParams,
    PenaltyConfig,
    QuantileConfig,
    SelectionTable,
)
from mixquant.core.penalized import cross_validate_lambda, fit_penalized

__all__ = [
    "BootstrapResult",
    "ConfigError",
    "DataValidationError",
    "FitError",
    "FitOptions",
    "FitResult",
    "MixQuantError",
    "MixtureParams",
    "NumericalError",
    "PanelDataset",
    "PenaltyConfig",
    "PreparedData",
    "QuantileConfig",
    "SelectionTable",
    "al_log_density",
    "bootstrap_se",
    "check_loss",
    "cross_validate_lambda",
    "e_step",
    "fit",
    "fit_penalized",
    "gig_inverse_moment",
    "observed_loglik",
    "prepare",
    "read_panel_csv",
    "sample_al",
    "select_model",
    "simulate",
    "zero_fraction",
]
