"""Data simulation, parametric bootstrap and BIC model selection."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import expit

from mixquant.core.al_math import sample_al
from mixquant.core.data import PanelDataset, PreparedData, prepare, raw_design
from mixquant.core.em import fit
from mixquant.core.errors import DataValidationError, FitError, NumericalError
from mixquant.core.models import (
    BootstrapResult,
    FitOptions,
    FitResult,
    MixtureParams,
    QuantileConfig,
    SelectionRow,
    SelectionTable,
)
from mixquant.core.seeding import spawn_generators, substream

logger = logging.getLogger(__name__)

# Adjacent b1 gaps below this make the canonical ordering of a replicate ambiguous
AMBIGUOUS_GAP = 1e-3
MAX_FAILED_SHARE = 0.2


def simulate(
    params: MixtureParams,
    template: PanelDataset,
    cfg: QuantileConfig,
    seed: int | np.random.Generator | None = None,
) -> PanelDataset:
    """Draw outcomes from the two-part mixture on the template's units and covariates.

    Parameters are on the raw covariate scale. Each unit draws one component;
    each observation is zero with the component's logit probability and
    otherwise exp of an AL draw around x'beta + b1_k.
    """
    S, X, unit_index = raw_design(template)
    if S.shape[1] != params.gamma.size or X.shape[1] != params.beta.size:
        raise ValueError(
            f"parameters expect {params.gamma.size} binary and {params.beta.size} positive covariates, "
            f"template has {S.shape[1]} and {X.shape[1]}"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    component = rng.choice(params.n_components, size=template.n_units, p=params.pi)[unit_index]
    zero = rng.random(unit_index.size) < expit(S @ params.gamma + params.b0[component])
    log_y = np.asarray(sample_al(X @ params.beta + params.b1[component], params.sigma, cfg.tau, rng))
    with np.errstate(over="ignore"):
        y = np.where(zero, 0.0, np.exp(log_y))
    return template.with_outcomes(y)


# =============================================================================
# Bootstrap
# =============================================================================


def _replicate(
    index: int,
    rng: np.random.Generator,
    raw: MixtureParams,
    point: MixtureParams,
    data: PanelDataset,
    cfg: QuantileConfig,
    options: FitOptions,
    lam: float | None,
    standardize: bool,
    zero_threshold: float,
    multi_start: bool,
) -> MixtureParams | None:
    sample = simulate(raw, data, cfg, rng)
    try:
        prepared = prepare(sample, standardize=standardize, zero_threshold=zero_threshold)
        if multi_start:
            run_options = options.model_copy(update={"seed": int(rng.integers(2**32)), "start": None})
        else:
            run_options = options.model_copy(update={"start": point, "n_starts": 1, "n_workers": 1})
        return fit(prepared, cfg, point.n_components, run_options, lam=lam).params
    except (FitError, NumericalError, DataValidationError) as e:
        logger.warning("Bootstrap replicate %d failed: %s", index, e)
        return None


def bootstrap_se(
    fit_result: FitResult,
    data: PanelDataset,
    cfg: QuantileConfig,
    n_replicates: int = 250,
    seed: int = 0,
    *,
    options: FitOptions | None = None,
    lam: float | None = None,
    standardize: bool = True,
    zero_threshold: float = 0.0,
    multi_start: bool = False,
) -> BootstrapResult:
    """Parametric-bootstrap standard errors of a fitted model.

    Replicate datasets are simulated from the estimate on the raw covariate
    scale, prepared exactly as the original data and refit (warm-started from
    the estimate unless ``multi_start``). Replicates are label-aligned by the
    canonical b1 ordering.

    Args:
        fit_result: Converged fit on ``prepare(data, standardize, zero_threshold)``.
        data: The panel the fit was computed on; supplies units and covariates.
        cfg: Quantile level of the fit.
        n_replicates: Number of simulated datasets, at least 2.
        seed: Seed of the replicate streams.
        options: EM controls for the refits.
        lam: Penalty used by the original fit, if any.
        standardize: Whether the fit used standardized covariates.
        zero_threshold: Zero threshold the fit used.
        multi_start: Refit every replicate from the data-driven starts instead of the estimate.
    """
    if n_replicates < 2:
        raise ValueError("n_replicates must be at least 2")
    if not fit_result.converged:
        raise ValueError("cannot bootstrap a fit that did not converge")
    options = options or FitOptions()

    point = fit_result.params.canonical()
    scaling = prepare(data, standardize=standardize, zero_threshold=zero_threshold).standardization
    raw = scaling.to_raw(point) if scaling is not None else point
    generators = spawn_generators(seed, n_replicates)

    def job(i: int) -> MixtureParams | None:
        return _replicate(i, generators[i], raw, point, data, cfg, options, lam, standardize, zero_threshold, multi_start)

    logger.info("Bootstrapping tau=%g G=%d with %d replicates", cfg.tau, point.n_components, n_replicates)
    if options.n_workers > 1:
        with ThreadPoolExecutor(max_workers=options.n_workers) as pool:
            refits = list(pool.map(job, range(n_replicates)))
    else:
        refits = [job(i) for i in range(n_replicates)]

    succeeded = [params.canonical() for params in refits if params is not None]
    n_failed = n_replicates - len(succeeded)
    n_ambiguous = sum(1 for params in succeeded if np.any(np.diff(params.b1) < AMBIGUOUS_GAP))

    messages = []
    if n_failed > MAX_FAILED_SHARE * n_replicates:
        messages.append(f"{n_failed} of {n_replicates} bootstrap replicates failed to converge")
    if n_ambiguous:
        messages.append(f"{n_ambiguous} replicates had nearly tied b1 locations; their label alignment is ambiguous")

    width = point.to_vector().size
    estimates = np.array([params.to_vector() for params in succeeded]).reshape(len(succeeded), width)
    if len(succeeded) >= 2:
        se = estimates.std(axis=0, ddof=1)
    else:
        se = np.full(width, np.nan)
        messages.append("fewer than two successful replicates; standard errors are undefined")
    for message in messages:
        logger.warning(message)
    return BootstrapResult(
        n_replicates=n_replicates,
        se=se,
        replicate_estimates=estimates,
        n_failed=n_failed,
        n_ambiguous=n_ambiguous,
        warnings=messages,
    )


# =============================================================================
# Model selection
# =============================================================================


def fit_grid(
    prepared: PreparedData,
    taus: list[float],
    G_range: list[int],
    options: FitOptions | None = None,
) -> tuple[SelectionTable, dict[tuple[float, int], FitResult]]:
    """Fit every (tau, G) cell and flag the BIC minimizer per tau.

    A cell whose fit fails is marked failed and the table is still completed.

    Returns:
        Tuple of (selection table, fits keyed by (tau, G)).
    """
    if not taus or not G_range:
        raise ValueError("taus and G_range must be nonempty")
    options = options or FitOptions()
    rows: list[SelectionRow] = []
    fits: dict[tuple[float, int], FitResult] = {}
    for tau in taus:
        cfg = QuantileConfig(tau=tau)
        cells: list[SelectionRow] = []
        for n_components in G_range:
            cell_options = options.model_copy(update={"seed": substream(options.seed, f"starts/{tau:g}/{n_components}")})
            try:
                result = fit(prepared, cfg, n_components, cell_options)
            except (FitError, NumericalError) as e:
                logger.warning("Fit failed for tau=%g, G=%d: %s", tau, n_components, e)
                cells.append(SelectionRow(G=n_components, tau=tau, failed=True, error=str(e)))
                continue
            fits[(tau, n_components)] = result
            cells.append(
                SelectionRow(
                    G=n_components,
                    tau=tau,
                    loglik=result.loglik,
                    n_parameters=result.n_parameters,
                    aic=result.aic,
                    bic=result.bic,
                )
            )
        fitted = [row for row in cells if not row.failed]
        if fitted:
            best = min(fitted, key=lambda row: (row.bic, row.G))
            best.selected = True
            logger.info("tau=%g: BIC selects G=%d (BIC %.3f)", tau, best.G, best.bic)
        else:
            logger.warning("tau=%g: every fit failed; no G selected", tau)
        rows.extend(cells)
    return SelectionTable(rows=rows), fits


def select_model(
    data: PanelDataset,
    taus: list[float],
    G_range: list[int],
    options: FitOptions | None = None,
    *,
    standardize: bool = True,
    zero_threshold: float = 0.0,
) -> SelectionTable:
    """BIC model-selection table over quantile levels and component counts (N = number of units)."""
    prepared = prepare(data, standardize=standardize, zero_threshold=zero_threshold)
    table, _ = fit_grid(prepared, taus, G_range, options)
    return table
