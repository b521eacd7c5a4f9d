"""LASSO-penalized EM on the positive-part slopes, with unit-level cross-validation.

Only beta is penalized and the E-step is unchanged. The exact positive update
adds sigma * lam ||beta||_1 to its linear program. The closed-form update instead
minimizes the quadratic surrogate 1/2 beta'A beta - c'beta + lam ||beta||_1 by
cyclic coordinate descent, where A and c are the closed-form normal equations
divided by rho^2 sigma.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import optimize, sparse

from mixquant.core.al_math import check_loss
from mixquant.core.data import PreparedData
from mixquant.core.em import e_step, fit, initial_params, predict_location
from mixquant.core.errors import DataValidationError, FitError, NumericalError
from mixquant.core.models import (
    CVRow,
    FitDiagnostics,
    FitOptions,
    FitResult,
    MixtureParams,
    PenaltyConfig,
    PosteriorState,
    QuantileConfig,
)
from mixquant.core.mstep import beta_normal_equations, m_step_positive, require_positive_weight, update_locations
from mixquant.core.seeding import spawn_generators

logger = logging.getLogger(__name__)

CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
MAX_FOLD_RESAMPLES = 20


def soft_threshold(x: np.ndarray | float, t: float) -> np.ndarray | float:
    """sign(x) * max(|x| - t, 0)."""
    s = np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    return float(s) if np.ndim(s) == 0 else s


def coordinate_descent(
    A: np.ndarray,
    c: np.ndarray,
    lam: float,
    beta0: np.ndarray | None = None,
    tol: float = CD_TOL,
    max_sweeps: int = CD_MAX_SWEEPS,
) -> np.ndarray:
    """Minimize 1/2 beta'A beta - c'beta + lam ||beta||_1 over beta.

    Coordinates with A_jj = 0 carry no information and are set to zero.
    """
    p = c.shape[0]
    beta = np.zeros(p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    diag = np.diag(A).copy()
    for sweep in range(max_sweeps):
        max_change = 0.0
        for j in range(p):
            if diag[j] <= 0.0:
                new = 0.0
            else:
                partial = c[j] - A[j] @ beta + diag[j] * beta[j]
                new = soft_threshold(partial, lam) / diag[j]
            max_change = max(max_change, abs(new - beta[j]))
            beta[j] = new
        if max_change < tol:
            break
    else:
        logger.debug("Coordinate descent stopped after %d sweeps (last change above %.0e)", max_sweeps, tol)
    logger.debug("Coordinate descent: %d sweeps, %d of %d slopes nonzero", sweep + 1, np.count_nonzero(beta), p)
    return beta


def _surrogate(state: PosteriorState, data: PreparedData, cfg: QuantileConfig, current: MixtureParams) -> tuple[np.ndarray, np.ndarray]:
    A, rhs = beta_normal_equations(state, data, cfg, current.b1)
    scale = 1.0 / (cfg.rho2 * current.sigma)
    return A * scale, rhs * scale


def penalized_m_step_positive(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    current: MixtureParams,
    lam: float,
    diagnostics: FitDiagnostics | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(beta, b1) update with a LASSO penalty on beta; locations stay unpenalized.

    Returns:
        Tuple of (beta, b1).
    """
    if lam < 0.0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if lam == 0.0:
        return m_step_positive(state, data, cfg, current, diagnostics)
    require_positive_weight(state, data)
    A, c = _surrogate(state, data, cfg, current)
    beta = coordinate_descent(A, c, lam, current.beta)
    b1 = update_locations(state, data, cfg, beta, current.b1)
    return beta, b1


def fit_penalized(
    data: PreparedData,
    cfg: QuantileConfig,
    n_components: int,
    lam: float,
    options: FitOptions | None = None,
) -> FitResult:
    """EM fit with the penalized positive update; ``n_parameters`` counts nonzero slopes only."""
    if lam < 0.0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return fit(data, cfg, n_components, options, lam=lam)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, tau: float) -> float:
    """Smallest value whose cumulative weight reaches tau of the total; minimizes sum w rho_tau(y - b)."""
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    index = min(int(np.searchsorted(cumulative, tau * cumulative[-1])), values.size - 1)
    return float(values[order][index])


def _exact_lambda_max(state: PosteriorState, data: PreparedData, cfg: QuantileConfig, sigma: float) -> float:
    """Zeroing threshold of the exact positive update.

    With beta = 0 each b1_k is a weighted tau-quantile. beta = 0 stays optimal
    while some subgradient psi of the check loss (tau above zero, tau - 1 below,
    anywhere between on a zero residual) balances every b1_k and keeps
    |sum w x_j psi| <= sigma * lam; the smallest such bound is a linear program.
    """
    W = state.w[data.pos_unit]
    obs, comp = np.nonzero(W > 0.0)
    w = W[obs, comp]
    n_rows = w.size
    G = W.shape[1]
    b1 = np.zeros(G)
    for k in np.unique(comp):
        b1[k] = weighted_quantile(data.y_pos, W[:, k], cfg.tau)
    r = data.y_pos[obs] - b1[comp]
    lower = np.where(r > 0.0, cfg.tau, cfg.tau - 1.0)
    upper = np.where(r < 0.0, cfg.tau - 1.0, cfg.tau)

    # Variables are psi (one per row) and the bound t
    gradient = sparse.csr_matrix(data.X_pos[obs] * w[:, None]).T
    ones = sparse.csr_matrix(np.ones((gradient.shape[0], 1)))
    A_ub = sparse.vstack([sparse.hstack([gradient, -ones]), sparse.hstack([-gradient, -ones])], format="csc")
    A_eq = sparse.hstack([sparse.csr_matrix((w, (comp, np.arange(n_rows))), shape=(G, n_rows)), sparse.csr_matrix((G, 1))], format="csc")
    cost = np.zeros(n_rows + 1)
    cost[-1] = 1.0
    bounds = list(zip(lower.tolist(), upper.tolist(), strict=True)) + [(0.0, None)]

    result = optimize.linprog(cost, A_ub=A_ub, b_ub=np.zeros(A_ub.shape[0]), A_eq=A_eq, b_eq=np.zeros(G), bounds=bounds, method="highs")
    if result.status != 0:
        raise NumericalError(f"lambda_max linear program failed: {result.message}")
    return float(result.fun) / sigma


def lambda_max(data: PreparedData, cfg: QuantileConfig, n_components: int, options: FitOptions | None = None) -> float:
    """Smallest lambda that zeroes every slope at the first M-step of the first start."""
    options = options or FitOptions()
    if data.X.shape[1] == 0:
        return 0.0
    start = options.start
    if start is None:
        start = initial_params(data, cfg, n_components, spawn_generators(options.seed, 1)[0])
    state = e_step(start, data, cfg)
    if options.positive_update == "exact":
        require_positive_weight(state, data)
        return _exact_lambda_max(state, data, cfg, start.sigma)
    _, c = _surrogate(state, data, cfg, start)
    return float(np.max(np.abs(c)))


def default_lambda_grid(lam_max: float, n_values: int = 50, ratio: float = 1e-3) -> list[float]:
    """``n_values`` log-spaced values from ratio * lam_max to lam_max, ascending."""
    if lam_max <= 0.0:
        return [0.0]
    return np.geomspace(ratio * lam_max, lam_max, n_values).tolist()


# =============================================================================
# Cross-validation
# =============================================================================


def _unit_folds(data: PreparedData, n_folds: int, seed: int) -> list[np.ndarray]:
    """Partition unit positions into folds whose held-out and training parts both contain positives."""
    if n_folds > data.n_units:
        raise DataValidationError(f"{n_folds} folds requested but only {data.n_units} units available")
    has_positive = np.bincount(data.pos_unit, minlength=data.n_units) > 0
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_FOLD_RESAMPLES):
        folds = np.array_split(rng.permutation(data.n_units), n_folds)
        bad = [i for i, fold in enumerate(folds) if not has_positive[fold].any() or has_positive.sum() == has_positive[fold].sum()]
        if not bad:
            return folds
        logger.warning("Fold %d has no positive observations on one side; resampling folds (attempt %d)", bad[0], attempt + 1)
    raise DataValidationError(f"could not build {n_folds} folds with positive observations after {MAX_FOLD_RESAMPLES} attempts")


def held_out_loss(params: MixtureParams, data: PreparedData, cfg: QuantileConfig) -> float:
    """Mean check loss of positive held-out outcomes around the population-averaged location."""
    mu = predict_location(params, data)[data.pos_rows]
    return float(np.mean(check_loss(data.y_pos - mu, cfg.tau)))


def _fold_losses(
    fold: np.ndarray,
    data: PreparedData,
    cfg: QuantileConfig,
    n_components: int,
    grid: list[float],
    options: FitOptions,
) -> list[float]:
    train = data.subset(np.setdiff1d(np.arange(data.n_units), fold))
    test = data.subset(fold)
    try:
        warm = fit(train, cfg, n_components, options).params
    except FitError as e:
        logger.warning("Unpenalized base fit failed on a fold: %s", e)
        return [float("nan")] * len(grid)

    losses = []
    for lam in grid:
        try:
            result = fit(train, cfg, n_components, options.model_copy(update={"start": warm, "n_starts": 1}), lam=lam)
        except FitError as e:
            logger.warning("Penalized fit failed on a fold at lambda=%.4g: %s", lam, e)
            losses.append(float("nan"))
            continue
        warm = result.params
        losses.append(held_out_loss(result.params, test, cfg))
    return losses


def cross_validate_lambda(
    data: PreparedData,
    cfg: QuantileConfig,
    n_components: int,
    pcfg: PenaltyConfig,
    options: FitOptions | None = None,
) -> tuple[float, list[CVRow]]:
    """K-fold cross-validation of the penalty over units.

    Each training split gets an unpenalized multi-start fit; the penalized path
    is then traced along the grid with warm starts. Held-out units are scored by
    their mean check loss around the population-averaged location.

    Returns:
        Tuple of (selected lambda, one CVRow per grid value in grid order).

    Raises:
        DataValidationError: Folds cannot be formed.
    """
    options = options or FitOptions()
    folds = _unit_folds(data, pcfg.n_folds, pcfg.fold_seed)
    grid = list(pcfg.lambda_grid)
    logger.info("Cross-validating %d lambda values over %d unit folds (tau=%g, G=%d)", len(grid), len(folds), cfg.tau, n_components)

    if options.n_workers > 1:
        inner = options.model_copy(update={"n_workers": 1})
        with ThreadPoolExecutor(max_workers=options.n_workers) as pool:
            per_fold = list(pool.map(lambda fold: _fold_losses(fold, data, cfg, n_components, grid, inner), folds))
    else:
        per_fold = [_fold_losses(fold, data, cfg, n_components, grid, options) for fold in folds]

    losses = np.array(per_fold)  # folds x lambdas
    rows = []
    for j, lam in enumerate(grid):
        column = losses[:, j]
        finite = column[np.isfinite(column)]
        mean = float(finite.mean()) if finite.size else float("inf")
        se = float(finite.std(ddof=1) / np.sqrt(finite.size)) if finite.size > 1 else 0.0
        rows.append(CVRow(lam=lam, mean_loss=mean, se=se, fold_losses=column.tolist()))

    means = np.array([row.mean_loss for row in rows])
    if not np.isfinite(means).any():
        raise FitError("every cross-validation fit failed", details=[f"lambda={lam}" for lam in grid])
    best = int(np.flatnonzero(means == means.min())[-1])
    if pcfg.one_se_rule:
        threshold = rows[best].mean_loss + rows[best].se
        best = int(np.flatnonzero(means <= threshold)[-1])
    rows[best].selected = True
    logger.info("Selected lambda=%.4g (mean held-out loss %.6f)", rows[best].lam, rows[best].mean_loss)
    return rows[best].lam, rows
