"""EM fitting of the two-part finite-mixture quantile regression.

One EM cycle is an E-step (posterior component weights and inverse latent
scales) followed by conditional updates in the order (beta, b1) -> (sigma, pi) ->
(gamma, b0), each using the freshest values. By default (beta, b1) is the exact
weighted quantile-regression solution; the closed-form update is backtracked
whenever it would raise the check loss. Every conditional update is
non-decreasing in the expected complete-data log-likelihood, so the observed
log-likelihood is monotone across cycles.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import log_expit, logit, logsumexp

from mixquant.core.al_math import al_log_density, check_loss, gig_inverse_moment
from mixquant.core.data import PreparedData
from mixquant.core.errors import FitError, NumericalError
from mixquant.core.models import (
    FitDiagnostics,
    FitOptions,
    FitResult,
    MixtureParams,
    PosteriorState,
    QuantileConfig,
    count_parameters,
    information_criteria,
)
from mixquant.core.mstep import exact_positive_step, m_step_binary, m_step_positive, m_step_scale_and_masses
from mixquant.core.seeding import spawn_generators

logger = logging.getLogger(__name__)

# Runs whose smallest mass drops below this are abandoned and reseeded
DEGENERATE_PI = 1e-4
# Relative slack when comparing the positive-part objective before and after an update
SAFEGUARD_SLACK = 1e-13
BACKTRACK_HALVINGS = 40


# =============================================================================
# Likelihood and E-step
# =============================================================================


def _sum_by_unit(values: np.ndarray, index: np.ndarray, n_units: int) -> np.ndarray:
    return np.column_stack([np.bincount(index, weights=values[:, k], minlength=n_units) for k in range(values.shape[1])])


def component_loglik(params: MixtureParams, data: PreparedData, cfg: QuantileConfig) -> np.ndarray:
    """log prod_t f_itk for every unit and component (N x G)."""
    eta = (data.S @ params.gamma)[:, None] + params.b0[None, :]
    d = data.d[:, None]
    rows = np.where(d, log_expit(eta), log_expit(-eta))
    mu = (data.X_pos @ params.beta)[:, None] + params.b1[None, :]
    rows[data.pos_rows] += al_log_density(data.y_pos[:, None], mu, params.sigma, cfg.tau)
    return _sum_by_unit(rows, data.unit_index, data.n_units)


def _log_joint(params: MixtureParams, data: PreparedData, cfg: QuantileConfig) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    return log_pi[None, :] + component_loglik(params, data, cfg)


def _unit_loglik(log_joint: np.ndarray) -> np.ndarray:
    per_unit = logsumexp(log_joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(per_unit))
    if bad.size:
        raise NumericalError("likelihood underflows for every component", unit=int(bad[0]))
    return per_unit


def observed_loglik(params: MixtureParams, data: PreparedData, cfg: QuantileConfig) -> float:
    """Observed-data log-likelihood sum_i log sum_k pi_k prod_t f_itk (log-sum-exp per unit)."""
    return float(_unit_loglik(_log_joint(params, data, cfg)).sum())


def e_step(params: MixtureParams, data: PreparedData, cfg: QuantileConfig) -> PosteriorState:
    """Posterior component weights and inverse latent scales.

    Weights are normalized in log space. The inverse scale depends on the
    component through b1_k, so it is stored per (positive observation, component).
    """
    log_joint = _log_joint(params, data, cfg)
    per_unit = _unit_loglik(log_joint)
    w = np.exp(log_joint - per_unit[:, None])
    w /= w.sum(axis=1, keepdims=True)

    residual = data.y_pos[:, None] - (data.X_pos @ params.beta)[:, None] - params.b1[None, :]
    v_inv = np.asarray(gig_inverse_moment(residual, params.sigma, cfg), dtype=float).reshape(residual.shape)
    return PosteriorState(w=w, v_inv=v_inv, loglik=float(per_unit.sum()))


# =============================================================================
# Fitted quantities
# =============================================================================


def predict_location(params: MixtureParams, data: PreparedData) -> np.ndarray:
    """Population-averaged tau-quantile location x'beta + sum_k pi_k b1_k for every observation."""
    return data.X @ params.beta + float(params.pi @ params.b1)


def map_components(state: PosteriorState) -> np.ndarray:
    """Maximum-a-posteriori component of every unit."""
    return np.argmax(state.w, axis=1)


def zero_probability(params: MixtureParams, data: PreparedData) -> np.ndarray:
    """Model-implied Pr(y = 0) per observation, averaged over components."""
    eta = (data.S @ params.gamma)[:, None] + params.b0[None, :]
    return np.exp(log_expit(eta)) @ params.pi


def positive_objective(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    beta: np.ndarray,
    b1: np.ndarray,
    sigma: float,
    lam: float = 0.0,
) -> float:
    """Weighted check loss of the positive part divided by sigma, plus lam * ||beta||_1."""
    W = state.w[data.pos_unit]
    r = data.y_pos[:, None] - (data.X_pos @ beta)[:, None] - b1[None, :]
    return float((W * check_loss(r, cfg.tau)).sum() / sigma + lam * np.abs(beta).sum())


# =============================================================================
# Initialization
# =============================================================================


def initial_params(data: PreparedData, cfg: QuantileConfig, n_components: int, rng: np.random.Generator) -> MixtureParams:
    """Data-driven start.

    Units are split into G groups by k-means on their mean log-positive outcome;
    b1 starts at each group's tau-quantile, b0 at the logit of its zero rate,
    gamma and beta at zero, sigma at the empirical check-loss scale, pi uniform.
    """
    n = data.n_units
    counts = np.bincount(data.pos_unit, minlength=n)
    sums = np.bincount(data.pos_unit, weights=data.y_pos, minlength=n)
    overall = float(data.y_pos.mean())
    unit_mean = np.where(counts > 0, sums / np.maximum(counts, 1), overall)

    if n_components == 1:
        labels = np.zeros(n, dtype=int)
    else:
        jitter = 1e-9 * rng.standard_normal(n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, labels = kmeans2((unit_mean + jitter)[:, None], n_components, minit="++", seed=rng)

    b1 = np.empty(n_components)
    b0 = np.empty(n_components)
    label_of_row = labels[data.unit_index]
    label_of_pos = labels[data.pos_unit]
    for k in range(n_components):
        group_pos = data.y_pos[label_of_pos == k]
        if group_pos.size:
            b1[k] = np.quantile(group_pos, cfg.tau)
        else:
            b1[k] = np.quantile(data.y_pos, rng.uniform(0.05, 0.95))
        rows = label_of_row == k
        zero_rate = data.d[rows].mean() if rows.any() else data.d.mean()
        b0[k] = logit(np.clip(zero_rate, 0.02, 0.98))

    sigma = float(np.mean(check_loss(data.y_pos - b1[label_of_pos], cfg.tau)))
    return MixtureParams(
        gamma=np.zeros(data.S.shape[1]),
        beta=np.zeros(data.X.shape[1]),
        sigma=max(sigma, 1e-3),
        b0=b0,
        b1=b1,
        pi=np.full(n_components, 1.0 / n_components),
    )


# =============================================================================
# EM loop
# =============================================================================


@dataclass
class _Run:
    params: MixtureParams
    trace: list[float]
    objective: list[float]
    status: str
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _positive_step(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    params: MixtureParams,
    options: FitOptions,
    lam: float | None,
    diagnostics: FitDiagnostics,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """(beta, b1) update that never raises the penalized weighted check loss.

    Returns:
        Tuple of (beta, b1, settled); settled is False after a partial
        backtracked step, which cannot be used to judge convergence.
    """
    penalty = lam or 0.0

    def loss(beta: np.ndarray, b1: np.ndarray) -> float:
        return positive_objective(state, data, cfg, beta, b1, params.sigma, penalty)

    before = loss(params.beta, params.b1)
    slack = SAFEGUARD_SLACK * max(1.0, abs(before))
    if options.positive_update == "exact":
        beta, b1 = exact_positive_step(state, data, cfg, params, penalty)
        # Solver tolerance can leave an optimum marginally worse than the current pair
        if loss(beta, b1) > before + slack:
            return params.beta, params.b1, True
        return beta, b1, True

    if lam is None:
        beta, b1 = m_step_positive(state, data, cfg, params, diagnostics)
    else:
        from mixquant.core.penalized import penalized_m_step_positive

        beta, b1 = penalized_m_step_positive(state, data, cfg, params, lam, diagnostics)
    if loss(beta, b1) <= before + slack:
        return beta, b1, True

    # The residual clamp broke tangency; halve the step along old -> new
    diagnostics.safeguard_rejections += 1
    diagnostics.note("closed-form positive update raised the check loss; backtracking")
    t = 0.5
    for _ in range(BACKTRACK_HALVINGS):
        cand_beta = params.beta + t * (beta - params.beta)
        cand_b1 = params.b1 + t * (b1 - params.b1)
        if loss(cand_beta, cand_b1) < before - slack:
            return cand_beta, cand_b1, False
        t *= 0.5
    logger.debug("Backtracking found no descent; solving the positive part exactly")
    beta, b1 = exact_positive_step(state, data, cfg, params, penalty)
    if loss(beta, b1) > before + slack:
        return params.beta, params.b1, True
    return beta, b1, True


def _m_step(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    params: MixtureParams,
    options: FitOptions,
    lam: float | None,
    diagnostics: FitDiagnostics,
) -> tuple[MixtureParams, bool]:
    beta, b1, settled = _positive_step(state, data, cfg, params, options, lam, diagnostics)
    sigma, pi = m_step_scale_and_masses(state, data, cfg, beta, b1, diagnostics)
    gamma, b0 = m_step_binary(state, data, params, options.max_irls_iter, diagnostics)
    return MixtureParams(gamma=gamma, beta=beta, sigma=sigma, b0=b0, b1=b1, pi=pi), settled


def run_em(
    data: PreparedData,
    cfg: QuantileConfig,
    start: MixtureParams,
    options: FitOptions,
    lam: float | None = None,
) -> _Run:
    """Iterate EM cycles from ``start`` until the objective changes by less than ``options.tol``.

    A cycle that took a partial backtracked positive step never counts as converged.
    """
    diagnostics = FitDiagnostics()
    penalty = lam or 0.0
    params = start
    state = e_step(params, data, cfg)
    trace = [state.loglik]
    objective = [state.loglik - penalty * float(np.abs(params.beta).sum())]
    for _ in range(options.max_iter):
        params, settled = _m_step(state, data, cfg, params, options, lam, diagnostics)
        if params.pi.min() < DEGENERATE_PI:
            return _Run(params, trace, objective, "degenerate", diagnostics)
        state = e_step(params, data, cfg)
        trace.append(state.loglik)
        objective.append(state.loglik - penalty * float(np.abs(params.beta).sum()))
        if settled and abs(objective[-1] - objective[-2]) < options.tol:
            return _Run(params, trace, objective, "converged", diagnostics)
    return _Run(params, trace, objective, "max_iter", diagnostics)


def _run_start(
    index: int,
    rng: np.random.Generator,
    data: PreparedData,
    cfg: QuantileConfig,
    n_components: int,
    options: FitOptions,
    lam: float | None,
) -> _Run:
    restarts = 0
    while True:
        start = options.start if options.start is not None else initial_params(data, cfg, n_components, rng)
        try:
            run = run_em(data, cfg, start, options, lam)
        except NumericalError as e:
            logger.warning("Start %d failed: %s", index, e)
            return _Run(start, [], [], f"numerical: {e}")
        run.diagnostics.degenerate_restarts = restarts
        if run.status != "degenerate" or options.start is not None or restarts >= options.max_degenerate_restarts:
            break
        restarts += 1
        logger.info("Start %d degenerated (pi < %.0e); reseeding (%d/%d)", index, DEGENERATE_PI, restarts, options.max_degenerate_restarts)
    if run.status == "degenerate":
        logger.info("Start %d keeps degenerating; the data may support fewer components", index)
    logger.debug("Start %d: %s after %d cycles, loglik %.6f", index, run.status, len(run.trace) - 1, run.trace[-1])
    return run


def fit(
    data: PreparedData,
    cfg: QuantileConfig,
    n_components: int,
    options: FitOptions | None = None,
    *,
    lam: float | None = None,
) -> FitResult:
    """Multi-start EM fit with G components.

    Args:
        data: Prepared panel.
        cfg: Quantile level.
        n_components: Number of mixture components G >= 1.
        options: EM controls; a warm start in ``options.start`` replaces the data-driven starts.
        lam: LASSO penalty on beta; None fits the unpenalized model.

    Returns:
        The best converged run, components sorted by b1.

    Raises:
        FitError: No start converged.
    """
    if n_components < 1:
        raise ValueError("the number of components must be at least 1")
    if data.n_obs == 0:
        raise ValueError("cannot fit an empty dataset")
    options = options or FitOptions()
    n_starts = 1 if (options.start is not None or n_components == 1) else options.n_starts
    generators = spawn_generators(options.seed, n_starts)

    def job(i: int) -> _Run:
        return _run_start(i, generators[i], data, cfg, n_components, options, lam)

    if options.n_workers > 1 and n_starts > 1:
        with ThreadPoolExecutor(max_workers=options.n_workers) as pool:
            runs = list(pool.map(job, range(n_starts)))
    else:
        runs = [job(i) for i in range(n_starts)]

    converged = [i for i, run in enumerate(runs) if run.converged]
    if not converged:
        raise FitError(
            f"none of {n_starts} EM starts converged (tau={cfg.tau}, G={n_components})",
            traces=[run.trace for run in runs],
            details=[run.status for run in runs],
        )
    best_index = max(converged, key=lambda i: (runs[i].objective[-1], -i))
    best = runs[best_index]
    best.diagnostics.degenerate_restarts = sum(run.diagnostics.degenerate_restarts for run in runs)

    params = best.params.canonical()
    n_parameters = count_parameters(params, nonzero_beta_only=lam is not None)
    aic, bic = information_criteria(best.trace[-1], n_parameters, data.n_units)
    logger.info(
        "Fit tau=%g G=%d: loglik %.4f after %d cycles (start %d of %d, %d converged)",
        cfg.tau, n_components, best.trace[-1], len(best.trace) - 1, best_index, n_starts, len(converged),
    )
    return FitResult(
        params=params,
        loglik_trace=best.trace,
        n_iterations=len(best.trace) - 1,
        converged=True,
        n_parameters=n_parameters,
        aic=aic,
        bic=bic,
        tau=cfg.tau,
        n_units=data.n_units,
        lam=lam,
        start_index=best_index,
        diagnostics=best.diagnostics,
        objective_trace=best.objective,
    )
