"""Positive-part, scale and IRLS M-step updates for the two-part mixture.

The default positive-part update minimizes the weighted check loss exactly as a
linear program. The closed-form alternative uses the modified weighted
least-squares expressions obtained from the Normal-Exponential representation
of the AL density. The binary part is a weighted logistic regression on a
design expanded with one indicator column per component.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg
from scipy import optimize, sparse
from scipy.special import expit, log_expit

from mixquant.core.al_math import check_loss
from mixquant.core.errors import NumericalError

if TYPE_CHECKING:
    from mixquant.core.data import PreparedData
    from mixquant.core.models import FitDiagnostics, MixtureParams, PosteriorState, QuantileConfig

logger = logging.getLogger(__name__)

RIDGE_JITTER = 1e-8
GRAM_COND_LIMIT = 1e12
LOGIT_CAP = 15.0
SIGMA_FLOOR = 1e-8
IRLS_GRAD_TOL = 1e-8
# Components with less total posterior weight are not identified by the data
MIN_COMPONENT_MASS = 1e-10
# Penalized slopes smaller than this after the linear program are exact zeros
ZERO_SLOPE_TOL = 1e-10


def solve_gram(A: np.ndarray, rhs: np.ndarray, what: str, diagnostics: FitDiagnostics | None = None) -> np.ndarray:
    """Solve a weighted normal-equation system, adding ridge jitter when it is singular."""
    if A.size == 0:
        return np.zeros(0)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
        logger.warning("Weighted Gram matrix for %s is singular (condition %.3g); covariates may be collinear. Adding ridge %.0e", what, cond, RIDGE_JITTER)
        A = A + RIDGE_JITTER * np.eye(A.shape[0])
        if diagnostics is not None:
            diagnostics.ridge_jitter += 1
            diagnostics.note(f"ridge jitter applied to {what} (condition {cond:.3g})")
    return scipy.linalg.solve(A, rhs, assume_a="sym")


def positive_weights(state: PosteriorState, data: PreparedData) -> np.ndarray:
    """Posterior weight of each positive observation's unit, per component (n_pos x G)."""
    return state.w[data.pos_unit]


def beta_normal_equations(
    state: PosteriorState, data: PreparedData, cfg: QuantileConfig, b1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gram matrix and right-hand side of the beta update with locations held at ``b1``.

    A = sum w v x x',  rhs = sum w (v x (y - b1_k) - theta x).
    """
    W = positive_weights(state, data)
    WV = W * state.v_inv
    X = data.X_pos
    a = WV.sum(axis=1)
    u = (WV * (data.y_pos[:, None] - b1[None, :])).sum(axis=1) - cfg.theta * W.sum(axis=1)
    return X.T @ (a[:, None] * X), X.T @ u


def update_locations(
    state: PosteriorState, data: PreparedData, cfg: QuantileConfig, beta: np.ndarray, current_b1: np.ndarray
) -> np.ndarray:
    """Scalar closed-form update of every b1_k given ``beta``.

    Components without weighted positive observations keep their current location.
    """
    W = positive_weights(state, data)
    WV = W * state.v_inv
    r = data.y_pos - data.X_pos @ beta
    num = (WV * r[:, None]).sum(axis=0) - cfg.theta * W.sum(axis=0)
    den = WV.sum(axis=0)
    safe = den > 0.0
    return np.where(safe, num / np.where(safe, den, 1.0), current_b1)


def require_positive_weight(state: PosteriorState, data: PreparedData) -> None:
    if data.pos_rows.size == 0 or positive_weights(state, data).sum() <= 0.0:
        raise NumericalError("no positive observations carry posterior weight")


def m_step_positive(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    current: MixtureParams,
    diagnostics: FitDiagnostics | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (beta, b1) update.

    beta is solved with the current locations, then each b1_k with the fresh beta.

    Returns:
        Tuple of (beta, b1).
    """
    require_positive_weight(state, data)
    A, rhs = beta_normal_equations(state, data, cfg, current.b1)
    beta = solve_gram(A, rhs, "beta", diagnostics)
    b1 = update_locations(state, data, cfg, beta, current.b1)
    return beta, b1


def exact_positive_step(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    current: MixtureParams,
    lam: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint (beta, b1) minimizer of sum w rho_tau(r) / sigma + lam ||beta||_1.

    Each positive observation enters once per component with weight w_ik, as a
    weighted quantile regression with one intercept per component. The residual
    is split into its positive and negative parts, and under a penalty beta is
    split the same way with cost sigma * lam on both halves. Components without
    posterior weight keep their current location.

    Returns:
        Tuple of (beta, b1).

    Raises:
        NumericalError: No positive weight, or the solver did not reach an optimum.
    """
    require_positive_weight(state, data)
    W = positive_weights(state, data)
    G = W.shape[1]
    p = data.X_pos.shape[1]
    obs, comp = np.nonzero(W > 0.0)
    w = W[obs, comp]
    n_rows = w.size
    active = W.sum(axis=0) > MIN_COMPONENT_MASS

    X = sparse.csr_matrix(data.X_pos[obs])
    blocks = [X, -X] if lam > 0.0 else [X]
    n_beta = len(blocks) * p
    blocks.append(sparse.csr_matrix((np.ones(n_rows), (np.arange(n_rows), comp)), shape=(n_rows, G)))
    eye = sparse.identity(n_rows, format="csr")
    blocks += [eye, -eye]
    A_eq = sparse.hstack([block for block in blocks if block.shape[1] > 0], format="csc")

    cost = np.concatenate([np.full(n_beta, current.sigma * lam), np.zeros(G), cfg.tau * w, (1.0 - cfg.tau) * w])
    beta_bounds = [(0.0, None)] * n_beta if lam > 0.0 else [(None, None)] * n_beta
    b1_bounds = [(None, None) if active[k] else (float(current.b1[k]), float(current.b1[k])) for k in range(G)]
    bounds = beta_bounds + b1_bounds + [(0.0, None)] * (2 * n_rows)

    result = optimize.linprog(cost, A_eq=A_eq, b_eq=data.y_pos[obs], bounds=bounds, method="highs")
    if result.status != 0:
        raise NumericalError(f"positive-part linear program failed: {result.message}")
    logger.debug("Positive-part linear program: %d rows, %d iterations", n_rows, result.nit)

    x = result.x
    if lam > 0.0:
        beta = x[:p] - x[p:n_beta]
        beta[np.abs(beta) < ZERO_SLOPE_TOL] = 0.0
    else:
        beta = x[:p].copy()
    b1 = np.where(active, x[n_beta : n_beta + G], current.b1)
    return beta, b1


def _binary_objective(S: np.ndarray, d: np.ndarray, Wrow: np.ndarray, gamma: np.ndarray, b0: np.ndarray) -> float:
    eta = (S @ gamma)[:, None] + b0[None, :]
    ll = d[:, None] * log_expit(eta) + (1.0 - d)[:, None] * log_expit(-eta)
    return float((Wrow * ll).sum())


def m_step_binary(
    state: PosteriorState,
    data: PreparedData,
    current: MixtureParams,
    max_iter: int = 100,
    diagnostics: FitDiagnostics | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted IRLS for (gamma, b0) on the component-expanded logistic design.

    Each observation appears once per component with weight w_ik; the design is
    [s_it, e_k]. Newton steps use step-halving so the weighted Bernoulli
    log-likelihood never decreases, and |b0_k| is capped at 15.

    Returns:
        Tuple of (gamma, b0).
    """
    S = data.S
    d = data.d.astype(float)
    Wrow = state.w[data.unit_index]
    m = S.shape[1]

    active = state.w.sum(axis=0) > MIN_COMPONENT_MASS
    gamma = current.gamma.copy()
    b0 = np.clip(current.b0, -LOGIT_CAP, LOGIT_CAP)
    if diagnostics is not None:
        for k in np.flatnonzero(~active):
            if int(k) not in diagnostics.unidentified_components:
                diagnostics.unidentified_components.append(int(k))
                diagnostics.note(f"component {k} has no posterior weight; its logit location is held at {b0[k]:.3f}")

    capped = False
    objective = _binary_objective(S, d, Wrow, gamma, b0)
    for _ in range(max_iter):
        eta = (S @ gamma)[:, None] + b0[None, :]
        p = expit(eta)
        resid = Wrow * (d[:, None] - p)
        curv = Wrow * p * (1.0 - p)

        grad = np.concatenate([S.T @ resid.sum(axis=1), resid.sum(axis=0)[active]])
        if np.linalg.norm(grad) < IRLS_GRAD_TOL:
            break
        H = np.zeros((grad.size, grad.size))
        H[:m, :m] = S.T @ (curv.sum(axis=1)[:, None] * S)
        H[:m, m:] = (S.T @ curv)[:, active]
        H[m:, :m] = H[:m, m:].T
        H[m:, m:] = np.diag(curv.sum(axis=0)[active])
        step = solve_gram(H, grad, "logit design", diagnostics)

        t = 1.0
        accepted = False
        for _ in range(40):
            cand_gamma = gamma + t * step[:m]
            cand_b0 = b0.copy()
            cand_b0[active] = np.clip(b0[active] + t * step[m:], -LOGIT_CAP, LOGIT_CAP)
            cand_obj = _binary_objective(S, d, Wrow, cand_gamma, cand_b0)
            if cand_obj >= objective:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        change = max(np.max(np.abs(cand_gamma - gamma), initial=0.0), np.max(np.abs(cand_b0 - b0)))
        gamma, b0, objective = cand_gamma, cand_b0, cand_obj
        if np.any(np.abs(b0[active]) >= LOGIT_CAP):
            capped = True
        if change < 1e-12:
            break

    if capped:
        logger.debug("Logit locations capped at +/-%.0f (quasi-separation)", LOGIT_CAP)
        # Recorded once per fit; the cap binds again on every later cycle
        if diagnostics is not None and diagnostics.irls_capped == 0:
            diagnostics.irls_capped = 1
            diagnostics.note("logit location capped at +/-15 (quasi-separation)")
    return gamma, b0


def m_step_scale_and_masses(
    state: PosteriorState,
    data: PreparedData,
    cfg: QuantileConfig,
    beta: np.ndarray,
    b1: np.ndarray,
    diagnostics: FitDiagnostics | None = None,
) -> tuple[float, np.ndarray]:
    """Update the AL scale and the component masses.

    pi_k is the average posterior weight; sigma is the weighted mean check loss
    of the positive residuals, clamped below at 1e-8.

    Returns:
        Tuple of (sigma, pi).
    """
    pi = state.w.mean(axis=0)
    pi = pi / pi.sum()
    if data.pos_rows.size == 0:
        raise NumericalError("no positive observations; the AL scale is undefined")

    W = positive_weights(state, data)
    r = data.y_pos[:, None] - (data.X_pos @ beta)[:, None] - b1[None, :]
    sigma = float((W * check_loss(r, cfg.tau)).sum() / W.sum())
    if sigma < SIGMA_FLOOR:
        logger.debug("AL scale %.3g clamped to %.0e", sigma, SIGMA_FLOOR)
        sigma = SIGMA_FLOOR
        if diagnostics is not None:
            diagnostics.sigma_clamped += 1
            diagnostics.note("AL scale clamped at 1e-8 (residuals vanish)")
    return sigma, pi
