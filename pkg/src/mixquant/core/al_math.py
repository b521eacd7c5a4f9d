"""Asymmetric-Laplace and check-loss mathematics.

Everything here is a pure function of its inputs and is vectorized over numpy
arrays. The sampler takes an explicit seed or ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike

from mixquant.core.models import QuantileConfig

# Lower clamp on |residual| before dividing in the GIG inverse moment
RESIDUAL_EPS = 1e-6


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")


def check_loss(u: ArrayLike, tau: float) -> np.ndarray | float:
    """Quantile loss rho_tau(u) = u (tau - 1{u < 0}).

    Args:
        u: Residual(s).
        tau: Quantile level in (0, 1).

    Returns:
        Nonnegative loss with the shape of ``u`` (a float for scalar input).
    """
    _check_tau(tau)
    arr = np.asarray(u, dtype=float)
    loss = arr * (tau - (arr < 0.0))
    return float(loss) if loss.ndim == 0 else loss


def al_log_density(y: ArrayLike, mu: ArrayLike, sigma: float, tau: float) -> np.ndarray | float:
    """Log density of AL(mu, sigma, tau): log[tau (1 - tau) / sigma] - rho_tau((y - mu) / sigma)."""
    _check_tau(tau)
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = (np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)) / sigma
    out = np.log(tau * (1.0 - tau) / sigma) - z * (tau - (z < 0.0))
    return float(out) if np.ndim(out) == 0 else out


def gig_inverse_moment(residual: ArrayLike, sigma: float, cfg: QuantileConfig) -> np.ndarray | float:
    """E[1/v | residual] under the GIG conditional of the latent scale.

    The conditional is GIG(1/2, r^2 / (rho^2 sigma), (theta^2 + 2 rho^2) / (rho^2 sigma));
    its inverse moment is sqrt(theta^2 + 2 rho^2) / |r| and does not depend on sigma.
    |r| is clamped below at ``RESIDUAL_EPS``.
    """
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    abs_r = np.maximum(np.abs(np.asarray(residual, dtype=float)), RESIDUAL_EPS)
    out = cfg.gig_root / abs_r
    return float(out) if np.ndim(out) == 0 else out


def sample_al(
    mu: ArrayLike,
    sigma: float,
    tau: float,
    rng: np.random.Generator | int | None = None,
    size: int | tuple[int, ...] | None = None,
) -> np.ndarray | float:
    """Draw from AL(mu, sigma, tau) through its Normal-Exponential composition.

    v ~ Exponential(mean sigma), z ~ N(0, 1), y = mu + theta v + sqrt(rho^2 sigma v) z.

    Args:
        mu: Location(s); broadcast against ``size``.
        sigma: Scale; ``0`` returns ``mu`` exactly (degenerate limit).
        tau: Quantile level.
        rng: Seed or generator.
        size: Output shape; defaults to the shape of ``mu``.
    """
    _check_tau(tau)
    if sigma < 0.0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    cfg = QuantileConfig(tau=tau)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    loc = np.asarray(mu, dtype=float)
    shape = loc.shape if size is None else size
    if sigma == 0.0:
        out = np.broadcast_to(loc, shape).astype(float)
    else:
        v = gen.exponential(scale=sigma, size=shape)
        z = gen.standard_normal(size=shape)
        out = loc + cfg.theta * v + np.sqrt(cfg.rho2 * sigma * v) * z
    return float(out) if np.ndim(out) == 0 else out
