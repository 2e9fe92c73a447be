"""Closed-form diffusion mathematics.

Everything here is elementwise over (time step, feature) cells and pure.
`t` is either a python int or an integer array whose shape matches the
leading (batch) axis of the data; coefficients are broadcast accordingly.
The uncertainty terms are:

    g      endpoint variance g_psi(X)
    s0     local variance of the target, sigma_Y0
    σ_t    one-step forward variance
    σ̄_t    marginal forward variance given Y0
    σ̃      reverse posterior variance
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from .data import VARIANCE_FLOOR
from .errors import ConfigurationError, NsDiffError, SolverError
from .estimators import EndpointPrior
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

Step = Union[int, np.ndarray]


class VariantMode(str, Enum):
    FULL = "full_nsdiff"
    NO_UANS = "no_uans"
    NO_LSNM = "no_lsnm"


def parse_variant(name) -> VariantMode:
    try:
        return VariantMode(name)
    except ValueError:
        raise ConfigurationError(
            f"unknown variant '{name}', expected one of {[m.value for m in VariantMode]}"
        ) from None


@dataclass(frozen=True)
class ForwardStep:
    """q(Y_t | Y_{t-1}) = N(scale * Y_{t-1} + shift, variance)."""
    scale: np.ndarray
    shift: np.ndarray
    variance: np.ndarray

    def mean(self, y_prev: np.ndarray) -> np.ndarray:
        return self.scale * y_prev + self.shift

    def sample(self, y_prev: np.ndarray, noise: np.ndarray) -> np.ndarray:
        return self.mean(y_prev) + np.sqrt(self.variance) * noise


@dataclass(frozen=True)
class PosteriorParams:
    gamma0: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    mu_tilde: np.ndarray
    sigma_tilde: np.ndarray


@dataclass(frozen=True)
class LossValue:
    loss: float
    noise_term: float
    variance_term: float
    grad_eta_theta: np.ndarray
    grad_sigma_theta: np.ndarray


def _coef(array: np.ndarray, t: Step, ndim: int):
    """Index a schedule array at t and shape it to broadcast over data of rank ndim."""
    if np.isscalar(t) or np.ndim(t) == 0:
        return array[int(t)]
    t = np.asarray(t)
    return array[t].reshape(t.shape + (1,) * max(ndim - t.ndim, 0))


def _prev(t: Step) -> Step:
    return t - 1 if np.ndim(t) == 0 else np.asarray(t) - 1


def _check_step(s: NoiseSchedule, t: Step, low: int = 1) -> None:
    lo, hi = int(np.min(t)), int(np.max(t))
    if lo < low or hi > s.T:
        raise ConfigurationError(f"step index out of range [{low}, {s.T}]: got [{lo}, {hi}]")


def _check_positive(name: str, value) -> None:
    if np.any(np.asarray(value) <= 0):
        raise ConfigurationError(f"{name} must be strictly positive")


def endpoint_variance(mode: VariantMode, g: np.ndarray) -> np.ndarray:
    """Variance of the endpoint N(f, ·): g_psi(X), or unit variance without the LSNM endpoint."""
    return np.ones_like(g) if mode == VariantMode.NO_LSNM else g


def variant_forward_variance(mode: VariantMode, s: NoiseSchedule, t: Step,
                             g: np.ndarray, sigma_y0: np.ndarray) -> np.ndarray:
    """One-step forward variance σ_t under the selected variant."""
    mode = parse_variant(mode)
    _check_step(s, t)
    g = np.asarray(g, dtype=np.float64)
    beta = _coef(s.beta, t, g.ndim)
    if mode == VariantMode.NO_LSNM:
        return beta * np.ones_like(g)
    _check_positive("g_psi(X)", g)
    if mode == VariantMode.NO_UANS:
        return beta * g
    _check_positive("sigma_Y0", sigma_y0)
    alpha = _coef(s.alpha, t, g.ndim)
    return beta * beta * g + alpha * beta * np.asarray(sigma_y0, dtype=np.float64)


def marginal_variance(s: NoiseSchedule, t: Step, g: np.ndarray, sigma_y0: np.ndarray,
                      mode: VariantMode = VariantMode.FULL) -> np.ndarray:
    """σ̄_t = (β̄_t − β̃_t) g + β̃_t s0; zero at t = 0."""
    mode = parse_variant(mode)
    _check_step(s, t, low=0)
    g = np.asarray(g, dtype=np.float64)
    beta_bar = _coef(s.beta_bar, t, g.ndim)
    if mode == VariantMode.NO_LSNM:
        return beta_bar * np.ones_like(g)
    if mode == VariantMode.NO_UANS:
        return beta_bar * g
    beta_tilde = _coef(s.beta_tilde, t, g.ndim)
    return _coef(s.beta_gap, t, g.ndim) * g + beta_tilde * np.asarray(sigma_y0, dtype=np.float64)


def forward_step_params(s: NoiseSchedule, t: Step, prior: EndpointPrior, sigma_y0: np.ndarray,
                        mode: VariantMode = VariantMode.FULL) -> ForwardStep:
    """Uncertainty-aware forward transition from Y_{t-1} to Y_t."""
    mean = np.asarray(prior.mean, dtype=np.float64)
    sqrt_alpha = np.sqrt(_coef(s.alpha, t, mean.ndim))
    variance = variant_forward_variance(mode, s, t, prior.variance, sigma_y0)
    scale = sqrt_alpha * np.ones_like(mean)
    return ForwardStep(scale=scale, shift=(1.0 - sqrt_alpha) * mean, variance=variance)


def forward_marginal(s: NoiseSchedule, t: Step, y0: np.ndarray, prior: EndpointPrior,
                     sigma_y0: np.ndarray, noise: np.ndarray,
                     mode: VariantMode = VariantMode.FULL) -> np.ndarray:
    """Y_t = √ᾱ_t Y0 + (1 − √ᾱ_t) f + √σ̄_t η."""
    _check_step(s, t)
    y0 = np.asarray(y0, dtype=np.float64)
    sigma_bar = marginal_variance(s, t, prior.variance, sigma_y0, mode)
    if np.any(sigma_bar <= 0):
        raise NsDiffError(f"non-positive marginal variance at step {int(np.min(t))}")
    sqrt_ab = np.sqrt(_coef(s.alpha_bar, t, y0.ndim))
    return sqrt_ab * y0 + (1.0 - sqrt_ab) * prior.mean + np.sqrt(sigma_bar) * noise


def posterior_params(s: NoiseSchedule, t: Step, y_t: np.ndarray, y0: np.ndarray,
                     prior: EndpointPrior, sigma_y0: np.ndarray,
                     mode: VariantMode = VariantMode.FULL) -> PosteriorParams:
    """
    Gaussian posterior q(Y_{t-1} | Y_t, Y0).

    γ2 is taken as 1 − γ0 − γ1, which equals the fully expanded closed form
    and keeps the three weights summing to one. At t = 1, σ̄_0 = 0 so the
    posterior collapses onto Y0 (γ0 = 1, σ̃ = 0).
    """
    _check_step(s, t)
    y_t = np.asarray(y_t, dtype=np.float64)
    ndim = y_t.ndim
    sigma_t = variant_forward_variance(mode, s, t, prior.variance, sigma_y0)
    sigma_bar_prev = marginal_variance(s, _prev(t),
                                       prior.variance, sigma_y0, mode)
    alpha = _coef(s.alpha, t, ndim)
    alpha_bar_prev = _coef(s.alpha_bar, _prev(t), ndim)

    delta = alpha * sigma_bar_prev + sigma_t
    gamma0 = np.sqrt(alpha_bar_prev) * sigma_t / delta
    gamma1 = np.sqrt(alpha) * sigma_bar_prev / delta
    gamma2 = 1.0 - gamma0 - gamma1
    mu = gamma0 * y0 + gamma1 * y_t + gamma2 * prior.mean
    sigma_tilde = sigma_t * sigma_bar_prev / delta
    return PosteriorParams(gamma0=gamma0, gamma1=gamma1, gamma2=gamma2, mu_tilde=mu, sigma_tilde=sigma_tilde)


def nsdiff_loss(eta: np.ndarray, eta_theta: np.ndarray, sigma_tilde: np.ndarray,
                sigma_theta: np.ndarray, variance_mask: Optional[np.ndarray] = None) -> LossValue:
    """
    Noise-matching KL objective averaged over the leading (batch) axis.

    Per sample: Σ(η − η_θ)² + Σ(σ̃/σ_θ − log(σ̃/σ_θ)). Rows whose
    `variance_mask` is False contribute only the noise term.
    """
    eta = np.asarray(eta, dtype=np.float64)
    sigma_tilde = np.asarray(sigma_tilde, dtype=np.float64)
    sigma_theta = np.asarray(sigma_theta, dtype=np.float64)
    B = eta.shape[0] if eta.ndim > 0 else 1
    if variance_mask is None:
        mask = np.ones_like(sigma_tilde)
    else:
        mask = np.broadcast_to(
            np.asarray(variance_mask, dtype=np.float64).reshape(
                np.shape(variance_mask) + (1,) * (sigma_tilde.ndim - np.ndim(variance_mask))),
            sigma_tilde.shape)
    live = mask > 0
    if np.any(sigma_theta[live] <= 0) or np.any(sigma_tilde[live] <= 0):
        raise ConfigurationError("loss variances must be strictly positive")

    diff = eta - eta_theta
    noise_term = float(np.sum(diff * diff)) / B
    ratio = np.where(live, sigma_tilde / np.where(live, sigma_theta, 1.0), 1.0)
    variance_term = float(np.sum(mask * (ratio - np.log(ratio)))) / B

    grad_eta_theta = -2.0 * diff / B
    grad_sigma_theta = mask * (1.0 - ratio) / np.where(live, sigma_theta, 1.0) / B
    return LossValue(
        loss=noise_term + variance_term,
        noise_term=noise_term,
        variance_term=variance_term,
        grad_eta_theta=grad_eta_theta,
        grad_sigma_theta=grad_sigma_theta,
    )


def sigma_quadratic(s: NoiseSchedule, t: Step, g: np.ndarray, sigma_theta: np.ndarray):
    """Coefficients (λ0, λ1, λ2) of λ0 s0² + λ1 s0 + λ2 = 0 obtained by setting σ̃ = σ_θ."""
    g = np.asarray(g, dtype=np.float64)
    sigma_theta = np.asarray(sigma_theta, dtype=np.float64)
    ndim = max(g.ndim, sigma_theta.ndim)
    prev = _prev(t)
    alpha = _coef(s.alpha, t, ndim)
    beta = _coef(s.beta, t, ndim)
    bt_prev = _coef(s.beta_tilde, prev, ndim)
    gap_prev = _coef(s.beta_gap, prev, ndim)

    lambda0 = alpha * beta * bt_prev * np.ones_like(g)
    lambda1 = (beta * beta * bt_prev + alpha * beta * gap_prev) * g - sigma_theta * alpha * (bt_prev + beta)
    lambda2 = g * g * beta * beta * gap_prev - sigma_theta * g * (alpha * gap_prev + beta * beta)
    return lambda0, lambda1, lambda2


def solvability_bound(s: NoiseSchedule, t: Step, sigma_theta: np.ndarray) -> np.ndarray:
    """Largest g for which λ2 < 0, i.e. the quadratic has exactly one positive root."""
    sigma_theta = np.asarray(sigma_theta, dtype=np.float64)
    prev = _prev(t)
    alpha = _coef(s.alpha, t, sigma_theta.ndim)
    beta = _coef(s.beta, t, sigma_theta.ndim)
    gap_prev = _coef(s.beta_gap, prev, sigma_theta.ndim)
    return sigma_theta * (alpha / (beta * beta) + 1.0 / gap_prev)


def solve_sigma_y0(s: NoiseSchedule, t: Step, g: np.ndarray, sigma_theta: np.ndarray,
                   floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """
    Recover σ_Y0 from a predicted posterior variance.

    Uses the positive root of the quadratic in the cancellation-free form.
    Cells where λ2 >= 0 fall back to g (the perfect-estimator assumption).

    Args:
        s: noise schedule
        t: step index, >= 2
        g: endpoint variance g_psi(X)
        sigma_theta: predicted posterior variance
    Returns:
        Estimated σ_Y0, clamped below at `floor`
    """
    _check_step(s, t, low=2)
    _check_positive("g_psi(X)", g)
    _check_positive("sigma_theta", sigma_theta)
    g = np.asarray(g, dtype=np.float64)
    lambda0, lambda1, lambda2 = sigma_quadratic(s, t, g, sigma_theta)

    fallback = lambda2 >= 0
    disc = lambda1 * lambda1 - 4.0 * lambda0 * lambda2
    bad = (disc < 0) & ~fallback
    if np.any(bad):
        i = np.flatnonzero(bad.reshape(-1))[0]
        raise SolverError(
            f"negative discriminant at step {t}",
            int(np.max(t)),
            float(np.broadcast_to(lambda0, bad.shape).reshape(-1)[i]),
            float(np.broadcast_to(lambda1, bad.shape).reshape(-1)[i]),
            float(np.broadcast_to(lambda2, bad.shape).reshape(-1)[i]),
        )
    root_disc = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        plus = (-lambda1 + root_disc) / (2.0 * lambda0)
        vieta = -2.0 * lambda2 / (lambda1 + root_disc)
    root = np.where(lambda1 <= 0, plus, vieta)

    if np.any(fallback):
        log.warning(f"step {t}: quadratic not solvable in {int(np.count_nonzero(fallback))} cells, using g_psi(X)")
        root = np.where(fallback, g, root)
    return np.maximum(root, floor)


def reconstruct_y0(s: NoiseSchedule, t: Step, y_t: np.ndarray, prior: EndpointPrior,
                   sigma_y0: np.ndarray, eta_theta: np.ndarray,
                   mode: VariantMode = VariantMode.FULL) -> np.ndarray:
    """Invert the forward marginal for Y0 given a noise estimate."""
    y_t = np.asarray(y_t, dtype=np.float64)
    sqrt_ab = np.sqrt(_coef(s.alpha_bar, t, y_t.ndim))
    sigma_bar = marginal_variance(s, t, prior.variance, sigma_y0, mode)
    return (y_t - (1.0 - sqrt_ab) * prior.mean - np.sqrt(sigma_bar) * eta_theta) / sqrt_ab


def perfect_estimator_posterior_variance(s: NoiseSchedule, t: Step, g: np.ndarray,
                                         floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """σ̃ under s0 = g: β_t β̄_{t-1} / β̄_t · g. Used as the reference scale of σ_θ."""
    g = np.asarray(g, dtype=np.float64)
    prev = _prev(t)
    ratio = _coef(s.beta, t, g.ndim) * _coef(s.beta_bar, prev, g.ndim) / _coef(s.beta_bar, t, g.ndim)
    return np.maximum(ratio * g, floor)
