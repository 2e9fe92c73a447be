"""Diffusion noise schedule.

All per-step and cumulative coefficients are precomputed in float64 at
construction. Arrays are stored with a leading boundary entry so that
index t addresses step t directly and index 0 holds the analytic limits
(alpha_bar_0 = 1, beta_bar_0 = beta_tilde_0 = beta_gap_0 = 0).
"""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import ConfigurationError

LINEAR = "linear"
CLOSED_FORM_ATOL = 1e-10


@dataclass(frozen=True)
class CoefficientBundle:
    """Coefficients at step t and at t-1."""
    t: int
    beta: float
    alpha: float
    alpha_bar: float
    beta_bar: float
    beta_tilde: float
    alpha_bar_prev: float
    beta_bar_prev: float
    beta_tilde_prev: float
    beta_gap: float
    beta_gap_prev: float


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str = LINEAR
    beta: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)
    alpha_bar: np.ndarray = field(repr=False, default=None)
    alpha_tilde: np.ndarray = field(repr=False, default=None)
    alpha_hat: np.ndarray = field(repr=False, default=None)
    beta_bar: np.ndarray = field(repr=False, default=None)
    beta_tilde: np.ndarray = field(repr=False, default=None)
    beta_gap: np.ndarray = field(repr=False, default=None)

    def params(self) -> Dict:
        """Constructor arguments, the only schedule data written to checkpoints."""
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def at(self, t: int) -> CoefficientBundle:
        return coefficients_at(self, t)


def _check_bounds(T: int, beta_start: float, beta_end: float) -> None:
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be an integer >= 1, got {T}")
    if not beta_start > 0:
        raise ConfigurationError(f"beta_start must be > 0, got {beta_start}")
    if not beta_end < 1:
        raise ConfigurationError(f"beta_end must be < 1, got {beta_end}")
    if not beta_start <= beta_end:
        raise ConfigurationError(f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})")


def schedule_from_betas(betas, kind: str = "custom", beta_start=None, beta_end=None) -> NoiseSchedule:
    """
    Build a schedule from an explicit beta sequence.

    Args:
        betas: per-step noise scales, each in (0, 1)
    Returns:
        NoiseSchedule with every cumulative coefficient filled in
    """
    beta = np.asarray(betas, dtype=np.float64).reshape(-1)
    if beta.size < 1:
        raise ConfigurationError("schedule needs at least one step")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigurationError("every beta must lie strictly inside (0, 1)")
    T = beta.size
    alpha = 1.0 - beta

    # index 0 is the boundary; alpha[0] is never read by the recurrences
    beta_full = np.concatenate(([0.0], beta))
    alpha_full = np.concatenate(([1.0], alpha))
    alpha_bar = np.ones(T + 1)
    alpha_tilde = np.zeros(T + 1)
    alpha_hat = np.zeros(T + 1)
    beta_bar = np.zeros(T + 1)
    beta_tilde = np.zeros(T + 1)
    beta_gap = np.zeros(T + 1)
    # beta_bar, beta_tilde and beta_gap = beta_bar - beta_tilde are differences of
    # close numbers; their recurrences only add positive terms
    for t in range(1, T + 1):
        a, b = alpha_full[t], beta_full[t]
        alpha_bar[t] = alpha_bar[t - 1] * a
        alpha_tilde[t] = a * (1.0 + alpha_tilde[t - 1])
        alpha_hat[t] = a * a + a * alpha_hat[t - 1]
        beta_bar[t] = a * beta_bar[t - 1] + b
        beta_tilde[t] = a * (beta_tilde[t - 1] + b)
        beta_gap[t] = a * beta_gap[t - 1] + b * b

    schedule = NoiseSchedule(
        T=T,
        beta_start=float(beta[0]) if beta_start is None else float(beta_start),
        beta_end=float(beta[-1]) if beta_end is None else float(beta_end),
        kind=kind,
        beta=beta_full,
        alpha=alpha_full,
        alpha_bar=alpha_bar,
        alpha_tilde=alpha_tilde,
        alpha_hat=alpha_hat,
        beta_bar=beta_bar,
        beta_tilde=beta_tilde,
        beta_gap=beta_gap,
    )
    _assert_invariants(schedule)
    for arr in (beta_full, alpha_full, alpha_bar, alpha_tilde, alpha_hat, beta_bar, beta_tilde, beta_gap):
        arr.setflags(write=False)
    return schedule


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta ramp from beta_start at t=1 to beta_end at t=T."""
    _check_bounds(T, beta_start, beta_end)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return schedule_from_betas(betas, kind=LINEAR, beta_start=beta_start, beta_end=beta_end)


def build_schedule(kind: str, T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if kind != LINEAR:
        raise ConfigurationError(f"unknown schedule kind '{kind}'")
    return build_linear_schedule(T, beta_start, beta_end)


def _assert_invariants(s: NoiseSchedule) -> None:
    t = slice(1, s.T + 1)
    if not (np.all(s.alpha[t] > 0) and np.all(s.alpha[t] < 1)):
        raise ConfigurationError("alpha_t must lie in (0, 1)")
    if not np.all(np.diff(s.alpha_bar) < 0):
        raise ConfigurationError("alpha_bar must be strictly decreasing")
    # beta_bar saturates at 1.0 once alpha_bar drops below float64 resolution
    if not np.all(np.diff(s.beta_bar) >= 0):
        raise ConfigurationError("beta_bar must be non-decreasing")
    if not np.all(s.beta_tilde[t] > 0):
        raise ConfigurationError("beta_tilde must be positive at every step")
    if not np.all(s.beta_gap[t] > 0):
        raise ConfigurationError("beta_bar - beta_tilde must be positive at every step")
    closed_forms = {
        "beta_bar": (s.beta_bar, 1.0 - s.alpha_bar),
        "beta_tilde": (s.beta_tilde, s.alpha_tilde - s.alpha_hat),
        "beta_gap": (s.beta_gap, s.beta_bar - s.beta_tilde),
    }
    for name, (accumulated, closed) in closed_forms.items():
        if not np.allclose(accumulated, closed, rtol=0, atol=CLOSED_FORM_ATOL):
            raise ConfigurationError(f"{name} recurrence disagrees with its closed form")


def coefficients_at(s: NoiseSchedule, t: int) -> CoefficientBundle:
    if not 1 <= t <= s.T:
        raise IndexError(f"step {t} outside [1, {s.T}]")
    return CoefficientBundle(
        t=t,
        beta=float(s.beta[t]),
        alpha=float(s.alpha[t]),
        alpha_bar=float(s.alpha_bar[t]),
        beta_bar=float(s.beta_bar[t]),
        beta_tilde=float(s.beta_tilde[t]),
        alpha_bar_prev=float(s.alpha_bar[t - 1]),
        beta_bar_prev=float(s.beta_bar[t - 1]),
        beta_tilde_prev=float(s.beta_tilde[t - 1]),
        beta_gap=float(s.beta_gap[t]),
        beta_gap_prev=float(s.beta_gap[t - 1]),
    )
