"""Diffusion noise schedules.

Arrays are stored with a leading entry for ``t = 0`` (``beta = 0``,
``alpha_bar = 1``) so that ``schedule.alpha_bar[t]`` uses the same 1-based
step index as the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    snr: np.ndarray
    p2_weight: np.ndarray
    k: float
    gamma_p2: float
    beta_start: float | None = None
    beta_end: float | None = None

    def check_t(self, t, lo: int = 1) -> None:
        t_arr = np.asarray(t)
        if t_arr.size and (t_arr.min() < lo or t_arr.max() > self.T):
            raise IndexError(f"time step {t!r} outside [{lo}, {self.T}]")

    def params(self) -> dict:
        """Parameters needed to rebuild this schedule (linear schedules only)."""
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "p2_k": self.k, "p2_gamma": self.gamma_p2}


def schedule_from_betas(betas, k: float = 1.0, gamma_p2: float = 1.0, *,
                        validate: bool = True) -> NoiseSchedule:
    """Build all derived arrays from per-step ``betas`` (t = 1..T).

    ``validate=False`` admits the degenerate endpoints 0 and 1, which are
    useful for exercising limiting behaviour.
    """
    betas = np.asarray(betas, dtype=np.float64).reshape(-1)
    if betas.size < 1:
        raise ConfigError("schedule needs at least one step")
    if validate:
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        if k < 0 or gamma_p2 < 0:
            raise ConfigError("P2 hyperparameters k and gamma must be non-negative")
    T = betas.size
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = alpha_bar / (1.0 - alpha_bar)
        post = np.zeros(T + 1)
        post[2:] = beta[2:] * (1.0 - alpha_bar[1:-1]) / (1.0 - alpha_bar[2:])
        weight = 1.0 / (k + snr) ** gamma_p2
    snr[0] = np.inf
    weight[0] = 0.0 if gamma_p2 > 0 else 1.0
    for arr in (beta, alpha, alpha_bar, post, snr, weight):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=post,
                         snr=snr, p2_weight=weight, k=float(k), gamma_p2=float(gamma_p2))


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                          k: float = 1.0, gamma_p2: float = 1.0) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    s = schedule_from_betas(np.linspace(beta_start, beta_end, T), k, gamma_p2)
    object.__setattr__(s, "beta_start", float(beta_start))
    object.__setattr__(s, "beta_end", float(beta_end))
    return s


def p2_weight(s: NoiseSchedule, t):
    """``1 / (k + SNR(t))**gamma`` for scalar or array ``t``."""
    s.check_t(t)
    w = s.p2_weight[np.asarray(t)]
    return float(w) if np.ndim(w) == 0 else w


def posterior_mean_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """Weights of ``x_t`` and ``x_0`` in the mean of q(x_{t-1} | x_t, x_0)."""
    s.check_t(t, lo=2)
    a, ab, ab_prev = s.alpha[t], s.alpha_bar[t], s.alpha_bar[t - 1]
    coef_xt = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    coef_x0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
    return float(coef_xt), float(coef_x0)


def posterior_variance(s: NoiseSchedule, t: int) -> float:
    s.check_t(t, lo=2)
    return float(s.posterior_var[t])
