"""
ampost - Diffusion Schedule

Variance-preserving SDE with a linear rate beta(t):

    dx = -1/2 beta(t) x dt + sqrt(beta(t)) dw
    p(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I),  alpha_t^2 + sigma_t^2 = 1

``sigma_t`` is the kernel standard deviation; ``beta`` always means the rate.
Times may be scalars or one time per batch row.
"""

import math
from dataclasses import dataclass
from typing import Any, Mapping, Tuple, Union

import numpy as np

from .errors import ScheduleError
from .tensorcore import Tensor, TensorLike, as_tensor

Time = Union[float, np.ndarray]

_TIME_SLACK = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Linear-rate VP-SDE schedule.

    Attributes:
        beta_min: Rate at t = 0
        beta_max: Rate at t = T
        T: Time horizon
        eps_min: Smallest usable time
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    eps_min: float = 1e-3

    def __post_init__(self) -> None:
        if self.beta_min <= 0 or self.beta_max <= 0:
            raise ScheduleError("beta(t) must be positive on (0, T]")
        if not 0 < self.eps_min < self.T:
            raise ScheduleError(f"need 0 < eps_min < T, got eps_min={self.eps_min}, T={self.T}")

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "NoiseSchedule":
        return cls(
            beta_min=float(config["sde.beta_min"]),
            beta_max=float(config["sde.beta_max"]),
            T=float(config["sde.T"]),
            eps_min=float(config["sde.eps_min"]),
        )

    def beta(self, t: Time) -> Time:
        """Instantaneous rate beta(t)."""
        return self.beta_min + np.asarray(t) * (self.beta_max - self.beta_min) / self.T

    def integrated_beta(self, t: Time) -> Time:
        """Closed-form integral of beta from 0 to t."""
        t = np.asarray(t, dtype=np.float64)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.T

    def check_time(self, t: Time) -> None:
        t = np.asarray(t)
        if np.any(t < self.eps_min - _TIME_SLACK) or np.any(t > self.T + _TIME_SLACK):
            raise ScheduleError(f"time outside [{self.eps_min}, {self.T}]: {t.min()}..{t.max()}")

    def sample_times(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform times on [eps_min, T]."""
        return rng.uniform(self.eps_min, self.T, size=n)


def alpha_beta(sched: NoiseSchedule, t: Time) -> Tuple[Time, Time]:
    """
    Perturbation-kernel coefficients at time ``t``.

    Returns:
        (alpha_t, sigma_t) with alpha_t = exp(-1/2 int_0^t beta) and
        sigma_t = sqrt(1 - alpha_t^2).
    """
    sched.check_time(t)
    integral = sched.integrated_beta(t)
    alpha = np.exp(-0.5 * integral)
    sigma = np.sqrt(-np.expm1(-integral))
    if np.ndim(alpha) == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def column(coef: Time, x: Tensor) -> Union[float, np.ndarray]:
    """Shape a per-row coefficient so it broadcasts against batched ``x``."""
    if np.ndim(coef) == 0:
        return float(coef)
    coef = np.asarray(coef, dtype=np.float64)
    if x.ndim == 1:
        raise ScheduleError("per-row times need a batched (2-D) tensor")
    return coef.reshape(-1, 1)


def perturb(sched: NoiseSchedule, x0: TensorLike, t: Time, noise: TensorLike) -> Tuple[Tensor, Tensor]:
    """
    Sample the kernel at ``t`` with the given standard-normal ``noise``.

    Args:
        sched: Noise schedule
        x0: Clean signal(s); gradients flow through it
        t: Time, scalar or one per row
        noise: Standard-normal draw, same shape as ``x0``

    Returns:
        (x_t, kernel score) where x_t = alpha_t x0 + sigma_t noise and the
        kernel score grad log p(x_t | x0) = -noise / sigma_t.
    """
    x0 = as_tensor(x0)
    noise = as_tensor(noise)
    if noise.shape != x0.shape:
        raise ScheduleError(f"noise shape {noise.shape} != signal shape {x0.shape}")
    alpha, sigma = alpha_beta(sched, t)
    a, s = column(alpha, x0), column(sigma, x0)
    x_t = x0 * a + noise.data * s
    return x_t, Tensor(-noise.data / s)


def drift_diffusion(sched: NoiseSchedule, x: TensorLike, t: Time) -> Tuple[Tensor, Time]:
    """Forward-SDE drift f = -1/2 beta(t) x and diffusion g = sqrt(beta(t))."""
    x = as_tensor(x)
    sched.check_time(t)
    rate = sched.beta(t)
    f = x * column(-0.5 * np.asarray(rate), x)
    g = np.sqrt(rate)
    return f, (float(g) if np.ndim(g) == 0 else g)


def tweedie_denoise(sched: NoiseSchedule, x_t: TensorLike, t: Time, score: TensorLike) -> Tensor:
    """
    Posterior-mean estimate of x0 from x_t and the score at (x_t, t).

    Returns:
        (x_t + sigma_t^2 score) / alpha_t

    Raises:
        ScheduleError: If alpha_t < 1e-8 (the estimate is numerically degenerate).
    """
    x_t = as_tensor(x_t)
    score = as_tensor(score)
    if score.shape != x_t.shape:
        raise ScheduleError(f"score shape {score.shape} != x_t shape {x_t.shape}")
    alpha, sigma = alpha_beta(sched, t)
    if np.min(alpha) < 1e-8:
        raise ScheduleError(f"alpha_t={np.min(alpha):.3e} too small for Tweedie denoising")
    var = column(np.square(sigma), x_t)
    inv_alpha = column(1.0 / np.asarray(alpha), x_t)
    return (x_t + score * var) * inv_alpha


def kernel_log_norm(d: int) -> float:
    """Log normalizer of a d-dimensional standard normal."""
    return -0.5 * d * math.log(2.0 * math.pi)
