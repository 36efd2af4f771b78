"""
ampost - Diffusion Samplers

Iterative baselines and oracles built on a score model:

- ``reverse_sde_sample``: Euler-Maruyama on the reverse-time SDE
  (or the Euler probability-flow ODE when ``probability_flow`` is set)
- ``dps_sample``: reverse SDE plus a measurement-residual guidance step
  through the Tweedie estimate
- ``pf_ode_sample`` / ``pf_ode_loglik``: the probability-flow ODE solved with
  ``scipy.integrate.solve_ivp``, the latter carrying exact divergences
- ``elbo_full``: Monte-Carlo estimate of the likelihood lower bound
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .diffusion import NoiseSchedule, alpha_beta, drift_diffusion, kernel_log_norm, perturb, tweedie_denoise
from .errors import ConfigError, NonFiniteError, ShapeError, SolverError
from .operators import ForwardOperator, Measurement
from .score import ScoreModel
from .tensorcore import Tensor, TensorLike, as_tensor, backward

logger = logging.getLogger(__name__)

INTEGRATORS = ("euler_maruyama",)
MAX_DIVERGENCE_DIM = 16


@dataclass
class SamplerConfig:
    """
    Settings of the iterative samplers.

    Attributes:
        steps: Number of uniform time steps from T down to eps_min
        zeta: DPS guidance step size
        integrator: Reverse-SDE integrator
        ode_tol: Relative and absolute tolerance of the ODE solver
        probability_flow: Integrate the deterministic probability-flow ODE instead of the SDE
    """

    steps: int = 1000
    zeta: float = 1.0
    integrator: str = "euler_maruyama"
    ode_tol: float = 1e-5
    probability_flow: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"sampler.steps must be >= 1, got {self.steps}")
        if self.zeta < 0:
            raise ConfigError(f"sampler.zeta must be >= 0, got {self.zeta}")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator '{self.integrator}' (known: {', '.join(INTEGRATORS)})")

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "SamplerConfig":
        return cls(
            steps=int(config["sampler.steps"]),
            zeta=float(config["sampler.zeta"]),
            integrator=str(config["sampler.integrator"]),
            ode_tol=float(config["sampler.ode_tol"]),
            probability_flow=bool(config["sampler.probability_flow"]),
        )


@dataclass
class SampleResult:
    """
    Samples with their cost.

    Attributes:
        samples: (n, d) array
        nfe: Score evaluations per sample
        wall_time: Seconds for the whole batch
    """

    samples: np.ndarray
    nfe: int
    wall_time: float = 0.0


def _score_dim(score: ScoreModel, dim: Optional[int]) -> int:
    dim = dim if dim is not None else getattr(score, "dim", None)
    if dim is None:
        raise ShapeError("pass dim for score models without a 'dim' attribute")
    return int(dim)


def _time_grid(sched: NoiseSchedule, steps: int) -> np.ndarray:
    return np.linspace(sched.T, sched.eps_min, steps + 1)


def _reverse_step(sched: NoiseSchedule, x: np.ndarray, score: np.ndarray, t: float, dt: float,
                  rng: np.random.Generator, probability_flow: bool) -> np.ndarray:
    f, g = drift_diffusion(sched, x, t)
    if probability_flow:
        return x - (f.data - 0.5 * g * g * score) * dt
    drift = f.data - g * g * score
    return x - drift * dt + g * math.sqrt(dt) * rng.standard_normal(x.shape)


def _check_state(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"sampler state became non-finite at step {step}")


def reverse_sde_sample(score: ScoreModel, sched: NoiseSchedule, cfg: SamplerConfig, rng: np.random.Generator,
                       n: int = 1, dim: Optional[int] = None) -> SampleResult:
    """
    Unconditional samples by integrating the reverse-time SDE from x_T ~ N(0, I).

    Args:
        score: Score model
        sched: Noise schedule
        cfg: Sampler settings (``steps``, ``probability_flow``)
        rng: Generator for x_T and the Brownian increments
        n: Number of chains
        dim: Data dimension (defaults to ``score.dim``)

    Returns:
        SampleResult with the states at eps_min and NFE = steps.

    Raises:
        NonFiniteError: If a state becomes non-finite.
    """
    dim = _score_dim(score, dim)
    start = time.perf_counter()
    grid = _time_grid(sched, cfg.steps)
    x = rng.standard_normal((n, dim))
    for k in range(cfg.steps):
        t, dt = grid[k], grid[k] - grid[k + 1]
        s = score(Tensor(x), t).data
        x = _reverse_step(sched, x, s, t, dt, rng, cfg.probability_flow)
        _check_state(x, k)
    return SampleResult(samples=x, nfe=cfg.steps, wall_time=time.perf_counter() - start)


def dps_sample(score: ScoreModel, sched: NoiseSchedule, measurement: Measurement, cfg: SamplerConfig,
               rng: np.random.Generator, n: int = 1, op: Optional[ForwardOperator] = None) -> SampleResult:
    """
    Posterior samples by reverse diffusion with residual guidance.

    Each step takes the unconditional reverse update, then moves along
    -zeta * grad_x ||y - A(x0_hat(x))||^2 with x0_hat the Tweedie estimate;
    the gradient passes through the score model's input.

    Args:
        score: Score model
        sched: Noise schedule
        measurement: Observation y (its operator is used unless ``op`` is given)
        cfg: Sampler settings (``steps``, ``zeta``)
        rng: Generator; with zeta = 0 the draws match ``reverse_sde_sample``
        n: Number of chains
        op: Forward operator override

    Returns:
        SampleResult with NFE = steps.
    """
    op = op or measurement.require_op()
    dim = op.dim
    y = measurement.y
    start = time.perf_counter()
    grid = _time_grid(sched, cfg.steps)
    x = rng.standard_normal((n, dim))
    for k in range(cfg.steps):
        t, dt = grid[k], grid[k] - grid[k + 1]
        x_leaf = Tensor(x, requires_grad=True, name="x")
        s = score(x_leaf, t)
        x0_hat = tweedie_denoise(sched, x_leaf, t, s)
        residual = (y - op.apply(x0_hat)).square().sum()
        guidance = backward(residual)["x"].data
        x = _reverse_step(sched, x, s.data, t, dt, rng, cfg.probability_flow)
        if cfg.zeta:
            x = x - cfg.zeta * guidance
        _check_state(x, k)
    return SampleResult(samples=x, nfe=cfg.steps, wall_time=time.perf_counter() - start)


def _divergence(score: ScoreModel, x: np.ndarray, t: float) -> Tuple[np.ndarray, float]:
    """Score at x and its exact divergence from one backward pass over d copies of x."""
    d = x.size
    tiled = Tensor(np.tile(x, (d, 1)), requires_grad=True, name="x")
    s = score(tiled, t)
    jac = backward((s * np.eye(d)).sum())["x"].data
    return s.data[0], float(np.trace(jac))


def _pf_drift(sched: NoiseSchedule, x: np.ndarray, t: float, s: np.ndarray) -> np.ndarray:
    rate = float(sched.beta(t))
    return -0.5 * rate * x - 0.5 * rate * s


def pf_ode_loglik(score: ScoreModel, sched: NoiseSchedule, x0: TensorLike, ode_tol: float = 1e-5) -> float:
    """
    Exact log-density of ``x0`` under the probability-flow ODE of ``score``.

    Integrates x and the divergence of the drift h = f - 1/2 g^2 s from
    eps_min to T with RK45, then log p(x0) = log N(x_T; 0, I) + int div h dt.

    Raises:
        ShapeError: If d > 16.
        SolverError: If the solver fails.
    """
    x0 = as_tensor(x0).data.reshape(-1)
    d = x0.size
    if d > MAX_DIVERGENCE_DIM:
        raise ShapeError(f"exact divergence is limited to d <= {MAX_DIVERGENCE_DIM}, got {d}")

    def rhs(t: float, state: np.ndarray) -> np.ndarray:
        x = state[:d]
        s, div_s = _divergence(score, x, t)
        rate = float(sched.beta(t))
        div_h = -0.5 * rate * d - 0.5 * rate * div_s
        return np.concatenate([_pf_drift(sched, x, t, s), [div_h]])

    sol = solve_ivp(rhs, (sched.eps_min, sched.T), np.concatenate([x0, [0.0]]), method="RK45",
                    rtol=ode_tol, atol=ode_tol)
    if not sol.success:
        raise SolverError(f"probability-flow ODE failed: {sol.message}")
    x_T, integral = sol.y[:d, -1], sol.y[d, -1]
    prior = kernel_log_norm(d) - 0.5 * float(x_T @ x_T)
    logger.debug("pf-ode loglik: %d rhs evaluations", sol.nfev)
    return prior + float(integral)


def pf_ode_sample(score: ScoreModel, sched: NoiseSchedule, cfg: SamplerConfig, rng: np.random.Generator,
                  n: int = 1, dim: Optional[int] = None) -> SampleResult:
    """Deterministic samples from the probability-flow ODE, integrated from T to eps_min."""
    dim = _score_dim(score, dim)
    start = time.perf_counter()
    x_T = rng.standard_normal((n, dim))

    def rhs(t: float, state: np.ndarray) -> np.ndarray:
        x = state.reshape(n, dim)
        s = score(Tensor(x), t).data
        return _pf_drift(sched, x, t, s).reshape(-1)

    sol = solve_ivp(rhs, (sched.T, sched.eps_min), x_T.reshape(-1), method="RK45",
                    rtol=cfg.ode_tol, atol=cfg.ode_tol)
    if not sol.success:
        raise SolverError(f"probability-flow ODE failed: {sol.message}")
    return SampleResult(samples=sol.y[:, -1].reshape(n, dim), nfe=int(sol.nfev),
                        wall_time=time.perf_counter() - start)


def elbo_full(score: ScoreModel, sched: NoiseSchedule, x0: TensorLike, n: int,
              rng: np.random.Generator) -> Tuple[float, float]:
    """
    Monte-Carlo estimate of the full likelihood lower bound at ``x0``.

        E log N(x_T; 0, I) - 1/2 int g^2 E[ ||s - k||^2 - ||k||^2 + d ] dt

    with k = grad log p(x_t | x0); the ``+ d`` is -(2/g^2) div f of the VP drift.
    The terminal expectation is closed-form; the integral uses ``n`` draws of (t, eps).

    Returns:
        (estimate, standard error)

    Raises:
        ConfigError: If ``n`` < 2, which leaves the standard error undefined.
    """
    if n < 2:
        raise ConfigError(f"the ELBO estimate needs at least 2 draws, got {n}")
    x0 = as_tensor(x0).data.reshape(-1)
    d = x0.size
    alpha_T, sigma_T = alpha_beta(sched, sched.T)
    terminal = kernel_log_norm(d) - 0.5 * (alpha_T * alpha_T * float(x0 @ x0) + sigma_T * sigma_T * d)
    t = sched.sample_times(rng, n)
    noise = rng.standard_normal((n, d))
    x_t, kernel = perturb(sched, np.tile(x0, (n, 1)), t, noise)
    s = score(x_t, t).data
    k = kernel.data
    bracket = np.sum((s - k) ** 2, axis=1) - np.sum(k * k, axis=1) + d
    draws = (sched.T - sched.eps_min) * 0.5 * sched.beta(t) * bracket
    return terminal - float(draws.mean()), float(draws.std(ddof=1) / math.sqrt(n))
