"""
ampost - Prior Distillation

The amortized variational objective and the loop that fits a conditional
flow against a frozen score prior. For a measurement y and a latent z the
flow proposes x0 = G(z, y); the cost is

    fidelity   ||y - A(x0)||^2 / (2 sigma_y^2)
    prior      (T - eps_min)/2 g(t)^2 ||s(x_t, t) + eps/sigma_t||^2  (+ terminal term)
    entropy    log N(z; 0, I) - log|det dG/dz|

all three minimized together. Ground truth is never seen.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .diffusion import NoiseSchedule, alpha_beta, perturb
from .errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from .flow import ConditionalFlow, condition_vector, flow_forward, save_flow
from .operators import ForwardOperator, Measurement, MeasurementSet, apply_batch
from .score import ScoreModel
from .tensorcore import Tensor, TensorLike, adam_step, as_tensor, backward, clip_grad_norm, gaussian_logpdf

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")


@dataclass
class DistillConfig:
    """
    Settings of the distillation objective and its optimizer.

    Attributes:
        sigma_y: Noise std for the fidelity term when a measurement does not carry one
        n_t_samples: Monte-Carlo time samples per item and step
        include_terminal_term: Add the closed-form -E log pi(x_T) term
        score_jacobian: Differentiate through the score network's input
        clip_norm: Global gradient-norm clip (0 disables)
        lr_schedule: ``constant`` or ``cosine`` (decay from ``lr`` to ``lr_final``)
    """

    sigma_y: float = 0.1
    n_t_samples: int = 1
    lr: float = 1e-5
    batch: int = 64
    iterations: int = 10000
    lr_schedule: str = "constant"
    lr_final: float = 0.0
    include_terminal_term: bool = True
    score_jacobian: bool = True
    clip_norm: float = 100.0
    log_every: int = 100
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.sigma_y <= 0:
            raise ConfigError(f"distill.sigma_y must be positive, got {self.sigma_y}")
        if self.n_t_samples < 1:
            raise ConfigError(f"distill.n_t_samples must be >= 1, got {self.n_t_samples}")
        if self.batch < 1:
            raise ConfigError(f"distill.batch must be >= 1, got {self.batch}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown distill.lr_schedule '{self.lr_schedule}'")

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "DistillConfig":
        return cls(
            sigma_y=float(config["distill.sigma_y"]),
            n_t_samples=int(config["distill.n_t_samples"]),
            lr=float(config["distill.lr"]),
            batch=int(config["distill.batch"]),
            iterations=int(config["distill.iterations"]),
            lr_schedule=str(config["distill.lr_schedule"]),
            lr_final=float(config["distill.lr_final"]),
            include_terminal_term=bool(config["distill.include_terminal_term"]),
            score_jacobian=bool(config["distill.score_jacobian"]),
            clip_norm=float(config["distill.clip_norm"]),
            log_every=int(config["distill.log_every"]),
            checkpoint_every=int(config["distill.checkpoint_every"]),
            beta1=float(config["adam.beta1"]),
            beta2=float(config["adam.beta2"]),
            eps=float(config["adam.eps"]),
        )

    def learning_rate(self, step: int) -> float:
        """Step size for 1-based ``step``."""
        if self.lr_schedule == "constant" or self.iterations <= 1:
            return self.lr
        progress = min(1.0, (step - 1) / (self.iterations - 1))
        return float(self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + np.cos(np.pi * progress)))


@dataclass
class LossBreakdown:
    """The three cost terms of one step; ``total`` is their sum."""

    fidelity: float
    prior: float
    entropy: float
    total: float = field(init=False, default=0.0)
    step: int = 0
    grad_norm: float = 0.0

    def __post_init__(self) -> None:
        self.total = self.fidelity + self.prior + self.entropy


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def fidelity_loss(x_hat: TensorLike, y: TensorLike, op: ForwardOperator, sigma_y: float) -> Tensor:
    """
    Gaussian data misfit ||y - A(x_hat)||^2 / (2 sigma_y^2).

    Raises:
        ShapeError: If A(x_hat) and y differ in shape.
    """
    predicted = op.apply(x_hat)
    y = as_tensor(y)
    if predicted.shape != y.shape:
        raise ShapeError(f"A(x) has shape {predicted.shape}, y has {y.shape}")
    return (y - predicted).square().sum() * (0.5 / (sigma_y * sigma_y))


def _rows(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 1:
        return x.reshape(1, x.shape[0]), True
    return x, False


def prior_terms(x_hat: Tensor, score: ScoreModel, sched: NoiseSchedule, rng: np.random.Generator,
                n_t_samples: int = 1, include_terminal_term: bool = True, score_jacobian: bool = True) -> Tensor:
    """
    Per-row Monte-Carlo estimate of the surrogate prior cost.

    Args:
        x_hat: Proposed signals, (batch, d), carrying gradients
        score: Frozen score model
        sched: Noise schedule
        rng: Generator for t and eps
        n_t_samples: Time samples per row
        include_terminal_term: Add 1/2 alpha_T^2 ||x_hat||^2
        score_jacobian: When False the gradient through the score network's
            Jacobian is dropped; the value is unchanged

    Returns:
        (batch,) tensor.
    """
    rows = x_hat.shape[0]
    width = 0.5 * (sched.T - sched.eps_min)
    total: Optional[Tensor] = None
    for _ in range(n_t_samples):
        t = sched.sample_times(rng, rows)
        noise = rng.standard_normal(x_hat.shape)
        x_t, kernel_score = perturb(sched, x_hat, t, noise)
        weight = width * sched.beta(t)
        if score_jacobian:
            residual = score(x_t, t) - kernel_score
            term = residual.square().sum(axis=1) * weight
        else:
            residual = score(x_t.detach(), t).data - kernel_score.data
            alpha, sigma = alpha_beta(sched, t)
            # gradient of the noise-prediction form with the network Jacobian taken as identity
            coef = (-2.0 * weight * alpha / sigma)[:, None] * residual
            value = np.sum(residual * residual, axis=1) * weight
            term = (x_hat * coef).sum(axis=1) - np.sum(x_hat.data * coef, axis=1) + value
        total = term if total is None else total + term
    prior = total * (1.0 / n_t_samples)
    if include_terminal_term:
        alpha_T, _ = alpha_beta(sched, sched.T)
        prior = prior + x_hat.square().sum(axis=1) * (0.5 * alpha_T * alpha_T)
    return prior


def elbo_prior_loss(x_hat: TensorLike, score: ScoreModel, sched: NoiseSchedule, rng: np.random.Generator,
                    cfg: Optional[DistillConfig] = None) -> Tensor:
    """
    Surrogate prior cost of one signal (negated ELBO with constants dropped).

    Gradients reach ``x_hat`` through the perturbed point and through the
    score network's input; the score parameters stay frozen.
    """
    cfg = cfg or DistillConfig()
    x, single = _rows(as_tensor(x_hat))
    terms = prior_terms(x, score, sched, rng, cfg.n_t_samples, cfg.include_terminal_term, cfg.score_jacobian)
    return terms.sum() if single else terms.mean()


def entropy_loss(z: TensorLike, logdet: TensorLike) -> Tensor:
    """log N(z; 0, I) - logdet; per row for batched ``z``."""
    return gaussian_logpdf(z) - as_tensor(logdet)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class DistillBatch:
    """Stacked conditions, observations and operators of a measurement batch."""

    conditions: np.ndarray
    ys: np.ndarray
    ops: List[ForwardOperator]
    inv_two_var: np.ndarray

    @classmethod
    def from_measurements(cls, measurements: Sequence[Measurement], mode: str, sigma_y: float) -> "DistillBatch":
        ops = [m.require_op() for m in measurements]
        sigmas = np.array([m.sigma_y if m.sigma_y > 0 else sigma_y for m in measurements])
        return cls(
            conditions=np.stack([condition_vector(m, mode) for m in measurements]),
            ys=np.stack([m.y for m in measurements]),
            ops=ops,
            inv_two_var=0.5 / (sigmas * sigmas),
        )

    def take(self, index: np.ndarray) -> "DistillBatch":
        return DistillBatch(self.conditions[index], self.ys[index], [self.ops[i] for i in index],
                            self.inv_two_var[index])


def _term(name: str, step: int, fn: Callable[[], Tensor]) -> Tensor:
    try:
        return fn()
    except NonFiniteError as exc:
        logger.error("%s term diverged at step %d: %s", name, step, exc)
        raise DivergenceError(f"{name} loss is non-finite at step {step}", term=name, step=step) from exc


def distill_objective(flow: ConditionalFlow, params: Mapping[str, Tensor], score: ScoreModel,
                      batch: DistillBatch, sched: NoiseSchedule, rng: np.random.Generator, cfg: DistillConfig,
                      step: int = 0) -> Tuple[Tensor, LossBreakdown]:
    """
    Batch-mean objective fidelity + prior + entropy.

    Returns:
        (total loss tensor, breakdown of the three terms)

    Raises:
        DivergenceError: Naming the first term that became non-finite.
    """
    rows = batch.ys.shape[0]
    z = rng.standard_normal((rows, flow.dim))
    x_hat, logdet = _term("flow", step, lambda: flow_forward(flow, z, batch.conditions, params))
    fidelity = _term("fidelity", step, lambda: (
        (batch.ys - apply_batch(batch.ops, x_hat)).square().sum(axis=1) * batch.inv_two_var).mean())
    prior = _term("prior", step, lambda: prior_terms(
        x_hat, score, sched, rng, cfg.n_t_samples, cfg.include_terminal_term, cfg.score_jacobian).mean())
    entropy = _term("entropy", step, lambda: entropy_loss(z, logdet).mean())
    total = fidelity + prior + entropy
    breakdown = LossBreakdown(fidelity.item(), prior.item(), entropy.item(), step=step)
    return total, breakdown


@dataclass
class DistillResult:
    flow: ConditionalFlow
    trace: List[LossBreakdown] = field(default_factory=list)


def distill_train(flow: ConditionalFlow, score: ScoreModel, measurements: Union[MeasurementSet, Sequence[Measurement]],
                  cfg: DistillConfig, sched: NoiseSchedule, rng: np.random.Generator,
                  checkpoint: Optional[Union[str, Path]] = None,
                  callback: Optional[Callable[[LossBreakdown], None]] = None) -> DistillResult:
    """
    Fit ``flow`` to the posterior implied by ``score`` over a set of measurements.

    Only (y, operator) pairs are used; ground truth attached to an
    evaluation set is ignored.

    Args:
        flow: Flow to train (its parameters are the only ones updated)
        score: Frozen score model
        measurements: Training measurements
        cfg: Objective and optimizer settings
        sched: Noise schedule of the score model
        rng: Generator for batches, latents and time draws
        checkpoint: Flow checkpoint path, written every ``checkpoint_every`` steps and at the end
        callback: Called with every step's LossBreakdown

    Returns:
        DistillResult with the trained flow and the per-step loss trace.

    Raises:
        DivergenceError: If a loss term becomes non-finite.
    """
    items = list(measurements.measurements if isinstance(measurements, MeasurementSet) else measurements)
    if not items:
        raise ShapeError("no measurements to distill on")
    data = DistillBatch.from_measurements(items, flow.condition_mode, cfg.sigma_y)
    if data.conditions.shape[1] != flow.cond_dim:
        raise ShapeError(f"measurements give condition dim {data.conditions.shape[1]}, flow expects {flow.cond_dim}")

    result = DistillResult(flow=flow)
    logger.info("distilling flow: %d measurements, %d params, %d iterations, lr=%g",
                len(items), flow.store.n_parameters(), cfg.iterations, cfg.lr)
    store = flow.store
    for step in range(1, cfg.iterations + 1):
        batch = data.take(rng.integers(0, len(items), size=cfg.batch))
        params = store.tensors(trainable=True)
        total, breakdown = distill_objective(flow.with_store(store), params, score, batch, sched, rng, cfg, step)
        grads, breakdown.grad_norm = clip_grad_norm(backward(total), cfg.clip_norm)
        store = adam_step(store, grads, cfg.learning_rate(step), cfg.beta1, cfg.beta2, cfg.eps)
        result.trace.append(breakdown)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("distill step %d/%d: fidelity=%.4f prior=%.4f entropy=%.4f total=%.4f",
                        step, cfg.iterations, breakdown.fidelity, breakdown.prior, breakdown.entropy,
                        breakdown.total)
        else:
            logger.debug("distill step %d: total=%.5f |g|=%.3f", step, breakdown.total, breakdown.grad_norm)
        if checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_flow(flow.with_store(store), checkpoint)
        if callback is not None:
            callback(breakdown)

    result.flow = flow.with_store(store)
    if checkpoint is not None:
        save_flow(result.flow, checkpoint)
    return result


TRACE_FIELDS = ("step", "fidelity", "prior", "entropy", "total")


def write_loss_trace(path: Union[str, Path], trace: Sequence[LossBreakdown]) -> None:
    """Write the loss trace as CSV with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for entry in trace:
            writer.writerow(asdict(entry))
    logger.info("wrote %d loss records to %s", len(trace), path)
