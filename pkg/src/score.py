"""
ampost - Score Prior

The diffusion prior: a dense score network s_theta(x, t) trained by
denoising score matching, plus closed-form scores of Gaussian and
Gaussian-mixture data used as verification oracles. All score models are
callables ``model(x_t, t) -> Tensor`` that stay differentiable in ``x_t``.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .container import read_container, write_container
from .diffusion import NoiseSchedule, Time, alpha_beta, perturb
from .errors import DivergenceError, NonFiniteError, ShapeError
from .tensorcore import (Tensor, TensorLike, ParamStore, adam_step, as_tensor, backward, concat,
                         make_rng, mlp_apply, mlp_init, split)

logger = logging.getLogger(__name__)

PREFIX = "score"


class ScoreModel(Protocol):
    """Anything that maps (x_t, t) to a score tensor of x_t's shape."""

    def __call__(self, x_t: Tensor, t: Time) -> Tensor: ...


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 1:
        return x.reshape(1, x.shape[0]), True
    return x, False


# ---------------------------------------------------------------------------
# Learned score network
# ---------------------------------------------------------------------------

@dataclass
class ScoreNetwork:
    """
    Dense score network with Fourier time features.

    The network sees [x ∥ features(t)] and predicts the noise; the score is
    that prediction divided by -sigma_t.

    Attributes:
        dim: Data dimension d
        hidden: Hidden layer widths
        fourier_features: Number of time features (sin/cos pairs)
        sched: Schedule providing sigma_t
        store: Parameters
    """

    dim: int
    hidden: Tuple[int, ...]
    fourier_features: int
    sched: NoiseSchedule
    store: ParamStore

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def time_features(self, t: Time, rows: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (rows,))
        freqs = math.pi * 2.0 ** np.arange(self.fourier_features // 2)
        angles = t[:, None] * freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    def bind(self, params: Optional[Mapping[str, Tensor]] = None) -> ScoreModel:
        """Callable view with the given parameter tensors (frozen when omitted)."""
        bound = self.store.tensors(trainable=False) if params is None else params
        return lambda x_t, t: score_eval(self, x_t, t, bound)

    def __call__(self, x_t: TensorLike, t: Time) -> Tensor:
        return score_eval(self, x_t, t)


def init_score_network(dim: int, sched: NoiseSchedule, rng: np.random.Generator, hidden_width: int = 256,
                       hidden_layers: int = 4, fourier_features: int = 8) -> ScoreNetwork:
    """Fresh network; the output layer is zero so the initial score is 0."""
    if fourier_features % 2:
        raise ValueError("fourier_features must be even (sin/cos pairs)")
    hidden = tuple([hidden_width] * hidden_layers)
    sizes = [dim + fourier_features, *hidden, dim]
    store = ParamStore.from_params(mlp_init(rng, PREFIX, sizes, zero_last=True))
    return ScoreNetwork(dim=dim, hidden=hidden, fourier_features=fourier_features, sched=sched, store=store)


def score_eval(net: ScoreNetwork, x_t: TensorLike, t: Time, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Evaluate s_theta(x_t, t).

    Args:
        net: Score network
        x_t: Points, shape (d,) or (batch, d); may require grad
        t: Time, scalar or one per row
        params: Parameter tensors to use (frozen store tensors when omitted)

    Returns:
        Score tensor with the shape of ``x_t``, differentiable in parameters and input.
    """
    x_t = as_tensor(x_t)
    if x_t.shape[-1] != net.dim:
        raise ShapeError(f"score network expects dim {net.dim}, got {x_t.shape}")
    params = net.store.tensors(trainable=False) if params is None else params
    x, squeeze = _batched(x_t)
    rows = x.shape[0]
    features = net.time_features(t, rows)
    inputs = concat([x, features], axis=1)
    noise_pred = mlp_apply(params, PREFIX, net.n_layers, inputs, activation="tanh")
    _, sigma = alpha_beta(net.sched, t)
    inv_sigma = -1.0 / np.broadcast_to(np.asarray(sigma, dtype=np.float64), (rows,))
    out = noise_pred * inv_sigma.reshape(-1, 1)
    return out.reshape(net.dim) if squeeze else out


# ---------------------------------------------------------------------------
# Analytic oracles
# ---------------------------------------------------------------------------

@dataclass
class AnalyticGaussianScore:
    """
    Exact perturbed score of N(mu0, diag(var0)) data.

    Under the VP kernel the marginal at t is N(alpha_t mu0, alpha_t^2 var0 + sigma_t^2).
    """

    mu0: np.ndarray
    var0: np.ndarray
    sched: NoiseSchedule

    def __post_init__(self) -> None:
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=np.float64))
        self.var0 = np.broadcast_to(np.asarray(self.var0, dtype=np.float64), self.mu0.shape).copy()

    @property
    def dim(self) -> int:
        return self.mu0.size

    def marginal(self, t: Time) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and variance of p_t, shaped (rows, d) for per-row times."""
        alpha, sigma = alpha_beta(self.sched, t)
        alpha = np.asarray(alpha)[..., None]
        sigma = np.asarray(sigma)[..., None]
        return alpha * self.mu0, alpha * alpha * self.var0 + sigma * sigma

    def __call__(self, x_t: TensorLike, t: Time) -> Tensor:
        x_t = as_tensor(x_t)
        mean, var = self.marginal(t)
        if mean.ndim == 2 and x_t.ndim == 1:
            raise ShapeError("per-row times need batched points")
        return (x_t - mean) * (-1.0 / var)

    def log_density(self, x: np.ndarray, t: Time) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mean, var = self.marginal(t)
        return -0.5 * np.sum((x - mean) ** 2 / var + np.log(2.0 * math.pi * var), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mu0 + np.sqrt(self.var0) * rng.standard_normal((n, self.dim))


@dataclass
class AnalyticMixtureScore:
    """
    Exact perturbed score of a diagonal Gaussian mixture.

    Attributes:
        means: (k, d) component means
        variances: (k, d) component variances
        weights: (k,) mixing weights summing to one
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    sched: NoiseSchedule

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        variances = np.asarray(self.variances, dtype=np.float64)
        if variances.ndim == 1 and variances.size == self.means.shape[0]:
            variances = variances[:, None]
        self.variances = np.broadcast_to(variances, self.means.shape).copy()
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _components(self, t: Time) -> Tuple[np.ndarray, np.ndarray]:
        alpha, sigma = alpha_beta(self.sched, t)
        alpha = np.asarray(alpha)[..., None, None]
        sigma = np.asarray(sigma)[..., None, None]
        # (..., k, d)
        return alpha * self.means, alpha * alpha * self.variances + sigma * sigma

    def __call__(self, x_t: TensorLike, t: Time) -> Tensor:
        x_t = as_tensor(x_t)
        x, squeeze = _batched(x_t)
        means, variances = self._components(t)
        if means.ndim == 2:
            means = np.broadcast_to(means, (x.shape[0],) + means.shape)
            variances = np.broadcast_to(variances, means.shape)
        k = self.weights.size
        rows = x.shape[0]
        log_terms, pulls = [], []
        for j in range(k):
            diff = x - means[:, j, :]
            inv_var = 1.0 / variances[:, j, :]
            const = math.log(self.weights[j]) - 0.5 * np.sum(np.log(2.0 * math.pi * variances[:, j, :]), axis=1)
            log_terms.append(((diff.square() * inv_var).sum(axis=1) * -0.5 + const).reshape(rows, 1))
            pulls.append(diff * (-inv_var))
        logits = concat(log_terms, axis=1)
        # shifting by a constant leaves the softmax and its gradient unchanged
        shifted = logits - np.max(logits.data, axis=1, keepdims=True)
        unnorm = shifted.exp()
        resp = unnorm / unnorm.sum(axis=1).reshape(rows, 1)
        pieces = split(resp, [1] * k, axis=1)
        out = pulls[0] * pieces[0]
        for j in range(1, k):
            out = out + pulls[j] * pieces[j]
        return out.reshape(self.dim) if squeeze else out

    def log_density(self, x: np.ndarray, t: Time) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        means, variances = self._components(t)
        comp = -0.5 * np.sum((x[..., None, :] - means) ** 2 / variances + np.log(2.0 * math.pi * variances), axis=-1)
        return logsumexp(comp + np.log(self.weights), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        labels = rng.choice(self.weights.size, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[labels] + np.sqrt(self.variances[labels]) * noise


AnalyticScore = Union[AnalyticGaussianScore, AnalyticMixtureScore]


def analytic_score_eval(oracle: AnalyticScore, x: TensorLike, t: Time) -> Tensor:
    """Closed-form perturbed score of an oracle prior at time ``t``."""
    oracle.sched.check_time(t)
    return oracle(x, t)


# ---------------------------------------------------------------------------
# Denoising score matching
# ---------------------------------------------------------------------------

def dsm_loss(net: Union[ScoreNetwork, ScoreModel], batch: TensorLike, sched: NoiseSchedule,
             rng: np.random.Generator, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Likelihood-weighted denoising score matching loss.

    One (t, eps) pair per batch row, t ~ U(eps_min, T), eps ~ N(0, I):

        mean_i  g(t_i)^2 || s(x_t, t_i) + eps_i / sigma_t ||^2

    Args:
        net: Score network (optionally with ``params``) or any score model
        batch: Clean samples, shape (batch, d)
        sched: Noise schedule
        rng: Random generator for t and eps
        params: Trainable parameter tensors of ``net``

    Returns:
        Scalar loss tensor.
    """
    x0 = as_tensor(batch)
    if x0.ndim != 2:
        raise ShapeError(f"dsm_loss expects a (batch, d) array, got {x0.shape}")
    rows = x0.shape[0]
    t = sched.sample_times(rng, rows)
    noise = rng.standard_normal(x0.shape)
    x_t, kernel_score = perturb(sched, x0, t, noise)
    model = net.bind(params) if isinstance(net, ScoreNetwork) else net
    residual = model(x_t, t) - kernel_score
    weight = sched.beta(t)
    return ((residual.square().sum(axis=1)) * weight).mean()


@dataclass
class ScoreTrainConfig:
    """Optimizer settings for score training."""

    lr: float = 2e-4
    batch: int = 64
    iterations: int = 20000
    holdout: int = 512
    log_every: int = 500
    snapshot_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "ScoreTrainConfig":
        return cls(
            lr=float(config["score.lr"]),
            batch=int(config["score.batch"]),
            iterations=int(config["score.iterations"]),
            holdout=int(config["score.holdout"]),
            log_every=int(config["score.log_every"]),
            snapshot_every=int(config["score.snapshot_every"]),
            beta1=float(config["adam.beta1"]),
            beta2=float(config["adam.beta2"]),
            eps=float(config["adam.eps"]),
        )


@dataclass
class ScoreTrainResult:
    """
    Outcome of ``train_score``.

    Attributes:
        net: Trained network
        losses: Training loss per step
        holdout_initial: Held-out DSM loss before training
        holdout_final: Held-out DSM loss after training
        snapshots: (step, ParamStore) pairs taken every ``snapshot_every`` steps
    """

    net: ScoreNetwork
    losses: List[float] = field(default_factory=list)
    holdout_initial: float = float("nan")
    holdout_final: float = float("nan")
    snapshots: List[Tuple[int, ParamStore]] = field(default_factory=list)

    def snapshot_network(self, index: int) -> ScoreNetwork:
        _, store = self.snapshots[index]
        net = self.net
        return ScoreNetwork(net.dim, net.hidden, net.fourier_features, net.sched, store)


def _stack_dataset(dataset: Union[np.ndarray, Sequence[TensorLike]]) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        data = np.asarray(dataset, dtype=np.float64)
    else:
        data = np.stack([as_tensor(item).data.reshape(-1) for item in dataset])
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise ShapeError("dataset is empty")
    return data


def train_score(dataset: Union[np.ndarray, Sequence[TensorLike]], config: ScoreTrainConfig, sched: NoiseSchedule,
                rng: np.random.Generator, net: Optional[ScoreNetwork] = None,
                checkpoint: Optional[Union[str, Path]] = None,
                callback: Optional[Callable[[int, float], None]] = None,
                hidden_width: int = 256, hidden_layers: int = 4, fourier_features: int = 8) -> ScoreTrainResult:
    """
    Fit a score network to ``dataset`` with Adam on the DSM loss.

    Args:
        dataset: Clean samples, (n, d) array or sequence of vectors
        config: Optimizer settings
        sched: Noise schedule
        rng: Random generator (initialization, batches, t and eps draws)
        net: Network to continue training (a fresh one is built when omitted)
        checkpoint: Path to persist the trained network to
        callback: Called as ``callback(step, loss)`` after every step

    Returns:
        ScoreTrainResult with the network, loss trace and held-out losses.

    Raises:
        DivergenceError: If the loss becomes non-finite.
    """
    data = _stack_dataset(dataset)
    if net is None:
        net = init_score_network(data.shape[1], sched, rng, hidden_width, hidden_layers, fourier_features)
    if data.shape[1] != net.dim:
        raise ShapeError(f"dataset dim {data.shape[1]} != network dim {net.dim}")

    n_holdout = min(config.holdout, data.shape[0] // 4)
    train, holdout = (data[:-n_holdout], data[-n_holdout:]) if n_holdout > 0 else (data, data)
    holdout_seed = int(rng.integers(2 ** 62))

    def holdout_loss(current: ScoreNetwork) -> float:
        return dsm_loss(current, holdout, sched, make_rng(holdout_seed)).item()

    result = ScoreTrainResult(net=net)
    result.holdout_initial = holdout_loss(net)
    logger.info("training score network: d=%d, %d params, %d samples, %d iterations",
                net.dim, net.store.n_parameters(), train.shape[0], config.iterations)

    store = net.store
    for step in range(1, config.iterations + 1):
        batch = train[rng.integers(0, train.shape[0], size=config.batch)]
        params = store.tensors(trainable=True)
        try:
            loss = dsm_loss(net, batch, sched, rng, params)
        except NonFiniteError as exc:
            logger.error("score training diverged at step %d: %s", step, exc)
            raise DivergenceError(f"DSM loss diverged at step {step}", term="dsm", step=step) from exc
        grads = backward(loss)
        store = adam_step(store, grads, config.lr, config.beta1, config.beta2, config.eps)
        net = ScoreNetwork(net.dim, net.hidden, net.fourier_features, sched, store)
        value = loss.item()
        result.losses.append(value)
        if config.snapshot_every and step % config.snapshot_every == 0:
            result.snapshots.append((step, store))
        if config.log_every and step % config.log_every == 0:
            logger.info("score step %d/%d: dsm=%.5f", step, config.iterations, value)
        else:
            logger.debug("score step %d: dsm=%.5f", step, value)
        if callback is not None:
            callback(step, value)

    result.net = net
    result.holdout_final = holdout_loss(net)
    logger.info("held-out DSM loss %.5f -> %.5f", result.holdout_initial, result.holdout_final)
    if checkpoint is not None:
        save_score(net, checkpoint)
    return result


def score_mse(model: ScoreModel, oracle: AnalyticScore, rng: np.random.Generator, n_points: int = 4096,
              t_range: Tuple[float, float] = (0.1, 0.9), box: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> float:
    """
    Per-coordinate mean-squared error between a score model and an oracle.

    Points are uniform in ``box`` (default: a 2-sigma box around the oracle's
    data distribution), times uniform in ``t_range``.
    """
    if box is None:
        if isinstance(oracle, AnalyticGaussianScore):
            center, spread = oracle.mu0, 2.0 * np.sqrt(oracle.var0)
        else:
            center = oracle.means.mean(axis=0)
            spread = np.abs(oracle.means - center).max(axis=0) + 2.0 * np.sqrt(oracle.variances.max(axis=0))
        box = (center - spread, center + spread)
    low, high = (np.asarray(b, dtype=np.float64) for b in box)
    x = rng.uniform(low, high, size=(n_points, low.size))
    t = rng.uniform(*t_range, size=n_points)
    diff = model(Tensor(x), t).data - oracle(Tensor(x), t).data
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_score(net: ScoreNetwork, path: Union[str, Path]) -> None:
    """Persist a score network with its architecture and schedule."""
    s = net.sched
    tensors: Dict[str, np.ndarray] = {
        "meta/kind": np.array([1.0]),
        "meta/dim": np.array([float(net.dim)]),
        "meta/hidden": np.array([float(w) for w in net.hidden]),
        "meta/fourier_features": np.array([float(net.fourier_features)]),
        "meta/sde": np.array([s.beta_min, s.beta_max, s.T, s.eps_min]),
    }
    tensors.update(net.store.params)
    write_container(path, tensors)
    logger.info("saved score checkpoint to %s", path)


def load_score(path: Union[str, Path]) -> ScoreNetwork:
    """Load a checkpoint written by ``save_score``."""
    tensors = read_container(path)
    if "meta/dim" not in tensors or tensors.get("meta/kind", [0])[0] != 1.0:
        raise ShapeError(f"{path} is not a score checkpoint")
    beta_min, beta_max, horizon, eps_min = tensors["meta/sde"]
    sched = NoiseSchedule(float(beta_min), float(beta_max), float(horizon), float(eps_min))
    params = {name: value for name, value in tensors.items() if name.startswith(PREFIX + "/")}
    return ScoreNetwork(
        dim=int(tensors["meta/dim"][0]),
        hidden=tuple(int(w) for w in tensors["meta/hidden"]),
        fourier_features=int(tensors["meta/fourier_features"][0]),
        sched=sched,
        store=ParamStore.from_params(params),
    )
