"""
ampost - Conditional Flow

Conditional RealNVP generator G(z, y). Each flow step holds two affine
coupling layers with complementary even/odd partitions. A coupling layer
keeps its passive coordinates, feeds them together with the condition y to
a tanh scale net and a ReLU shift net, and transforms the active coordinates:

    x_b' = x_b * exp(s) + t,   s = 2 tanh(raw scale)

so the log-determinant is the sum of s over the active coordinates. Output
layers start at zero, which makes a fresh flow the identity.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, ShapeError
from .operators import Measurement
from .tensorcore import Tensor, TensorLike, ParamStore, as_tensor, concat, gaussian_logpdf, mlp_apply, mlp_init

logger = logging.getLogger(__name__)

PREFIX = "flow"
SCALE_BOUND = 2.0

CONDITION_MODES = ("masked_signal", "masked_signal_plus_mask")
OUTPUT_BIJECTIONS = ("none", "sigmoid")


@dataclass(frozen=True)
class CouplingLayer:
    """
    One affine coupling layer.

    Attributes:
        index: Position in the flow, used for parameter names
        passive: 1.0 on coordinates that pass through unchanged, 0.0 on active ones
        n_layers: Dense layers in each of the scale and shift nets
    """

    index: int
    passive: np.ndarray
    n_layers: int

    @property
    def active(self) -> np.ndarray:
        return 1.0 - self.passive

    @property
    def is_identity(self) -> bool:
        return not self.active.any()

    def _scale_shift(self, params: Mapping[str, Tensor], x_passive: Tensor, cond: Tensor) -> Tuple[Tensor, Tensor]:
        inputs = concat([x_passive, cond], axis=1)
        raw_scale = mlp_apply(params, f"{PREFIX}/c{self.index}/s", self.n_layers, inputs)
        shift = mlp_apply(params, f"{PREFIX}/c{self.index}/t", self.n_layers, inputs, activation="relu")
        return raw_scale.tanh() * (SCALE_BOUND * self.active), shift * self.active

    def forward(self, params: Mapping[str, Tensor], x: Tensor, cond: Tensor) -> Tuple[Tensor, Tensor]:
        s, t = self._scale_shift(params, x * self.passive, cond)
        return x * s.exp() + t, s.sum(axis=1)

    def inverse(self, params: Mapping[str, Tensor], x: Tensor, cond: Tensor) -> Tuple[Tensor, Tensor]:
        s, t = self._scale_shift(params, x * self.passive, cond)
        return (x - t) * (-s).exp(), -(s.sum(axis=1))


@dataclass
class ConditionalFlow:
    """
    Conditional RealNVP with ``steps`` flow steps.

    Attributes:
        dim: Data (and latent) dimension d
        cond_dim: Condition dimension m
        steps: Number of flow steps (two coupling layers each)
        hidden: Hidden widths of every coupling net
        store: Parameters
        output_bijection: ``none`` or ``sigmoid``
        condition_mode: How measurements become condition vectors
    """

    dim: int
    cond_dim: int
    steps: int
    hidden: Tuple[int, ...]
    store: ParamStore
    output_bijection: str = "none"
    condition_mode: str = "masked_signal_plus_mask"

    def __post_init__(self) -> None:
        if self.output_bijection not in OUTPUT_BIJECTIONS:
            raise ConfigError(f"unknown output bijection '{self.output_bijection}'")
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigError(f"unknown condition mode '{self.condition_mode}'")
        even = (np.arange(self.dim) % 2 == 0).astype(np.float64)
        self.layers: List[CouplingLayer] = []
        for j in range(2 * self.steps):
            passive = even if j % 2 == 0 else 1.0 - even
            self.layers.append(CouplingLayer(j, passive, len(self.hidden) + 1))

    def with_store(self, store: ParamStore) -> "ConditionalFlow":
        return ConditionalFlow(self.dim, self.cond_dim, self.steps, self.hidden, store,
                               self.output_bijection, self.condition_mode)

    def params(self, trainable: bool = False) -> Dict[str, Tensor]:
        return self.store.tensors(trainable=trainable)


def init_flow(dim: int, cond_dim: int, rng: np.random.Generator, steps: int = 24, hidden_width: int = 64,
              hidden_layers: int = 2, output_bijection: str = "none",
              condition_mode: str = "masked_signal_plus_mask") -> ConditionalFlow:
    """Fresh flow; zero output layers make it the identity map."""
    if dim < 1 or cond_dim < 1 or steps < 1:
        raise ShapeError(f"bad flow shape: dim={dim}, cond_dim={cond_dim}, steps={steps}")
    hidden = tuple([hidden_width] * hidden_layers)
    sizes = [dim + cond_dim, *hidden, dim]
    params: Dict[str, np.ndarray] = {}
    for j in range(2 * steps):
        params.update(mlp_init(rng, f"{PREFIX}/c{j}/s", sizes, zero_last=True))
        params.update(mlp_init(rng, f"{PREFIX}/c{j}/t", sizes, zero_last=True))
    flow = ConditionalFlow(dim, cond_dim, steps, hidden, ParamStore.from_params(params),
                           output_bijection, condition_mode)
    logger.debug("initialized flow: d=%d, m=%d, %d steps, %d params", dim, cond_dim, steps,
                 flow.store.n_parameters())
    return flow


def flow_from_config(config: Mapping[str, Any], dim: int, cond_dim: int, rng: np.random.Generator) -> ConditionalFlow:
    return init_flow(
        dim, cond_dim, rng,
        steps=int(config["flow.steps"]),
        hidden_width=int(config["flow.hidden_width"]),
        hidden_layers=int(config["flow.hidden_layers"]),
        output_bijection=str(config["flow.output_bijection"]),
        condition_mode=str(config["flow.condition_mode"]),
    )


def _prepare(flow: ConditionalFlow, v: TensorLike, y: TensorLike) -> Tuple[Tensor, Tensor, bool]:
    v = as_tensor(v)
    y = as_tensor(y)
    if v.shape[-1] != flow.dim:
        raise ShapeError(f"flow expects dim {flow.dim}, got {v.shape}")
    if y.shape[-1] != flow.cond_dim:
        raise ShapeError(f"flow expects condition dim {flow.cond_dim}, got {y.shape}")
    single = v.ndim == 1
    if single:
        v = v.reshape(1, flow.dim)
    rows = v.shape[0]
    if y.ndim == 1:
        if rows > 1 and not y.requires_grad:
            y = Tensor(np.repeat(y.data[None, :], rows, axis=0))
        else:
            y = y.reshape(1, flow.cond_dim)
            if rows > 1:
                y = concat([y] * rows, axis=0)
    if y.shape[0] != rows:
        raise ShapeError(f"{rows} inputs but {y.shape[0]} conditions")
    return v, y, single


def _finish(out: Tensor, logdet: Tensor, single: bool, dim: int) -> Tuple[Tensor, Tensor]:
    if single:
        return out.reshape(dim), logdet.reshape(1).sum()
    return out, logdet


def flow_forward(flow: ConditionalFlow, z: TensorLike, y: TensorLike,
                 params: Optional[Mapping[str, Tensor]] = None) -> Tuple[Tensor, Tensor]:
    """
    Generate x = G(z, y).

    Args:
        flow: The flow
        z: Latent, (d,) or (batch, d)
        y: Condition, (m,) or one row per latent
        params: Trainable parameter tensors (frozen store tensors when omitted)

    Returns:
        (x, logdet) with logdet = log|det dG/dz|, a scalar for a single latent
        and one value per row for a batch.
    """
    params = flow.params() if params is None else params
    x, cond, single = _prepare(flow, z, y)
    logdet: Tensor = Tensor(np.zeros(x.shape[0]))
    for layer in flow.layers:
        if layer.is_identity:
            continue
        x, layer_logdet = layer.forward(params, x, cond)
        logdet = logdet + layer_logdet
    if flow.output_bijection == "sigmoid":
        x, bij_logdet = _sigmoid_forward(x)
        logdet = logdet + bij_logdet
    return _finish(x, logdet, single, flow.dim)


def flow_inverse(flow: ConditionalFlow, x: TensorLike, y: TensorLike,
                 params: Optional[Mapping[str, Tensor]] = None) -> Tuple[Tensor, Tensor]:
    """
    Recover z = G^-1(x, y).

    Returns:
        (z, logdet_inv) with logdet_inv = -logdet of the forward map at z.
    """
    params = flow.params() if params is None else params
    z, cond, single = _prepare(flow, x, y)
    logdet: Tensor = Tensor(np.zeros(z.shape[0]))
    if flow.output_bijection == "sigmoid":
        z, bij_logdet = _sigmoid_inverse(z)
        logdet = logdet + bij_logdet
    for layer in reversed(flow.layers):
        if layer.is_identity:
            continue
        z, layer_logdet = layer.inverse(params, z, cond)
        logdet = logdet + layer_logdet
    return _finish(z, logdet, single, flow.dim)


def _sigmoid_forward(u: Tensor) -> Tuple[Tensor, Tensor]:
    # log sigmoid'(u) = -u - 2 log(1 + exp(-u))
    softplus_neg = (1.0 + (-u).exp()).log()
    x = (softplus_neg * -1.0).exp()
    return x, (-u - softplus_neg * 2.0).sum(axis=1)


def _sigmoid_inverse(x: Tensor) -> Tuple[Tensor, Tensor]:
    log_x, log_1mx = x.log(), (1.0 - x).log()
    return log_x - log_1mx, (log_x + log_1mx).sum(axis=1) * -1.0


def flow_logprob(flow: ConditionalFlow, x: TensorLike, y: TensorLike,
                 params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """log q(x | y) = log N(G^-1(x, y); 0, I) + logdet_inv."""
    z, logdet_inv = flow_inverse(flow, x, y, params)
    return gaussian_logpdf(z) + logdet_inv


def sample_posterior(flow: ConditionalFlow, y: TensorLike, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw ``n`` posterior samples G(z_i, y), z_i ~ N(0, I), in one batched pass.

    Returns:
        (n, d) array.
    """
    if n < 1:
        raise ShapeError(f"need at least one sample, got {n}")
    z = rng.standard_normal((n, flow.dim))
    x, _ = flow_forward(flow, z, as_tensor(y))
    return x.data.copy()


def condition_vector(measurement: Measurement, mode: str = "masked_signal_plus_mask") -> np.ndarray:
    """
    Condition vector of a measurement.

    The signal part is y with zeros at unobserved entries. In
    ``masked_signal_plus_mask`` mode the observed-entry mask is appended
    when the operator masks; ``masked_signal`` is the blind mode.
    """
    if mode not in CONDITION_MODES:
        raise ConfigError(f"unknown condition mode '{mode}'")
    observed = measurement.observed
    signal = measurement.y if observed is None else np.where(observed, measurement.y, 0.0)
    if mode == "masked_signal" or observed is None:
        return signal.copy()
    return np.concatenate([signal, observed.astype(np.float64)])


def condition_dim(measurement: Measurement, mode: str = "masked_signal_plus_mask") -> int:
    return condition_vector(measurement, mode).size


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_flow(flow: ConditionalFlow, path: Union[str, Path]) -> None:
    """Persist a flow with its architecture."""
    tensors: Dict[str, np.ndarray] = {
        "meta/kind": np.array([2.0]),
        "meta/dim": np.array([float(flow.dim)]),
        "meta/cond_dim": np.array([float(flow.cond_dim)]),
        "meta/steps": np.array([float(flow.steps)]),
        "meta/hidden": np.array([float(w) for w in flow.hidden]),
        "meta/output_bijection": np.array([float(OUTPUT_BIJECTIONS.index(flow.output_bijection))]),
        "meta/condition_mode": np.array([float(CONDITION_MODES.index(flow.condition_mode))]),
    }
    tensors.update(flow.store.params)
    write_container(path, tensors)
    logger.info("saved flow checkpoint to %s", path)


def load_flow(path: Union[str, Path]) -> ConditionalFlow:
    """Load a checkpoint written by ``save_flow``."""
    tensors = read_container(path)
    if tensors.get("meta/kind", [0])[0] != 2.0:
        raise ShapeError(f"{path} is not a flow checkpoint")
    params = {name: value for name, value in tensors.items() if name.startswith(PREFIX + "/")}
    return ConditionalFlow(
        dim=int(tensors["meta/dim"][0]),
        cond_dim=int(tensors["meta/cond_dim"][0]),
        steps=int(tensors["meta/steps"][0]),
        hidden=tuple(int(w) for w in tensors["meta/hidden"]),
        store=ParamStore.from_params(params),
        output_bijection=OUTPUT_BIJECTIONS[int(tensors["meta/output_bijection"][0])],
        condition_mode=CONDITION_MODES[int(tensors["meta/condition_mode"][0])],
    )


def numeric_logdet(flow: ConditionalFlow, z: np.ndarray, y: np.ndarray, h: float = 1e-6) -> float:
    """log|det dG/dz| from a central-difference Jacobian (verification only)."""
    z = np.asarray(z, dtype=np.float64)
    jac = np.zeros((flow.dim, flow.dim))
    for i in range(flow.dim):
        step = np.zeros(flow.dim)
        step[i] = h
        plus, _ = flow_forward(flow, z + step, y)
        minus, _ = flow_forward(flow, z - step, y)
        jac[:, i] = (plus.data - minus.data) / (2.0 * h)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0:
        return -math.inf
    return float(logabs)
