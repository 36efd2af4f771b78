"""
ampost - Forward Operators and Data

Forward models A of the inverse problem y = A(x) + sigma_y n, measurement
synthesis, desk-scale toy datasets and dataset/measurement containers.

Operators are built from a short spec string:

    id                      identity
    mask:p=0.3              drop a fraction p of entries (fresh mask per build)
    mask:p=0.3-0.6          fraction drawn uniformly in the range per build
    blur:sigma=1.0          circular Gaussian blur, kernel truncated at 2 sigma
    down:f=2                non-overlapping mean pooling
    composite:blur:sigma=1.0+mask:p=0.3    apply left to right

Operator kinds and dataset kinds register themselves in ``OPERATOR_KINDS``
and ``DATASET_KINDS``.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import circulant

from .container import read_container, write_container
from .errors import ContainerError, OperatorError
from .registry import Registry
from .tensorcore import Tensor, TensorLike, as_tensor, concat, split

logger = logging.getLogger(__name__)

Shape = Optional[Tuple[int, ...]]


# ---------------------------------------------------------------------------
# Operator specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorSpec:
    """
    A parsed operator spec.

    Attributes:
        kind: Registered operator kind (``id``, ``mask``, ``blur``, ``down``, ``composite``)
        params: Raw ``key=value`` parameters
        parts: Sub-specs of a composite
    """

    kind: str
    params: Mapping[str, str] = field(default_factory=dict)
    parts: Tuple["OperatorSpec", ...] = ()

    @property
    def text(self) -> str:
        if self.kind == "composite":
            return "composite:" + "+".join(part.text for part in self.parts)
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={v}" for k, v in self.params.items())

    def build(self, dim: int, rng: Optional[np.random.Generator] = None, shape: Shape = None,
              observed: Optional[np.ndarray] = None) -> "ForwardOperator":
        """
        Instantiate the operator for signals of length ``dim``.

        Args:
            dim: Input dimension
            rng: Generator for random masks
            shape: Image shape (h, w) for 2-D blur and pooling
            observed: Use this observed-entry mask instead of drawing one
        """
        cls = OPERATOR_KINDS.resolve(self.kind)
        return cls.from_spec(self, dim, rng, shape, observed)

    def __str__(self) -> str:
        return self.text


def parse_operator_spec(text: str) -> OperatorSpec:
    """
    Parse an operator spec string.

    Raises:
        OperatorError: On unknown kinds or malformed parameters.
    """
    text = text.strip()
    if not text:
        raise OperatorError("empty operator spec")
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind == "composite":
        if not rest:
            raise OperatorError("composite needs at least one part")
        return OperatorSpec("composite", {}, tuple(parse_operator_spec(part) for part in rest.split("+")))
    if kind not in OPERATOR_KINDS:
        raise OperatorError(f"unknown operator kind '{kind}' (known: {', '.join(OPERATOR_KINDS.names())})")
    params: Dict[str, str] = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq or not key.strip():
            raise OperatorError(f"malformed parameter '{item}' in '{text}'")
        params[key.strip()] = value.strip()
    return OperatorSpec(kind, params)


def _float_param(spec: OperatorSpec, key: str, default: Optional[float] = None) -> float:
    raw = spec.params.get(key)
    if raw is None:
        if default is None:
            raise OperatorError(f"'{spec.kind}' needs parameter '{key}'")
        return default
    try:
        return float(raw)
    except ValueError:
        raise OperatorError(f"parameter {key}={raw!r} of '{spec.kind}' is not a number") from None


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

class ForwardOperator(ABC):
    """
    A deterministic forward model mapping R^d to R^m.

    Subclasses register with ``@OPERATOR_KINDS.register(kind)``.
    """

    kind: str = ""
    is_linear: bool = True

    def __init__(self, dim: int, spec: Optional[OperatorSpec] = None) -> None:
        if dim < 1:
            raise OperatorError(f"operator dimension must be positive, got {dim}")
        self.dim = dim
        self.spec = spec or OperatorSpec(self.kind)

    @classmethod
    @abstractmethod
    def from_spec(cls, spec: OperatorSpec, dim: int, rng: Optional[np.random.Generator], shape: Shape,
                  observed: Optional[np.ndarray]) -> "ForwardOperator":
        """Build an instance from a parsed spec."""

    @property
    def output_dim(self) -> int:
        return self.matrix().shape[0]

    def matrix(self) -> np.ndarray:
        """Dense matrix of a linear operator."""
        raise OperatorError(f"'{self.kind}' is not linear")

    def observed(self) -> Optional[np.ndarray]:
        """Boolean mask of observed output entries, if the operator masks."""
        return None

    def mask_records(self) -> Dict[str, np.ndarray]:
        """Random masks needed to rebuild this operator, keyed by part ('' for the operator itself)."""
        return {}

    def noise_support(self) -> np.ndarray:
        """Output entries that receive measurement noise."""
        mask = self.observed()
        return np.ones(self.output_dim, dtype=bool) if mask is None else mask

    def check_input(self, x: Tensor) -> None:
        if x.shape[-1] != self.dim:
            raise OperatorError(f"'{self.spec.text}' expects dim {self.dim}, got {x.shape}")

    def apply(self, x: TensorLike) -> Tensor:
        """A(x) for a vector (d,) or a batch (B, d); differentiable in x."""
        x = as_tensor(x)
        self.check_input(x)
        return x @ self.matrix().T

    def __call__(self, x: TensorLike) -> Tensor:
        return self.apply(x)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.spec.text}, dim={self.dim})"


OPERATOR_KINDS = Registry("operator kind", base=ForwardOperator)


@OPERATOR_KINDS.register("id")
class IdentityOperator(ForwardOperator):
    kind = "id"

    @classmethod
    def from_spec(cls, spec, dim, rng, shape, observed):
        return cls(dim, spec)

    @property
    def output_dim(self) -> int:
        return self.dim

    def matrix(self) -> np.ndarray:
        return np.eye(self.dim)

    def apply(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        self.check_input(x)
        return x


@OPERATOR_KINDS.register("mask")
class MaskOperator(ForwardOperator):
    """Zeroes unobserved entries; output keeps the input length."""

    kind = "mask"

    def __init__(self, dim: int, observed: np.ndarray, spec: Optional[OperatorSpec] = None) -> None:
        super().__init__(dim, spec)
        observed = np.asarray(observed, dtype=bool).reshape(-1)
        if observed.size != dim:
            raise OperatorError(f"mask has {observed.size} entries, signal has {dim}")
        self._observed = observed
        self._weights = observed.astype(np.float64)

    @classmethod
    def from_spec(cls, spec, dim, rng, shape, observed):
        if observed is not None:
            return cls(dim, observed, spec)
        if rng is None:
            raise OperatorError("a random mask needs an rng")
        return cls(dim, random_mask(dim, mask_fraction(spec, rng), rng), spec)

    @property
    def output_dim(self) -> int:
        return self.dim

    @property
    def n_observed(self) -> int:
        return int(self._observed.sum())

    def matrix(self) -> np.ndarray:
        return np.diag(self._weights)

    def observed(self) -> np.ndarray:
        return self._observed.copy()

    def mask_records(self) -> Dict[str, np.ndarray]:
        return {"": self._observed.copy()}

    def apply(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        self.check_input(x)
        return x * self._weights


def mask_fraction(spec: OperatorSpec, rng: np.random.Generator) -> float:
    """Masked fraction p from ``p=0.3`` or a uniform draw from ``p=0.3-0.6``."""
    raw = spec.params.get("p")
    if raw is None:
        raise OperatorError("'mask' needs parameter 'p'")
    low, sep, high = raw.partition("-")
    try:
        p_low = float(low)
        p_high = float(high) if sep else p_low
    except ValueError:
        raise OperatorError(f"bad mask fraction '{raw}'") from None
    if not 0.0 <= p_low <= p_high < 1.0:
        raise OperatorError(f"mask fraction must satisfy 0 <= p < 1, got '{raw}'")
    return p_low if p_low == p_high else float(rng.uniform(p_low, p_high))


def random_mask(dim: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Observed-entry mask keeping exactly ceil((1 - p) d) entries."""
    # round first so 0.4 * 4160 does not ceil to 1665
    n_observed = math.ceil(round((1.0 - p) * dim, 9))
    observed = np.zeros(dim, dtype=bool)
    observed[rng.permutation(dim)[:n_observed]] = True
    return observed


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps at offsets |k| <= 2 sigma."""
    if sigma <= 0:
        raise OperatorError(f"blur sigma must be positive, got {sigma}")
    radius = int(math.floor(2.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def _circular_blur(n: int, sigma: float) -> np.ndarray:
    taps = gaussian_kernel_1d(sigma)
    radius = taps.size // 2
    column = np.zeros(n)
    np.add.at(column, np.arange(-radius, radius + 1) % n, taps)
    return circulant(column)


@OPERATOR_KINDS.register("blur")
class BlurOperator(ForwardOperator):
    """Circular Gaussian blur, 1-D over the vector or separable 2-D over an image shape."""

    kind = "blur"

    def __init__(self, dim: int, sigma: float, shape: Shape = None, spec: Optional[OperatorSpec] = None) -> None:
        super().__init__(dim, spec)
        self.sigma = sigma
        if shape is not None and len(shape) == 2:
            h, w = shape
            if h * w != dim:
                raise OperatorError(f"image shape {shape} does not match dim {dim}")
            self._matrix = np.kron(_circular_blur(h, sigma), _circular_blur(w, sigma))
        else:
            self._matrix = _circular_blur(dim, sigma)

    @classmethod
    def from_spec(cls, spec, dim, rng, shape, observed):
        return cls(dim, _float_param(spec, "sigma", 1.0), shape, spec)

    def matrix(self) -> np.ndarray:
        return self._matrix


@OPERATOR_KINDS.register("down")
class DownsampleOperator(ForwardOperator):
    """Non-overlapping mean pooling by an integer factor."""

    kind = "down"

    def __init__(self, dim: int, factor: int, shape: Shape = None, spec: Optional[OperatorSpec] = None) -> None:
        super().__init__(dim, spec)
        if factor < 1:
            raise OperatorError(f"downsample factor must be >= 1, got {factor}")
        self.factor = factor
        if shape is not None and len(shape) == 2:
            h, w = shape
            if h * w != dim or h % factor or w % factor:
                raise OperatorError(f"image shape {shape} not divisible by factor {factor}")
            self._matrix = np.kron(_pooling(h, factor), _pooling(w, factor))
        else:
            if dim % factor:
                raise OperatorError(f"dim {dim} not divisible by factor {factor}")
            self._matrix = _pooling(dim, factor)

    @classmethod
    def from_spec(cls, spec, dim, rng, shape, observed):
        factor = _float_param(spec, "f", 2.0)
        if not factor.is_integer():
            raise OperatorError(f"downsample factor must be an integer, got {factor}")
        return cls(dim, int(factor), shape, spec)

    def matrix(self) -> np.ndarray:
        return self._matrix


def _pooling(n: int, factor: int) -> np.ndarray:
    return np.kron(np.eye(n // factor), np.full((1, factor), 1.0 / factor))


@OPERATOR_KINDS.register("composite")
class CompositeOperator(ForwardOperator):
    """Operators applied left to right."""

    kind = "composite"

    def __init__(self, parts: Sequence[ForwardOperator], spec: Optional[OperatorSpec] = None) -> None:
        if not parts:
            raise OperatorError("composite needs at least one part")
        super().__init__(parts[0].dim, spec)
        for before, after in zip(parts[:-1], parts[1:]):
            if before.output_dim != after.dim:
                raise OperatorError(f"{before!r} outputs {before.output_dim} values, {after!r} expects {after.dim}")
        self.parts = list(parts)
        self.is_linear = all(part.is_linear for part in parts)

    @classmethod
    def from_spec(cls, spec, dim, rng, shape, observed):
        """``observed`` is one mask for every part or a mapping from part index to its saved mask."""
        parts: List[ForwardOperator] = []
        current_dim, current_shape = dim, shape
        for k, part_spec in enumerate(spec.parts):
            part_observed = observed.get(k) if isinstance(observed, Mapping) else observed
            part = part_spec.build(current_dim, rng, current_shape, part_observed)
            parts.append(part)
            if isinstance(part, DownsampleOperator) and current_shape is not None and len(current_shape) == 2:
                current_shape = (current_shape[0] // part.factor, current_shape[1] // part.factor)
            current_dim = part.output_dim
        return cls(parts, spec)

    @property
    def output_dim(self) -> int:
        return self.parts[-1].output_dim

    def matrix(self) -> np.ndarray:
        result = np.eye(self.dim)
        for part in self.parts:
            result = part.matrix() @ result
        return result

    def observed(self) -> Optional[np.ndarray]:
        return self.parts[-1].observed()

    def mask_records(self) -> Dict[str, np.ndarray]:
        records: Dict[str, np.ndarray] = {}
        for k, part in enumerate(self.parts):
            for key, mask in part.mask_records().items():
                records[f"{k}/{key}" if key else str(k)] = mask
        return records

    def apply(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        self.check_input(x)
        for part in self.parts:
            x = part.apply(x)
        return x


def apply(op: ForwardOperator, x: TensorLike) -> Tensor:
    """A(x); see ``ForwardOperator.apply``."""
    return op.apply(x)


def apply_batch(ops: Sequence[ForwardOperator], x: Tensor) -> Tensor:
    """
    Row-wise A_i(x_i) for a batch with one operator per row.

    Masks are applied as one elementwise product, shared operators as one
    product; anything else falls back to per-row evaluation.
    """
    if x.ndim != 2 or x.shape[0] != len(ops):
        raise OperatorError(f"need one operator per row, got {len(ops)} for {x.shape}")
    if all(isinstance(op, MaskOperator) for op in ops):
        for op in ops:
            op.check_input(x)
        return x * np.stack([op._weights for op in ops])
    if all(isinstance(op, IdentityOperator) for op in ops):
        ops[0].check_input(x)
        return x
    first = ops[0]
    if all(op is first for op in ops):
        return first.apply(x)
    rows = split(x, [1] * x.shape[0], axis=0)
    return concat([op.apply(row) for op, row in zip(ops, rows)], axis=0)


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

@dataclass
class Measurement:
    """
    One inverse-problem instance. Ground truth is never stored here.

    Attributes:
        id: Identifier, unique within a set
        y: Observed vector
        sigma_y: Noise standard deviation used to synthesize ``y``
        op: Forward operator, None when unknown
    """

    id: str
    y: np.ndarray
    sigma_y: float
    op: Optional[ForwardOperator] = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.op is not None and self.y.shape != (self.op.output_dim,):
            raise OperatorError(f"measurement {self.id}: y shape {self.y.shape} != operator output "
                                f"({self.op.output_dim},)")

    @property
    def observed(self) -> Optional[np.ndarray]:
        return None if self.op is None else self.op.observed()

    def require_op(self) -> ForwardOperator:
        if self.op is None:
            raise OperatorError(f"measurement {self.id} has no forward operator")
        return self.op


def measure(op: ForwardOperator, x: TensorLike, sigma_y: float, rng: np.random.Generator,
            id: str = "0") -> Measurement:
    """
    Synthesize y = A(x) + sigma_y n with n ~ N(0, I) on observed entries.

    Raises:
        OperatorError: If sigma_y is negative or x has the wrong dimension.
    """
    if sigma_y < 0:
        raise OperatorError(f"sigma_y must be non-negative, got {sigma_y}")
    x = as_tensor(x)
    if x.ndim != 1:
        raise OperatorError(f"measure takes one signal, got shape {x.shape}")
    clean = op.apply(x).data
    noise = rng.standard_normal(clean.shape) * op.noise_support()
    return Measurement(id=id, y=clean + sigma_y * noise, sigma_y=float(sigma_y), op=op)


def measure_dataset(spec: Union[str, OperatorSpec], data: np.ndarray, sigma_y: float, rng: np.random.Generator,
                    shape: Shape = None) -> List[Measurement]:
    """One measurement per row, each with its own operator instance (fresh masks)."""
    spec = parse_operator_spec(spec) if isinstance(spec, str) else spec
    measurements = []
    for i, x in enumerate(np.atleast_2d(data)):
        op = spec.build(x.size, rng, shape)
        measurements.append(measure(op, x, sigma_y, rng, id=f"{i:06d}"))
    return measurements


def save_measurements(path: Union[str, Path], measurements: Sequence[Measurement],
                      truth: Optional[Mapping[str, np.ndarray]] = None, shape: Shape = None) -> None:
    """
    Write a measurement container.

    Training containers hold only ``y/<id>``, ``mask/<id>`` and metadata;
    passing ``truth`` writes an evaluation container with ``x/<id>`` entries.
    """
    if not measurements:
        raise OperatorError("no measurements to save")
    first = measurements[0]
    if first.op is None:
        raise OperatorError("measurements without an operator cannot be saved")
    tensors: Dict[str, np.ndarray] = {
        "meta/sigma_y": np.array([first.sigma_y]),
        f"meta/op={first.op.spec.text}": np.array([1.0]),
        "meta/dim": np.array([float(first.op.dim)]),
    }
    if shape is not None:
        tensors["meta/shape"] = np.array([float(s) for s in shape])
    for m in measurements:
        tensors[f"y/{m.id}"] = m.y
        for key, mask in m.op.mask_records().items():
            tensors[f"mask/{m.id}/{key}" if key else f"mask/{m.id}"] = mask.astype(np.float64)
        if truth is not None:
            tensors[f"x/{m.id}"] = np.asarray(truth[m.id], dtype=np.float64)
    write_container(path, tensors)
    logger.info("wrote %d measurements to %s%s", len(measurements), path, " (with ground truth)" if truth else "")


@dataclass
class MeasurementSet:
    """Measurements loaded from a container, plus ground truth for evaluation sets."""

    measurements: List[Measurement]
    op_spec: Optional[str] = None
    shape: Shape = None
    truth: Optional[Dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.measurements)

    def __iter__(self):
        return iter(self.measurements)

    @property
    def dim(self) -> int:
        first = self.measurements[0]
        return first.op.dim if first.op is not None else first.y.size


def _saved_masks(tensors: Mapping[str, np.ndarray], mid: str,
                 spec: OperatorSpec) -> Union[None, np.ndarray, Dict[int, np.ndarray]]:
    if spec.kind != "composite":
        observed = tensors.get(f"mask/{mid}")
        return None if observed is None else observed > 0.5
    prefix = f"mask/{mid}/"
    return {int(name[len(prefix):]): value > 0.5 for name, value in tensors.items() if name.startswith(prefix)}


def load_measurements(path: Union[str, Path]) -> MeasurementSet:
    """Read a container written by ``save_measurements``."""
    tensors = read_container(path)
    if "meta/sigma_y" not in tensors:
        raise ContainerError(f"{path} is not a measurement container")
    sigma_y = float(tensors["meta/sigma_y"][0])
    op_names = [name for name in tensors if name.startswith("meta/op=")]
    spec = parse_operator_spec(op_names[0][len("meta/op="):]) if op_names else None
    dim = int(tensors["meta/dim"][0]) if "meta/dim" in tensors else None
    shape = tuple(int(s) for s in tensors["meta/shape"]) if "meta/shape" in tensors else None
    truth = {name[2:]: value for name, value in tensors.items() if name.startswith("x/")} or None
    measurements = []
    for name, y in tensors.items():
        if not name.startswith("y/"):
            continue
        mid = name[2:]
        op = None
        if spec is not None:
            op = spec.build(dim or y.size, None, shape, _saved_masks(tensors, mid, spec))
        measurements.append(Measurement(id=mid, y=y, sigma_y=sigma_y, op=op))
    logger.info("loaded %d measurements from %s", len(measurements), path)
    return MeasurementSet(measurements, spec.text if spec else None, shape, truth)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass
class PointCloudSignal:
    """
    Channel values on V vertices, handled by the models as a flat vector.

    Attributes:
        values: (V, C) array
        coords: Optional (V, k) vertex coordinates, metadata only
    """

    values: np.ndarray
    coords: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise OperatorError(f"point cloud values must be (V, C), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise OperatorError("point cloud values must be finite")
        if self.coords is not None and len(self.coords) != self.values.shape[0]:
            raise OperatorError("one coordinate row per vertex required")

    @property
    def V(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1).copy()


def as_point_cloud(vector: np.ndarray, channels: int = 1, coords: Optional[np.ndarray] = None) -> PointCloudSignal:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim == 2:
        return PointCloudSignal(vector, coords)
    if vector.size % channels:
        raise OperatorError(f"{vector.size} values do not split into {channels} channels")
    return PointCloudSignal(vector.reshape(-1, channels), coords)


# ---------------------------------------------------------------------------
# Toy datasets
# ---------------------------------------------------------------------------

DATASET_KINDS = Registry("dataset kind")

# shapes of the image-like kinds, used for blur/pooling and image export
DATASET_SHAPES: Dict[str, Tuple[int, int]] = {"blobs8x8": (8, 8), "sphere_field": (8, 16)}

GAUSS2D_MEAN = np.array([0.0, 0.0])
GAUSS2D_COV = np.diag([1.0, 0.25])

MIXTURE1D_MEANS = np.array([[-2.0], [2.0]])
MIXTURE1D_VARIANCES = np.array([[0.25], [0.25]])
MIXTURE1D_WEIGHTS = np.array([0.5, 0.5])


def _mixture2d_components(k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    angles = 2.0 * math.pi * np.arange(k) / k
    means = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return means, np.full((k, 2), 0.1), np.full(k, 1.0 / k)


@DATASET_KINDS.register("gauss2d")
def gauss2d(n: int, rng: np.random.Generator, mean: Sequence[float] = tuple(GAUSS2D_MEAN),
            cov: Any = None) -> np.ndarray:
    cov = GAUSS2D_COV if cov is None else np.asarray(cov, dtype=np.float64)
    chol = np.linalg.cholesky(cov)
    return np.asarray(mean, dtype=np.float64) + rng.standard_normal((n, len(mean))) @ chol.T


def _mixture(n: int, rng: np.random.Generator, means: np.ndarray, variances: np.ndarray,
             weights: np.ndarray) -> np.ndarray:
    labels = rng.choice(len(weights), size=n, p=weights)
    return means[labels] + np.sqrt(variances[labels]) * rng.standard_normal((n, means.shape[1]))


@DATASET_KINDS.register("mixture2d")
def mixture2d(n: int, rng: np.random.Generator, k: int = 4) -> np.ndarray:
    return _mixture(n, rng, *_mixture2d_components(k))


@DATASET_KINDS.register("mixture1d")
def mixture1d(n: int, rng: np.random.Generator) -> np.ndarray:
    return _mixture(n, rng, MIXTURE1D_MEANS, MIXTURE1D_VARIANCES, MIXTURE1D_WEIGHTS)


@DATASET_KINDS.register("moons")
def moons(n: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    n_outer = n - n // 2
    theta_outer = rng.uniform(0.0, math.pi, n_outer)
    theta_inner = rng.uniform(0.0, math.pi, n // 2)
    outer = np.stack([np.cos(theta_outer), np.sin(theta_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(theta_inner), 0.5 - np.sin(theta_inner)], axis=1)
    points = np.concatenate([outer, inner])[rng.permutation(n)]
    return points + noise * rng.standard_normal(points.shape)


@DATASET_KINDS.register("blobs8x8")
def blobs8x8(n: int, rng: np.random.Generator) -> np.ndarray:
    """8x8 images of one or two Gaussian bumps, scaled so each image peaks at 1."""
    h, w = DATASET_SHAPES["blobs8x8"]
    rows, cols = np.mgrid[0:h, 0:w]
    images = np.zeros((n, h, w))
    for i in range(n):
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(1.0, h - 2.0), rng.uniform(1.0, w - 2.0)
            width = rng.uniform(0.8, 1.8)
            amplitude = rng.uniform(0.5, 1.0)
            images[i] += amplitude * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * width * width))
        images[i] /= images[i].max()
    return images.reshape(n, h * w)


def sphere_grid(nlat: int, nlon: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cell-centred latitudes and longitudes on [0, 2 pi] with both endpoints."""
    lat = (np.arange(nlat) + 0.5) / nlat * math.pi - 0.5 * math.pi
    lon = np.linspace(0.0, 2.0 * math.pi, nlon)
    return lat, lon


def sphere_coords(nlat: int, nlon: int) -> np.ndarray:
    lat, lon = sphere_grid(nlat, nlon)
    grid_lat, grid_lon = np.meshgrid(lat, lon, indexing="ij")
    return np.stack([grid_lat.reshape(-1), grid_lon.reshape(-1)], axis=1)


@DATASET_KINDS.register("sphere_field")
def sphere_field(n: int, rng: np.random.Generator, order: int = 3) -> np.ndarray:
    """Smooth low-order fields on a lat-long grid, min-max scaled to [0, 1]."""
    nlat, nlon = DATASET_SHAPES["sphere_field"]
    lat, lon = sphere_grid(nlat, nlon)
    cos_lat, sin_lat = np.cos(lat)[:, None], np.sin(lat)[:, None]
    fields = np.zeros((n, nlat, nlon))
    for i in range(n):
        for m in range(order):
            for k in range(order - m):
                amplitude = rng.standard_normal() / (1.0 + m + k)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                fields[i] += amplitude * cos_lat ** m * sin_lat ** k * np.cos(m * lon[None, :] - phase)
        # the last column is longitude 2 pi, the same meridian as the first
        fields[i][:, -1] = fields[i][:, 0]
        low, high = fields[i].min(), fields[i].max()
        fields[i] = (fields[i] - low) / (high - low) if high > low else np.full((nlat, nlon), 0.5)
    return fields.reshape(n, nlat * nlon)


def gen_toy_dataset(kind: str, n: int, rng: np.random.Generator, **params: Any) -> np.ndarray:
    """
    Draw ``n`` samples of a registered toy distribution.

    Returns:
        (n, d) array.

    Raises:
        OperatorError: If n < 1.
    """
    if n < 1:
        raise OperatorError(f"need at least one sample, got n={n}")
    generator: Callable[..., np.ndarray] = DATASET_KINDS.resolve(kind)
    data = generator(n, rng, **params)
    logger.debug("generated %d samples of %s (dim %d)", n, kind, data.shape[1])
    return data


def save_dataset(path: Union[str, Path], data: np.ndarray, kind: Optional[str] = None) -> None:
    """Write a clean dataset, one ``data/<index>`` tensor per sample."""
    tensors: Dict[str, np.ndarray] = {}
    if kind in DATASET_SHAPES:
        tensors["meta/shape"] = np.array([float(s) for s in DATASET_SHAPES[kind]])
    for i, row in enumerate(np.atleast_2d(data)):
        tensors[f"data/{i:06d}"] = row
    write_container(path, tensors)
    logger.info("wrote %d samples to %s", len(data), path)


def ingest_dataset(path: Union[str, Path]) -> List[np.ndarray]:
    """
    Load every non-metadata tensor of a container, in file order.

    Any container works, so externally prepared signals (e.g. mesh or
    climate fields flattened to vectors) can be used directly.
    """
    tensors = read_container(path)
    return [value for name, value in tensors.items() if not name.startswith("meta/")]


def dataset_shape(path: Union[str, Path]) -> Shape:
    tensors = read_container(path)
    if "meta/shape" in tensors:
        return tuple(int(s) for s in tensors["meta/shape"])
    return None


def stack_dataset(items: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten samples to vectors and stack them into (n, d)."""
    if not items:
        raise OperatorError("dataset is empty")
    flat = [np.asarray(item, dtype=np.float64).reshape(-1) for item in items]
    if len({item.size for item in flat}) != 1:
        raise OperatorError("dataset samples have different sizes")
    return np.stack(flat)
