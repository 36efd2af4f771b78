"""
ampost - Tensor Core

Dense float64 tensors with define-by-run reverse-mode differentiation.

Every arithmetic operation goes through ``build_op``, which looks the op-kind
up in ``OP_KINDS``, runs its forward, rejects non-finite output and, when any
input participates in differentiation, links the result to its parents. The
graph is rebuilt on every call; ``backward`` walks it once in reverse
topological order.

This module also holds the parameter store with its Adam moments, the dense
network helpers shared by the score network and the flow, and the seeded
counter-based RNG used for all stochasticity.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError
from .registry import Registry

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class Tensor:
    """
    A dense double-precision array that may participate in differentiation.

    Leaves that require gradients must be named; ``backward`` reports their
    gradients under that name. Tensors are never mutated after construction.

    Attributes:
        data: The underlying float64 array
        requires_grad: Whether gradients flow to or through this tensor
        name: Leaf name used as the key of the gradient map
    """

    __slots__ = ("data", "requires_grad", "name", "kind", "parents", "attrs")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        arr = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        _check_finite(arr, name or "tensor")
        if requires_grad and not name:
            raise GraphError("a leaf that requires grad needs a name")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.kind: Optional[str] = None
        self.parents: Tuple["Tensor", ...] = ()
        self.attrs: Dict[str, Any] = {}

    @classmethod
    def _from_op(cls, data: np.ndarray, kind: str, parents: Tuple["Tensor", ...], attrs: Dict[str, Any]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = bool(parents)
        out.name = None
        out.kind = kind
        out.parents = parents
        out.attrs = attrs
        return out

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.kind is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a constant copy that cuts the gradient path."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad" if self.requires_grad else ""
        label = self.name or self.kind or "leaf"
        return f"Tensor({label}, shape={self.shape}{grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        return build_op("add", [self, other])

    def __radd__(self, other: Any) -> "Tensor":
        return build_op("add", [other, self])

    def __sub__(self, other: Any) -> "Tensor":
        return build_op("sub", [self, other])

    def __rsub__(self, other: Any) -> "Tensor":
        return build_op("sub", [other, self])

    def __mul__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return build_op("scale", [self], c=float(other))
        return build_op("mul", [self, other])

    def __rmul__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return build_op("scale", [self], c=float(other))
        return build_op("mul", [other, self])

    def __truediv__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return build_op("scale", [self], c=1.0 / float(other))
        return build_op("div", [self, other])

    def __rtruediv__(self, other: Any) -> "Tensor":
        return build_op("div", [other, self])

    def __neg__(self) -> "Tensor":
        return build_op("scale", [self], c=-1.0)

    def __matmul__(self, other: Any) -> "Tensor":
        return build_op("matmul", [self, other])

    def __rmatmul__(self, other: Any) -> "Tensor":
        return build_op("matmul", [other, self])

    def exp(self) -> "Tensor":
        return build_op("exp", [self])

    def log(self) -> "Tensor":
        return build_op("log", [self])

    def tanh(self) -> "Tensor":
        return build_op("tanh", [self])

    def relu(self) -> "Tensor":
        return build_op("relu", [self])

    def square(self) -> "Tensor":
        return build_op("square", [self])

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return build_op("sum", [self], axis=axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return build_op("mean", [self], axis=axis)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return build_op("reshape", [self], shape=tuple(shape))

    def scale(self, c: float) -> "Tensor":
        return build_op("scale", [self], c=float(c))


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants as non-differentiable tensors; tensors pass through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Op kinds
# ---------------------------------------------------------------------------

class OpKind(ABC):
    """
    Forward and adjoint rules of one primitive.

    Subclasses register themselves with ``@OP_KINDS.register(name)``.
    """

    arity: Optional[int] = 1

    def check(self, arrays: Sequence[np.ndarray], attrs: Dict[str, Any]) -> None:
        """Raise ShapeError when inputs do not conform."""
        if self.arity is not None and len(arrays) != self.arity:
            raise ShapeError(f"{type(self).__name__} takes {self.arity} inputs, got {len(arrays)}")

    @abstractmethod
    def forward(self, arrays: Sequence[np.ndarray], **attrs: Any) -> np.ndarray:
        """Compute the output value."""

    @abstractmethod
    def backward(self, grad: np.ndarray, arrays: Sequence[np.ndarray], out: np.ndarray,
                 **attrs: Any) -> Tuple[Optional[np.ndarray], ...]:
        """Map the output adjoint to one adjoint per input."""


OP_KINDS = Registry("op-kind", base=OpKind, instantiate=True)


class _Elementwise(OpKind):
    arity = 2

    def check(self, arrays, attrs):
        super().check(arrays, attrs)
        try:
            np.broadcast_shapes(arrays[0].shape, arrays[1].shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {arrays[0].shape} with {arrays[1].shape}") from None


@OP_KINDS.register("add")
class AddOp(_Elementwise):
    def forward(self, arrays, **attrs):
        return arrays[0] + arrays[1]

    def backward(self, grad, arrays, out, **attrs):
        return _unbroadcast(grad, arrays[0].shape), _unbroadcast(grad, arrays[1].shape)


@OP_KINDS.register("sub")
class SubOp(_Elementwise):
    def forward(self, arrays, **attrs):
        return arrays[0] - arrays[1]

    def backward(self, grad, arrays, out, **attrs):
        return _unbroadcast(grad, arrays[0].shape), _unbroadcast(-grad, arrays[1].shape)


@OP_KINDS.register("mul")
class MulOp(_Elementwise):
    def forward(self, arrays, **attrs):
        return arrays[0] * arrays[1]

    def backward(self, grad, arrays, out, **attrs):
        a, b = arrays
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


@OP_KINDS.register("div")
class DivOp(_Elementwise):
    def forward(self, arrays, **attrs):
        return arrays[0] / arrays[1]

    def backward(self, grad, arrays, out, **attrs):
        a, b = arrays
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


@OP_KINDS.register("matmul")
class MatmulOp(OpKind):
    """Matrix product for 1-D/2-D operands with numpy's vector promotion."""

    arity = 2

    def check(self, arrays, attrs):
        super().check(arrays, attrs)
        a, b = arrays
        if not (1 <= a.ndim <= 2 and 1 <= b.ndim <= 2):
            raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def forward(self, arrays, **attrs):
        return arrays[0] @ arrays[1]

    def backward(self, grad, arrays, out, **attrs):
        a, b = arrays
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = b if b.ndim == 2 else b[:, None]
        g2 = grad.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb


@OP_KINDS.register("exp")
class ExpOp(OpKind):
    def forward(self, arrays, **attrs):
        return np.exp(arrays[0])

    def backward(self, grad, arrays, out, **attrs):
        return (grad * out,)


@OP_KINDS.register("log")
class LogOp(OpKind):
    def forward(self, arrays, **attrs):
        return np.log(arrays[0])

    def backward(self, grad, arrays, out, **attrs):
        return (grad / arrays[0],)


@OP_KINDS.register("tanh")
class TanhOp(OpKind):
    def forward(self, arrays, **attrs):
        return np.tanh(arrays[0])

    def backward(self, grad, arrays, out, **attrs):
        return (grad * (1.0 - out * out),)


@OP_KINDS.register("relu")
class ReluOp(OpKind):
    """relu with subgradient 0 at 0."""

    def forward(self, arrays, **attrs):
        return np.maximum(arrays[0], 0.0)

    def backward(self, grad, arrays, out, **attrs):
        return (grad * (arrays[0] > 0.0),)


@OP_KINDS.register("square")
class SquareOp(OpKind):
    def forward(self, arrays, **attrs):
        return arrays[0] * arrays[0]

    def backward(self, grad, arrays, out, **attrs):
        return (2.0 * arrays[0] * grad,)


@OP_KINDS.register("scale")
class ScaleOp(OpKind):
    def forward(self, arrays, c: float = 1.0, **attrs):
        return arrays[0] * c

    def backward(self, grad, arrays, out, c: float = 1.0, **attrs):
        return (grad * c,)


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is not None:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape).copy()


@OP_KINDS.register("sum")
class SumOp(OpKind):
    def check(self, arrays, attrs):
        super().check(arrays, attrs)
        axis = attrs.get("axis")
        if axis is not None and not -arrays[0].ndim <= axis < arrays[0].ndim:
            raise ShapeError(f"axis {axis} out of range for shape {arrays[0].shape}")

    def forward(self, arrays, axis: Optional[int] = None, **attrs):
        return np.asarray(arrays[0].sum(axis=axis))

    def backward(self, grad, arrays, out, axis: Optional[int] = None, **attrs):
        return (_expand_reduced(grad, arrays[0].shape, axis),)


@OP_KINDS.register("mean")
class MeanOp(SumOp):
    def forward(self, arrays, axis: Optional[int] = None, **attrs):
        return np.asarray(arrays[0].mean(axis=axis))

    def backward(self, grad, arrays, out, axis: Optional[int] = None, **attrs):
        count = arrays[0].size if axis is None else arrays[0].shape[axis]
        return (_expand_reduced(grad, arrays[0].shape, axis) / count,)


@OP_KINDS.register("concat")
class ConcatOp(OpKind):
    arity = None

    def check(self, arrays, attrs):
        axis = attrs.get("axis", 0)
        if not arrays:
            raise ShapeError("concat needs at least one input")
        ref = list(arrays[0].shape)
        for arr in arrays[1:]:
            other = list(arr.shape)
            if len(other) != len(ref) or any(i != axis % len(ref) and o != r
                                             for i, (o, r) in enumerate(zip(other, ref))):
                raise ShapeError(f"cannot concat {arrays[0].shape} with {arr.shape} on axis {axis}")

    def forward(self, arrays, axis: int = 0, **attrs):
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad, arrays, out, axis: int = 0, **attrs):
        bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return tuple(np.split(grad, bounds, axis=axis))


@OP_KINDS.register("split")
class SplitOp(OpKind):
    """One piece [start, stop) of a split along ``axis``."""

    def check(self, arrays, attrs):
        super().check(arrays, attrs)
        axis, start, stop = attrs.get("axis", 0), attrs["start"], attrs["stop"]
        if not 0 <= start < stop <= arrays[0].shape[axis]:
            raise ShapeError(f"split [{start}, {stop}) out of range for axis of size {arrays[0].shape[axis]}")

    def forward(self, arrays, start: int = 0, stop: int = 0, axis: int = 0, **attrs):
        index = [slice(None)] * arrays[0].ndim
        index[axis] = slice(start, stop)
        return arrays[0][tuple(index)].copy()

    def backward(self, grad, arrays, out, start: int = 0, stop: int = 0, axis: int = 0, **attrs):
        full = np.zeros_like(arrays[0])
        index = [slice(None)] * arrays[0].ndim
        index[axis] = slice(start, stop)
        full[tuple(index)] = grad
        return (full,)


@OP_KINDS.register("reshape")
class ReshapeOp(OpKind):
    def check(self, arrays, attrs):
        super().check(arrays, attrs)
        shape = attrs["shape"]
        if int(np.prod(shape)) != arrays[0].size:
            raise ShapeError(f"cannot reshape {arrays[0].shape} to {shape}")

    def forward(self, arrays, shape: Tuple[int, ...] = (), **attrs):
        return arrays[0].reshape(shape).copy()

    def backward(self, grad, arrays, out, **attrs):
        return (grad.reshape(arrays[0].shape),)


@OP_KINDS.register("gaussian_logpdf")
class GaussianLogpdfOp(OpKind):
    """Standard-normal log-density summed over the last axis."""

    def forward(self, arrays, **attrs):
        x = arrays[0]
        return np.asarray(-0.5 * (x * x).sum(axis=-1) - 0.5 * x.shape[-1] * LOG_2PI)

    def backward(self, grad, arrays, out, **attrs):
        return (-arrays[0] * np.expand_dims(grad, -1),)


def build_op(kind: str, inputs: Sequence[TensorLike], **attrs: Any) -> Tensor:
    """
    Evaluate one primitive and record it in the graph when needed.

    Args:
        kind: Registered op-kind name
        inputs: Operand tensors (constants are wrapped)
        **attrs: Op attributes (axis, shape, scale factor, split bounds)

    Returns:
        The output tensor; it carries parent links when any input requires grad.

    Raises:
        ShapeError: If input shapes do not conform for ``kind``.
        NonFiniteError: If the forward value contains NaN or Inf.
    """
    op = OP_KINDS.resolve(kind)
    tensors = tuple(as_tensor(value) for value in inputs)
    arrays = [t.data for t in tensors]
    op.check(arrays, attrs)
    with np.errstate(all="ignore"):
        out = np.asarray(op.forward(arrays, **attrs), dtype=np.float64)
    _check_finite(out, f"output of {kind}")
    parents = tensors if any(t.requires_grad for t in tensors) else ()
    return Tensor._from_op(out, kind, parents, dict(attrs))


# convenience wrappers used across the package

def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    return build_op("concat", list(tensors), axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Split ``x`` into consecutive pieces of the given sizes along ``axis``."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of size {x.shape[axis]}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(build_op("split", [x], start=start, stop=start + size, axis=axis))
        start += size
    return pieces


def gaussian_logpdf(x: TensorLike) -> Tensor:
    return build_op("gaussian_logpdf", [x])


# ---------------------------------------------------------------------------
# Graph and backward pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphNode:
    """One recorded value: its op-kind (None for leaves) and parent ids."""

    id: int
    kind: Optional[str]
    parents: Tuple[int, ...]
    value: np.ndarray


class Graph:
    """
    The differentiable subgraph reachable from a root, in topological order.

    Attributes:
        tensors: Reachable tensors, every parent before its children
        nodes: GraphNode view of ``tensors`` with integer ids
    """

    def __init__(self, tensors: List[Tensor]) -> None:
        self.tensors = tensors
        index = {id(t): i for i, t in enumerate(tensors)}
        self.nodes = [
            GraphNode(i, t.kind, tuple(index[id(p)] for p in t.parents if id(p) in index), t.data)
            for i, t in enumerate(tensors)
        ]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        """Topologically sort everything ``root`` depends on through grad-enabled paths."""
        order: List[Tensor] = []
        state: Dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise GraphError("cycle detected in autodiff graph")
            state[key] = 1
            stack.append((node, True))
            for parent in node.parents:
                if not parent.requires_grad:
                    continue
                if state.get(id(parent)) == 1:
                    raise GraphError("cycle detected in autodiff graph")
                if state.get(id(parent)) != 2:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)


Gradients = Dict[str, Tensor]


def backward(root: Tensor, graph: Optional[Graph] = None) -> Gradients:
    """
    Reverse-mode sweep from a scalar root.

    Args:
        root: Scalar tensor to differentiate
        graph: Precomputed graph of ``root`` (built on demand when omitted)

    Returns:
        Mapping leaf name -> d root / d leaf for every grad-enabled named leaf
        reachable from ``root``. Leaves sharing a name have their gradients summed.

    Raises:
        GraphError: If ``root`` is not scalar or the graph has a cycle.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    graph = graph or Graph.from_root(root)
    adjoints: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result: Dict[str, np.ndarray] = {}
    for tensor in reversed(graph.tensors):
        grad = adjoints.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.is_leaf:
            if tensor.name in result:
                result[tensor.name] = result[tensor.name] + grad
            else:
                result[tensor.name] = grad
            continue
        op = OP_KINDS.resolve(tensor.kind)
        parent_grads = op.backward(grad, [p.data for p in tensor.parents], tensor.data, **tensor.attrs)
        for parent, parent_grad in zip(tensor.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = adjoints[key] + parent_grad if key in adjoints else parent_grad
    return {name: Tensor(value) for name, value in result.items()}


def finite_diff_gradient(f: Callable[[Tensor], Union[Tensor, float]], x: TensorLike, h: float = 1e-5) -> Tensor:
    """
    Central-difference gradient estimate of a scalar function.

    Args:
        f: Scalar function of a tensor
        x: Point of evaluation
        h: Step size, must be positive

    Returns:
        Tensor of the same shape as ``x``.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    base = as_tensor(x).data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        f_plus = _scalar(f(Tensor(plus.reshape(base.shape))))
        f_minus = _scalar(f(Tensor(minus.reshape(base.shape))))
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def _scalar(value: Union[Tensor, float]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamStore:
    """
    Named parameter arrays with their Adam moments.

    A store is an immutable snapshot; ``adam_step`` returns a new one.

    Attributes:
        params: name -> parameter array
        m: name -> first moment, same shape as the parameter
        v: name -> second moment, same shape as the parameter
        step: Number of optimizer steps taken
    """

    params: Mapping[str, np.ndarray]
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray]) -> "ParamStore":
        arrays = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
        return cls(
            params=arrays,
            m={name: np.zeros_like(value) for name, value in arrays.items()},
            v={name: np.zeros_like(value) for name, value in arrays.items()},
        )

    def tensors(self, trainable: bool = True) -> Dict[str, Tensor]:
        """Wrap parameters as leaves; frozen stores give constant tensors."""
        return {name: Tensor(value, requires_grad=trainable, name=name) for name, value in self.params.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def keys(self) -> Iterable[str]:
        return self.params.keys()

    def n_parameters(self) -> int:
        return int(sum(value.size for value in self.params.values()))


def adam_step(store: ParamStore, grads: Mapping[str, Union[Tensor, np.ndarray]], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """
    One bias-corrected Adam update on the parameters covered by ``grads``.

    Args:
        store: Current parameter snapshot
        grads: Gradient per parameter name (a subset of the store's keys)
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator stabilizer

    Returns:
        A new ParamStore; parameters without a gradient are carried over unchanged.

    Raises:
        ShapeError: If a gradient does not match its parameter's shape or names
                    an unknown parameter.
    """
    step = store.step + 1
    params = dict(store.params)
    m = dict(store.m)
    v = dict(store.v)
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter '{name}'")
        g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter '{name}' shape {params[name].shape}")
        m[name] = beta1 * m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v[name] = beta2 * v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ParamStore(params=params, m=m, v=v, step=step)


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, Tensor], max_norm: float) -> Tuple[Gradients, float]:
    """Rescale ``grads`` so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: Tensor(g.data * factor) for name, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------

def mlp_init(rng: np.random.Generator, prefix: str, sizes: Sequence[int],
             zero_last: bool = False) -> Dict[str, np.ndarray]:
    """
    Glorot-uniform weights and zero biases for a dense stack.

    Args:
        rng: Random generator
        prefix: Parameter-name prefix, e.g. ``"score"``
        sizes: Layer widths including input and output
        zero_last: Zero the output layer so the network starts at output 0

    Returns:
        ``{prefix}/l{i}/W`` (in x out) and ``{prefix}/l{i}/b`` arrays.
    """
    params: Dict[str, np.ndarray] = {}
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and i == n_layers - 1:
            weight = np.zeros((fan_in, fan_out))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}/l{i}/W"] = weight
        params[f"{prefix}/l{i}/b"] = np.zeros(fan_out)
    return params


def mlp_apply(params: Mapping[str, Tensor], prefix: str, n_layers: int, x: Tensor,
              activation: str = "tanh") -> Tensor:
    """Apply a dense stack; ``activation`` between layers, linear output."""
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}/l{i}/W"] + params[f"{prefix}/l{i}/b"]
        if i < n_layers - 1:
            h = build_op(activation, [h])
    return h


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; equal seeds give bit-identical streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(rng: np.random.Generator, n: int) -> List[np.random.Generator]:
    """Split ``rng`` into ``n`` independent child streams."""
    return list(rng.spawn(n))
