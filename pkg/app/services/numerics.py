"""
Dense float64 tensors with a reverse-mode tape.

Everything the model computes is expressed with the primitives here. Values are
immutable once produced: optimizers and gradient checks swap in new arrays via
Parameter.assign. Reductions over the view axis (softmax normalizers, attention
contractions, mean pooling) sum their terms in sorted order, so permuting the
views of a set permutes the results bit-for-bit.
"""
import contextlib
import logging
import math
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.utils import constants
from app.utils.error_handler import ContractError, DeterminismError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_state = threading.local()

# op name -> factor applied to the gradients that op sends to its inputs.
# Only the gradcheck negative control writes here.
_backward_corruption: Dict[str, float] = {}


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no tape on this thread inside the block"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5):
    """Scale the gradients one op propagates (test hook)"""
    _backward_corruption[op] = factor
    try:
        yield
    finally:
        _backward_corruption.pop(op, None)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _check_finite(array: np.ndarray, op: str) -> None:
    if not np.isfinite(array).all():
        raise NumericalError(f"non-finite values produced by '{op}'")


class Tensor:
    """Row-major float64 array plus the bookkeeping reverse mode needs"""
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, _op: str = "input"):
        array = np.array(data, dtype=np.float64, order="C")
        _check_finite(array, _op)
        self.data = _frozen(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = _op
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Tuple["Tensor", ...], op: str, backward: BackwardFn) -> "Tensor":
        data = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = _frozen(data)
        out.grad = None
        out._op = op
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ===== INSPECTION =====

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # ===== ARITHMETIC =====

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, -_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other), -self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """Learnable tensor with a gradient of identical shape"""
    __slots__ = ("name",)

    def __init__(self, data: ArrayLike, name: str = ""):
        super().__init__(data, requires_grad=True, _op="parameter")
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: ArrayLike) -> None:
        """Replace the value (same shape); the old array is left untouched"""
        array = np.array(value, dtype=np.float64, order="C")
        if array.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {array.shape} to parameter '{self.name}' of shape {self.shape}")
        _check_finite(array, f"assign:{self.name}")
        self.data = _frozen(array)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, _op="constant")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def ordered_sum(values: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along `axis` independent of the order of the terms and of the memory layout"""
    ordered = np.ascontiguousarray(np.moveaxis(np.sort(values, axis=axis), axis, -1))
    result = ordered.sum(axis=-1)
    return np.expand_dims(result, axis) if keepdims else result


def apply_op(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    """Record a custom primitive; `backward` maps the output gradient to one gradient per parent"""
    return Tensor._from_op(data, tuple(parents), op, backward)


# ===== ELEMENTWISE =====

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(data, (a, b), "add", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: kept activations are divided by the keep probability"""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return Tensor._from_op(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


# ===== SHAPE =====

def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return Tensor._from_op(x.data.T, (x,), "transpose", lambda g: (g.T,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return Tensor._from_op(data, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice [start, stop) of a matrix"""
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"bad column range [{start}, {stop}) for shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[:, start:stop], (x,), "columns", backward)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Row slice [start, stop) of a matrix"""
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"bad row range [{start}, {stop}) for shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[start:stop], (x,), "rows", backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(data, tuple(tensors), "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


# ===== LINEAR ALGEBRA =====

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; row i of the result depends on row i of `a` alone"""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    # one vector-matrix product per row keeps identical rows bitwise identical
    data = np.empty((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        data[i] = np.dot(a.data[i], b.data)
    return Tensor._from_op(data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def pairwise_dot(q: Tensor, k: Tensor) -> Tensor:
    """q @ k.T with entry (i, j) computed from rows q_i and k_j only"""
    if q.data.ndim != 2 or k.data.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"pairwise_dot needs matrices of equal width, got {q.shape} and {k.shape}")
    data = (q.data[:, None, :] * k.data[None, :, :]).sum(axis=-1)
    return Tensor._from_op(data, (q, k), "pairwise_dot", lambda g: (g @ k.data, g.T @ q.data))


def set_matmul(a: Tensor, v: Tensor) -> Tensor:
    """a @ v where the contracted index ranges over set members (order-free sum)"""
    if a.data.ndim != 2 or v.data.ndim != 2 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"set_matmul inner extents differ: {a.shape} x {v.shape}")
    data = ordered_sum(a.data[:, :, None] * v.data[None, :, :], axis=1)
    return Tensor._from_op(data, (a, v), "set_matmul", lambda g: (g @ v.data.T, a.data.T @ g))


# ===== REDUCTIONS =====

def total(x: Tensor) -> Tensor:
    """Sum of every entry, as a scalar tensor"""
    return Tensor._from_op(np.array(x.data.sum()), (x,), "sum", lambda g: (np.full_like(x.data, float(g)),))


def max_rows(x: Tensor) -> Tensor:
    """Column-wise maximum over rows, shape (1, n); ties go to the first row"""
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"max_rows needs a nonempty matrix, got {x.shape}")
    winners = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def backward(g):
        full = np.zeros_like(x.data)
        full[winners, cols] = g[0]
        return (full,)

    return Tensor._from_op(x.data[winners, cols][None, :], (x,), "max_rows", backward)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over rows, shape (1, n), independent of row order"""
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"mean_rows needs a nonempty matrix, got {x.shape}")
    m = x.shape[0]
    data = ordered_sum(x.data, axis=0, keepdims=True) / m
    return Tensor._from_op(data, (x,), "mean_rows", lambda g: (np.repeat(g / m, m, axis=0),))


# ===== NORMALIZERS =====

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction"""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {x.shape}")
    shifted = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = shifted / ordered_sum(shifted, axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(y, (x,), "softmax_rows", backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(ordered_sum(np.exp(shifted), axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (x,), "log_softmax_rows", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = constants.LAYER_NORM_EPS) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale and shift"""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"layer_norm needs a matrix with at least one column, got {x.shape}")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def backward(g):
        dnormed = g * gain.data
        dx = inv_std / n * (
            n * dnormed - dnormed.sum(axis=1, keepdims=True) - normed * (dnormed * normed).sum(axis=1, keepdims=True)
        )
        return dx, (g * normed).sum(axis=0), g.sum(axis=0)

    return Tensor._from_op(out, (x, gain, bias), "layer_norm", backward)


# ===== REVERSE MODE =====

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into every reachable Parameter and consume the tape"""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("the tape behind this loss was already consumed by an earlier backward")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        factor = _backward_corruption.get(node._op)
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if factor is not None:
                parent_grad = parent_grad * factor
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        node._parents = ()
        node._backward = None
        node._consumed = True


def grad_check(closure: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5) -> float:
    """
    Largest relative disagreement between backward() and central differences.

    The error for one coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    The closure must be deterministic (dropout off, fixed inputs).
    """
    with no_grad():
        first = closure().item()
        second = closure().item()
    if first != second:
        raise DeterminismError(f"closure is not deterministic: {first!r} vs {second!r}")

    for p in params:
        p.zero_grad()
    backward(closure())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    worst_at = ""
    with no_grad():
        for p, grads in zip(params, analytic):
            original = p.data
            for index in np.ndindex(original.shape):
                perturbed = original.copy()
                perturbed[index] = original[index] + step
                p.assign(perturbed)
                upper = closure().item()
                perturbed[index] = original[index] - step
                p.assign(perturbed)
                lower = closure().item()
                p.assign(original)
                numeric = (upper - lower) / (2.0 * step)
                exact = float(grads[index])
                error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
                if error > worst:
                    worst, worst_at = error, f"{p.name}{list(index)}"
    logger.debug(f"grad_check worst relative error {worst:.3e} at {worst_at or '-'}")
    return worst


# ===== MODULES =====

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    """Zero-mean uniform with half-width sqrt(6 / (fan_in + fan_out))"""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Container of Parameters, child modules and non-learned buffers"""

    _buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def _own_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    @staticmethod
    def _join(prefix: str, name: str) -> str:
        return f"{prefix}.{name}" if prefix and name else prefix or name

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._own_parameters():
            yield self._join(prefix, name), param
        for name, child in self._children():
            yield from child.named_parameters(self._join(prefix, name))

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, "Module", str]]:
        """(key, owner, attribute) for every buffer"""
        for name in self._buffer_names:
            yield self._join(prefix, name), self, name
        for name, child in self._children():
            yield from child.named_buffers(self._join(prefix, name))

    def state(self) -> Dict[str, np.ndarray]:
        """Flat key -> array map of parameters and buffers"""
        out = {key: p.data for key, p in self.named_parameters()}
        out.update({key: np.asarray(getattr(owner, attr)) for key, owner, attr in self.named_buffers()})
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def name_parameters(self) -> None:
        for key, p in self.named_parameters():
            p.name = key

    def count_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))
