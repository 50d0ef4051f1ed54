"""
Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. Every operation on a tensor that requires a
gradient records its parents and a local vector-Jacobian rule; ``backward``
walks the recorded graph in reverse topological order and accumulates
gradients on the leaves.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import DimensionError, GradientError

logger = logging.getLogger(__name__)

_grad_mode = threading.local()

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation and sampling)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def is_grad_enabled() -> bool:
    # Per thread; a thread that never entered no_grad records graphs
    return getattr(_grad_mode, "enabled", True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # Sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value: "ArrayLike") -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        """
        Create a leaf tensor.

        Args:
            data: Anything numpy can turn into a float64 array. The values are copied.
            requires_grad: Whether backward should populate ``grad`` for this tensor.
            name: Optional label used in logs and checkpoints.
        """
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = ""
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out.op = op
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- inspection --------------------------------------------------------

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
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other: "ArrayLike") -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(grad):
            return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, "add")

    def __radd__(self, other: "ArrayLike") -> "Tensor":
        return _as_tensor(other) + self

    def __sub__(self, other: "ArrayLike") -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(grad):
            return _unbroadcast(grad, a_shape), _unbroadcast(-grad, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other: "ArrayLike") -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other: "ArrayLike") -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(grad):
            return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, "mul")

    def __rmul__(self, other: "ArrayLike") -> "Tensor":
        return _as_tensor(other) * self

    def __truediv__(self, other: "ArrayLike") -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(grad):
            return (
                _unbroadcast(grad / b, a.shape),
                _unbroadcast(-grad * a / (b * b), b.shape),
            )

        return Tensor._from_op(a / b, (self, other), backward, "div")

    def __rtruediv__(self, other: "ArrayLike") -> "Tensor":
        return _as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda grad: (-grad,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("Only constant exponents are supported")
        a = self.data

        def backward(grad):
            return (grad * exponent * a ** (exponent - 1),)

        return Tensor._from_op(a**exponent, (self,), backward, "pow")

    def __matmul__(self, other: "ArrayLike") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(grad):
            full = np.zeros(shape)
            np.add.at(full, index, grad)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward, "getitem")

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(grad):
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            return (np.broadcast_to(grad, shape),)

        return Tensor._from_op(
            self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape

        def backward(grad):
            return (grad.reshape(original),)

        return Tensor._from_op(self.data.reshape(shape), (self,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))

        def backward(grad):
            return (grad.transpose(inverse),)

        return Tensor._from_op(self.data.transpose(axes), (self,), backward, "transpose")

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
        return self.transpose(tuple(axes))

    # -- elementwise functions ---------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda grad: (grad * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda grad: (grad / a,), "log")

    def sqrt(self) -> "Tensor":
        return self**0.5

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(
            self.data * mask, (self,), lambda grad: (grad * mask,), "relu"
        )

    def gelu(self) -> "Tensor":
        """Exact GELU, x * Phi(x)."""
        a = self.data
        cdf = 0.5 * (1.0 + erf(a / _SQRT_2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
        return Tensor._from_op(
            a * cdf, (self,), lambda grad: (grad * (cdf + a * pdf),), "gelu"
        )

    def clamp_min(self, floor: float) -> "Tensor":
        mask = self.data > floor
        return Tensor._from_op(
            np.maximum(self.data, floor), (self,), lambda grad: (grad * mask,), "clamp_min"
        )

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(grad):
            return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)

        return Tensor._from_op(out, (self,), backward, "softmax")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        probs = np.exp(out)

        def backward(grad):
            return (grad - probs * grad.sum(axis=axis, keepdims=True),)

        return Tensor._from_op(out, (self,), backward, "log_softmax")

    # -- differentiation ---------------------------------------------------

    def backward(self):
        """
        Populate ``grad`` on every tensor in this scalar's graph.

        Raises:
            GradientError: if the tensor is not a scalar, or its graph was
                already differentiated.
        """
        if self.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GradientError(
                "backward was already called on this graph; rebuild the forward pass"
            )
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")

        graph = GradGraph.from_output(self)
        pending = {id(self): np.ones(self.shape)}
        for node in reversed(graph.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                # Leaf: accumulate across graphs until zero_grad
                node.grad = np.array(grad) if node.grad is None else node.grad + grad
                continue
            node.grad = grad
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        self._consumed = True
        logger.debug(f"backward swept {len(graph.nodes)} nodes")


ArrayLike = Union[float, int, np.ndarray, Tensor]


class GradGraph:
    """The recorded operations leading to one output, in topological order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "GradGraph":
        order: List[Tensor] = []
        visited = set()
        # Iterative post-order so deep graphs do not hit the recursion limit
        stack = [(output, 0)]
        while stack:
            node, index = stack.pop()
            if index == 0:
                if id(node) in visited:
                    continue
                visited.add(id(node))
            if index < len(node._parents):
                stack.append((node, index + 1))
                parent = node._parents[index]
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, 0))
            else:
                order.append(node)
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes, batched over leading axes.

    Raises:
        DimensionError: if either operand has fewer than two axes or the inner
            dimensions disagree.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(grad):
        return (
            _unbroadcast(grad @ np.swapaxes(y, -1, -2), x.shape),
            _unbroadcast(np.swapaxes(x, -1, -2) @ grad, y.shape),
        )

    return Tensor._from_op(x @ y, (a, b), backward, "matmul")


def softmax_rows(x: ArrayLike) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by subtracting each row's max."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return x.softmax(axis=-1)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def _shift_array(values: np.ndarray, offset: int, axis: int) -> np.ndarray:
    out = np.zeros_like(values)
    length = values.shape[axis]
    if abs(offset) >= length:
        return out
    src = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    if offset > 0:
        src[axis] = slice(0, length - offset)
        dst[axis] = slice(offset, length)
    elif offset < 0:
        src[axis] = slice(-offset, length)
        dst[axis] = slice(0, length + offset)
    out[tuple(dst)] = values[tuple(src)]
    return out


def shift(x: Tensor, offset: int, axis: int = -2) -> Tensor:
    """Move values ``offset`` steps along ``axis``, filling vacated slots with zeros."""
    return Tensor._from_op(
        _shift_array(x.data, offset, axis),
        (x,),
        lambda grad: (_shift_array(grad, -offset, axis),),
        "shift",
    )
