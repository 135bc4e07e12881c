"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a `TapeNode` on its output. `Tensor.backward` orders the
recorded nodes into a `ComputationTape` and runs their local gradient rules in reverse,
accumulating into the `grad` buffer of leaf tensors. Tapes are built per backward call, so
independent graphs may be differentiated on different threads.
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .exceptions import ContractError, DegenerateInputError, DomainError, NumericalError, ShapeError

NORM_EPS = 1e-12

_tensor_ids = itertools.count()
_grad_mode = threading.local()

GradRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeNode:
    op: str
    inputs: Tuple["Tensor", ...]
    output_id: int
    rule: GradRule

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class ComputationTape:
    """Recorded operations in topological order: every node's inputs come before it."""

    def __init__(self, tensors: List["Tensor"]):
        self.tensors = tensors

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def nodes(self) -> List[TapeNode]:
        return [t._node for t in self.tensors]

    @classmethod
    def from_output(cls, output: "Tensor") -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if tensor._node is None or tensor.id in visited:
                continue
            visited.add(tensor.id)
            stack.append((tensor, True))
            for parent in tensor._node.inputs:
                if parent._node is not None and parent.id not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run(self, output: "Tensor", seed: np.ndarray) -> None:
        pending: Dict[int, np.ndarray] = {output.id: seed}
        for tensor in reversed(self.tensors):
            grad_out = pending.pop(tensor.id, None)
            if grad_out is None:
                continue
            node = tensor._node
            for parent, grad_in in zip(node.inputs, node.rule(grad_out)):
                if grad_in is None or not parent.requires_grad:
                    continue
                grad_in = _unbroadcast(np.asarray(grad_in, dtype=np.float64), parent.shape)
                if parent._node is None:
                    parent.grad = grad_in.copy() if parent.grad is None else parent.grad + grad_in
                elif parent.id in pending:
                    pending[parent.id] = pending[parent.id] + grad_in
                else:
                    pending[parent.id] = grad_in


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Operations inside the block record no tape nodes (per thread)."""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """Row-major float64 array with optional gradient tracking.

    Args:
        data: array-like payload, copied and cast to float64.
        requires_grad (bool, optional): track gradients for this tensor. Defaults to False.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "Tensor construction")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_tensor_ids)
        self._node: Optional[TapeNode] = None

    @staticmethod
    def lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @classmethod
    def _from_op(cls, data: np.ndarray, inputs: Sequence["Tensor"], rule: GradRule, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        out.grad = None
        out.id = next(_tensor_ids)
        out._node = TapeNode(op, tuple(inputs), out.id, rule) if out.requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> ComputationTape:
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones(self.shape)
        seed = np.asarray(grad, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} does not match output shape {self.shape}")
        if self._node is None:
            if self.requires_grad:
                self.grad = seed.copy() if self.grad is None else self.grad + seed
            return ComputationTape([])
        tape = ComputationTape.from_output(self)
        tape.run(self, seed)
        return tape

    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        return Tensor._from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        return Tensor._from_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other) -> "Tensor":
        return Tensor.lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        a, b = self.data, other.data
        return Tensor._from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        a, b = self.data, other.data
        if np.any(b == 0):
            raise DomainError("division by zero")
        return Tensor._from_op(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor.lift(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        # basic indexing selects every element at most once
        basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

        def rule(g):
            full = np.zeros(shape)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), rule, "getitem")

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose needs a 2-d tensor, got shape {self.shape}")
        return Tensor._from_op(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    # reductions and elementwise maps

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), rule, "sum")

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        if count == 0:
            raise DomainError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0):
            raise DomainError("log of a non-positive value")
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        # subgradient 0 at the kink
        return Tensor._from_op(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")


def as_tensor(value) -> Tensor:
    return Tensor.lift(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 1-d or 2-d tensors; gradients flow to both inputs."""
    a, b = Tensor.lift(a), Tensor.lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-d and 2-d tensors, got {a.shape} and {b.shape}")
    a2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    b2 = b.data.reshape(-1, 1) if b.ndim == 1 else b.data
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out2 = a2 @ b2
    # 1-d operands lose their axis in the result, as in numpy
    out_shape = a.shape[:-1] + b.shape[1:]
    a_grad, b_grad = a.requires_grad, b.requires_grad

    def rule(g):
        g2 = g.reshape(out2.shape)
        return (
            (g2 @ b2.T).reshape(a.shape) if a_grad else None,
            (a2.T @ g2).reshape(b.shape) if b_grad else None,
        )

    return Tensor._from_op(out2.reshape(out_shape), (a, b), rule, "matmul")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log Σ exp(x) along `axis`, shifted by the maximum so no intermediate overflows."""
    x = Tensor.lift(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DomainError(f"logsumexp over an empty axis (shape {x.shape}, axis {axis})")
    out_keep = special.logsumexp(x.data, axis=axis, keepdims=True)
    weights = np.exp(x.data - out_keep)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return Tensor._from_op(out, (x,), rule, "logsumexp")


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along `axis`. The gradient at a zero vector is taken as zero."""
    x = Tensor.lift(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    direction = np.where(n > 0, x.data / safe, 0.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * direction,)

    return Tensor._from_op(out, (x,), rule, "norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale `x` to unit L2 norm along `axis`.

    Raises:
        DegenerateInputError: if any norm is at most NORM_EPS.
    """
    x = Tensor.lift(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(n <= NORM_EPS):
        raise DegenerateInputError(f"cannot normalize a vector with norm <= {NORM_EPS}")
    y = x.data / n

    def rule(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,)

    return Tensor._from_op(y, (x,), rule, "l2_normalize")


def relu(x: Tensor) -> Tensor:
    return Tensor.lift(x).relu()


def exp(x: Tensor) -> Tensor:
    return Tensor.lift(x).exp()


def log(x: Tensor) -> Tensor:
    return Tensor.lift(x).log()


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor.lift(t) for t in tensors]
    if not tensors:
        raise DomainError("stack of an empty sequence")
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, rule, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor.lift(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {err}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, rule, "concat")


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], h: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    The relative error of a coordinate is |analytic - numeric| / max(1, |analytic|).

    Args:
        f: scalar-valued function of one tensor built from differentiable operations.
        x: point to check at.
        h (float, optional): finite-difference step. Defaults to 1e-5.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    point = Tensor(base, requires_grad=True)
    out = f(point)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    out.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus, minus = base.copy().reshape(-1), base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        flat[i] = (f_plus - f_minus) / (2 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
