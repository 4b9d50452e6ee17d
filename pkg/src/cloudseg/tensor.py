"""Dense tensors with reverse-mode differentiation on a numpy backend.

Every differentiable operation builds its output through :func:`make_node`,
which records the parents and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order. Only leaf tensors keep a ``.grad`` buffer between
calls; intermediate gradients live for the duration of one backward pass.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{node.op} backward produced gradient {pg.shape} for input {parent.shape}"
                    )
                _check_finite(pg, f"backward of {node.op}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # thin operator sugar over the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_scalar(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record the graph edge if any parent is tracked."""
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def tsum(a: Tensor) -> Tensor:
    return make_node(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),), "sum",
    )


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return make_node(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean",
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return make_node(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b`` for ``a`` of shape M×K and ``b`` of shape K×N."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


@dataclass
class CheckReport:
    errors: list = field(default_factory=list)
    tolerance: float = 1e-6
    label: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors)


def grad_check(op: Callable, inputs: Sequence[Tensor], epsilon: float = 1e-5,
               tolerance: float = 1e-6, reduction: Optional[Callable] = None,
               seed: int = 0, floor: float = 1e-3, label: str = "") -> CheckReport:
    """Compare analytic gradients of ``op`` against central differences.

    ``op`` maps the input tensors to a tensor. A non-scalar output is reduced
    with ``reduction`` when given, otherwise by a dot product with fixed
    random weights (a plain sum would hide errors in ops such as softmax whose
    outputs sum to a constant).

    The error for one input is ``max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = list(inputs)
    weights = {}

    def scalar(*xs):
        out = op(*xs)
        if reduction is not None:
            out = reduction(out)
        if out.size == 1:
            return out
        if out.shape not in weights:
            rng = np.random.default_rng(seed)
            weights[out.shape] = rng.uniform(-1.0, 1.0, out.shape).astype(out.dtype)
        return tsum(mul(out, Tensor(weights[out.shape])))

    for x in inputs:
        # perturbation below writes through a flat view, so it must not be a copy
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    scalar(*inputs).backward()
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    report = CheckReport(tolerance=tolerance, label=label)
    with no_grad():
        for idx, x in enumerate(inputs):
            flat = x.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                try:
                    fp = scalar(*inputs).item()
                    flat[i] = orig - epsilon
                    fm = scalar(*inputs).item()
                except NumericError as exc:
                    raise NumericError(f"non-finite value while perturbing input {idx}") from exc
                finally:
                    flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite value while perturbing input {idx}")
                numeric[i] = (fp - fm) / (2.0 * epsilon)
            a = analytic[idx].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            report.errors.append(float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0)
    return report
