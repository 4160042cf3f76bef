"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a node (inputs + local backward rule) on the tensors
it produces; ``backward()`` replays the recorded graph in reverse topological
order. The tape is single-threaded: one training run owns one graph at a
time. All storage is row-major float64 so that finite-difference gradient
checks are decisive.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """n-dimensional float64 array, optionally tracked by the autodiff tape.

    ``grad`` is populated by ``backward()`` and accumulates additively within
    one backward pass; each new ``backward()`` call starts from zeroed
    gradients for everything reachable from the loss.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Copy of the values, cut loose from the recorded graph."""
        return Tensor(self.data.copy())

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The loss must be a scalar (size 1) and must have at least one recorded
        operation behind it. Gradients of all reachable tensors are zeroed
        first, so repeated calls yield identical results.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._grad_fn is None:
            raise RuntimeError("backward() on a tensor with no recorded operations")

        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_coerce(other))

    def __rsub__(self, other):
        return add(_coerce(other), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def swaplast(self):
        """Transpose the last two axes (batched matrix transpose)."""
        perm = list(range(self.ndim))
        perm[-1], perm[-2] = perm[-2], perm[-1]
        return transpose(self, perm)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor_new(shape: Sequence[int], data, requires_grad: bool = False) -> Tensor:
    """Build a tensor from an explicit shape and flat row-major data.

    Raises ValueError when product(shape) disagrees with the data length.
    """
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ValueError(f"shape {shape} wants {expected} values, got {flat.size}")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def record(out_data: np.ndarray, parents: Iterable[Tensor],
           grad_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create an op output, registering it on the tape when grads are enabled.

    ``grad_fn`` receives the output gradient and must accumulate into the
    parents via ``accumulate``. Ops defined outside this module (conv kernels,
    softmax, ...) use this hook to supply hand-written backward rules.
    """
    parents = tuple(parents)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def accumulate(t: Tensor, grad: np.ndarray) -> None:
    """Add ``grad`` into ``t.grad`` (copying on first touch)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(grad, t.data.shape), dtype=np.float64)
    else:
        t.grad += grad


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive operations ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def grad_fn(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return record(out_data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def grad_fn(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return record(out_data, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    def grad_fn(g):
        accumulate(a, g * c)

    return record(a.data * c, (a,), grad_fn)


def power(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p

    def grad_fn(g):
        accumulate(a, g * p * a.data ** (p - 1.0))

    return record(out_data, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch dims."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        accumulate(a, _unbroadcast(ga, a.shape))
        accumulate(b, _unbroadcast(gb, b.shape))

    return record(out_data, (a, b), grad_fn)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def grad_fn(g):
        accumulate(a, g * (a.data > 0.0))

    return record(out_data, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def grad_fn(g):
        accumulate(a, g * out_data)

    return record(out_data, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def grad_fn(g):
        accumulate(a, g / a.data)

    return record(out_data, (a,), grad_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    out_data = np.maximum(a.data, floor)

    def grad_fn(g):
        accumulate(a, g * (a.data > floor))

    return record(out_data, (a,), grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        accumulate(a, np.broadcast_to(g, a.shape).copy())

    return record(out_data, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def grad_fn(g):
        accumulate(a, g.reshape(a.shape))

    return record(out_data, (a,), grad_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def grad_fn(g):
        accumulate(a, g.transpose(inverse))

    return record(out_data, (a,), grad_fn)


def take(a: Tensor, key) -> Tensor:
    """Indexing/slicing; the backward scatter-adds into the source positions."""
    out_data = a.data[key]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        accumulate(a, full)

    return record(np.array(out_data, copy=True), (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(t, g[tuple(idx)])

    return record(out_data, tensors, grad_fn)


# -- gradient checking -----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must be scalar-valued and deterministic. The error per coordinate is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|); non-finite values in f(x)
    propagate into the returned number.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must be in (0, 1e-3]")
    x.requires_grad = True
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    g_ad = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    g_fd = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(x).data)
            flat[i] = orig - eps
            f_minus = float(f(x).data)
            flat[i] = orig
            fd_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    rel = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(rel))


def grad_check_params(f: Callable[[], Tensor], params: dict[str, Tensor],
                      eps: float = 1e-5) -> dict[str, float]:
    """grad_check for a closure over many parameters; returns error per name."""
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must be in (0, 1e-3]")
    out = f()
    if out.size != 1:
        raise ValueError("grad_check_params needs a scalar-valued function")
    out.backward()
    ad = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
          for name, p in params.items()}

    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            fd = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                fd[i] = (f_plus - f_minus) / (2.0 * eps)
            g_ad = ad[name].reshape(-1)
            rel = np.abs(g_ad - fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(fd))
            errors[name] = float(np.max(rel))
    return errors
