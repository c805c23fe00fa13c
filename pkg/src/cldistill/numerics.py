"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its result eagerly with numpy and, when any input takes
part in differentiation, remembers its parents and a local vector-Jacobian
product. ``backward`` linearises that graph into a :class:`Tape` and walks
it in reverse.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "tensor",
    "concat",
    "where",
    "maximum",
    "minimum",
    "log_softmax",
    "softmax_temp",
    "kl_divergence",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction helpers ------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, vjp, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        x, y = self.data, other.data
        return Tensor._result(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        x, y = self.data, other.data
        return Tensor._result(
            x / y,
            (self, other),
            lambda g: (
                _unbroadcast(g / y, x.shape),
                _unbroadcast(-g * x / (y * y), y.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        p = float(exponent)
        return Tensor._result(
            x**p, (self,), lambda g: (g * p * x ** (p - 1.0),), "pow"
        )

    def __matmul__(self, other) -> "Tensor":
        other = _lift(other)
        x, y = self.data, other.data
        if y.ndim != 2:
            raise ValueError("right operand of matmul must be a matrix")
        if x.shape[-1] != y.shape[0]:
            raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")

        def vjp(g):
            gx = g @ y.T
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gy

        return Tensor._result(x @ y, (self, other), vjp, "matmul")

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ValueError("T is defined for matrices only")
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data.astype(np.int64)
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.array(self.data[index]), (self,), vjp, "index")

    # -- reductions and reshaping -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), vjp, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise ValueError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    # -- elementwise functions ----------------------------------------------
    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0):
            raise NonFiniteError("log of a non-positive value")
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def abs(self) -> "Tensor":
        s = np.sign(self.data)
        return Tensor._result(np.abs(self.data), (self,), lambda g: (g * s,), "abs")


def _not_scalar():
    raise ValueError("item() requires a single-element tensor")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_lift(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return grads

    return Tensor._result(
        np.concatenate([p.data for p in parts], axis=axis), parts, vjp, "concat"
    )


def where(cond, a, b) -> Tensor:
    """Select elementwise from ``a`` where ``cond`` holds, else ``b``."""
    mask = np.asarray(_as_array(cond), dtype=bool)
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), sa),
            _unbroadcast(np.where(mask, 0.0, g), sb),
        ),
        "where",
    )


def maximum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    # ties route the gradient to the first operand
    return where(a.data >= b.data, a, b)


def minimum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return where(a.data <= b.data, a, b)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-softmax along ``axis``."""
    shift = logits.data.max(axis=axis, keepdims=True)
    z = logits - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax_temp(logits, T: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax ``SM(z / T)`` along ``axis``."""
    logits = _lift(logits)
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ValueError("softmax of empty logits")
    return log_softmax(logits * (1.0 / T), axis=axis).exp()


def kl_divergence(p, q) -> float:
    """KL(p || q) for probability vectors, with 0 * ln(0 / q) taken as 0."""
    p = np.asarray(_as_array(p), dtype=np.float64)
    q = np.asarray(_as_array(q), dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("q must be positive wherever p is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


class Tape:
    """Differentiable ops reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self._ids = {id(n) for n in nodes}

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def require(self, leaves: Iterable[Tensor]) -> None:
        for leaf in leaves:
            if leaf not in self:
                raise KeyError("leaf is not on the tape")


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    elif loss not in tape:
        raise KeyError("loss was not produced on this tape")
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    return tape


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    analytic: np.ndarray | None = None,
) -> float:
    """Max relative gap between the analytic gradient and central differences.

    ``analytic`` overrides the gradient obtained from :func:`backward`, which
    is how a deliberately wrong gradient can be fed through the detector.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x0 = np.array(_as_array(x), dtype=np.float64)
    if analytic is None:
        leaf = Tensor(x0, requires_grad=True)
        backward(f(leaf))
        analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    analytic = np.asarray(analytic, dtype=np.float64)

    def probe(arr):
        try:
            value = f(Tensor(arr)).item()
        except NonFiniteError as exc:
            raise ValueError("function is non-finite at a probe point") from exc
        if not np.isfinite(value):
            raise ValueError("function is non-finite at a probe point")
        return value

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        up = x0.copy().reshape(-1)
        dn = x0.copy().reshape(-1)
        up[i] += h
        dn[i] -= h
        flat[i] = (probe(up.reshape(x0.shape)) - probe(dn.reshape(x0.shape))) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
