"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every operation on :class:`Tensor` objects that require gradients records a
node (inputs plus a closure computing vector-Jacobian products).  Calling
:meth:`Tensor.backward` on a scalar orders the recorded graph topologically
into a :class:`Tape` and walks it once in reverse.

Gradients accumulate into ``.grad`` of leaf tensors across repeated
``backward`` calls; callers reset them with :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True

# exp(709.78) overflows float64; log(0) is -inf.
_EXP_MAX = 709.0
_LOG_MIN = 1e-300


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array that optionally participates in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic attributes -------------------------------------------------

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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """Return a leaf sharing this tensor's values but cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse pass -------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that is not part of a gradient graph")
        Tape.from_output(self).run(grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered list of recorded nodes leading to one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        output = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(np.minimum(a.data, _EXP_MAX))
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = np.maximum(a.data, _LOG_MIN)
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    a = as_tensor(a)
    centered = a - mean(a, axis=axis, keepdims=True)
    return mean(square(centered), axis=axis, keepdims=keepdims)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stabilised log(sum(exp(a))) along ``axis``."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + shift
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return Tensor._result(out, (a,), backward, "logsumexp")


# -- linear algebra and shape ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        # skip the (often large) gradient of an operand that is a constant input
        return (g @ bd.T if need_a else None), (ad.T @ g if need_b else None)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index, axis: int = 0) -> Tensor:
    """Select rows (axis 0) or columns (axis 1) by integer index array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        if axis == 0:
            np.add.at(full, index, g)
        else:
            np.add.at(full, (slice(None), index), g)
        return (full,)

    return Tensor._result(np.take(a.data, index, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, backward, "concat")


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit length; ``eps`` is added to the norm so zero rows stay finite."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    d = n + eps
    out = x / d
    safe_n = np.where(n > 0, n, 1.0)

    def backward(g):
        proj = (g * x).sum(axis=-1, keepdims=True)
        return (g / d - x * proj / (d * d * safe_n),)

    return Tensor._result(out, (a,), backward, "l2_normalize")


# -- losses ------------------------------------------------------------------


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    x = logits.data
    shift = x.max(axis=1, keepdims=True)
    e = np.exp(x - shift)
    s = e.sum(axis=1, keepdims=True)
    logp = x - shift - np.log(s)
    rows = np.arange(b)
    out = np.asarray(-logp[rows, labels].mean())

    def backward(g):
        grad = e / s
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return Tensor._result(out, (logits,), backward, "softmax_cross_entropy")


# -- gradient checking -------------------------------------------------------


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6,
               reference: Callable[[], Tensor] | None = None, stencil: int = 3) -> float:
    """Worst relative disagreement between tape gradients and central differences.

    ``fn`` must rebuild its graph from ``params`` on every call.  The relative
    error of each coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).
    ``reference``, when given, is the function differenced numerically instead
    of ``fn`` (for graphs that deliberately stop some gradient paths).
    ``stencil`` selects the 3-point or 5-point central difference.
    """
    reference = fn if reference is None else reference
    # weights of f(x + k h) - f(x - k h) for k = 1, 2, ...
    if stencil == 3:
        weights = (0.5,)
    elif stencil == 5:
        weights = (8 / 12, -1 / 12)
    else:
        raise ValueError("stencil must be 3 or 5")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: non-finite function value")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.reshape(p.shape)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ContractError("grad_check: parameter data must be contiguous")
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            diffs = []
            with no_grad():
                for k in range(1, len(weights) + 1):
                    hi, lo = orig + k * eps, orig - k * eps
                    flat[i] = hi
                    fp = reference().item()
                    flat[i] = lo
                    fm = reference().item()
                    # divide by the step actually taken, which is not exactly 2*k*eps in floating point
                    diffs.append((fp - fm) * (2 * k * eps) / (hi - lo))
            flat[i] = orig
            if not np.all(np.isfinite(diffs)):
                raise NumericError("grad_check: non-finite function value under perturbation")
            num = sum(w * d for w, d in zip(weights, diffs)) / eps
            err = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
