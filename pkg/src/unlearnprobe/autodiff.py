"""Reverse-mode automatic differentiation on numpy arrays.

Every backward rule is written in terms of :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is itself recorded and can be
differentiated again. That is what the attack objective needs: its loss is a
function of model gradients, which are functions of the dummy graph.

Constant sparse matrices (scipy CSR) enter through :func:`spmm` only.
"""

from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "UnusedGradientWarning",
    "as_tensor",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "finite_diff_check",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "power",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "abs_",
    "matmul",
    "spmm",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "broadcast_to",
    "sum_to",
    "tsum",
    "mean",
    "row_softmax",
    "log_softmax",
    "row_normalize",
    "trace",
]


class UnusedGradientWarning(UserWarning):
    """Raised when a ``wrt`` tensor cannot be reached from the output."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops recording operations."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")


class Tensor:
    """A float64 array with an optional link into the recorded graph.

    ``parents`` and ``backward_fn`` are set only for results of recorded
    operations; leaves created by the user have neither.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.array(data, dtype=np.float64) if _check else data
        if _check:
            _check_finite(arr, "Tensor construction")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take_rows(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(np.asarray(data, dtype=np.float64), _check=False)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# -- broadcasting helpers --------------------------------------------------
def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = x.data
    lead = data.ndim - len(shape)
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    data = data.reshape(shape)
    src = x.shape
    return _make(data, (x,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.broadcast_to(x.data, shape).copy()
    return _make(data, (x,), lambda g: (sum_to(g, src),), "broadcast_to")


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    sa, sb = a.shape, b.shape

    def back(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), back, "div")


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**p
    _check_finite(data, "power")

    def back(g):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(data, (a,), back, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    _check_finite(data, "exp")
    out = _make(data, (a,), None, "exp")
    if out.requires_grad:
        out.backward_fn = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask, _check=False)),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _make(data, (a,), None, "sigmoid")
    if out.requires_grad:
        out.backward_fn = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, Tensor(sign, _check=False)),), "abs")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def back(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


def spmm(s, b) -> Tensor:
    """Product of a constant sparse (or dense ndarray) matrix with a tensor."""
    b = as_tensor(b)
    if b.ndim != 2 or s.shape[1] != b.shape[0]:
        raise _shape_error("spmm", s.shape, b.shape)
    data = s @ b.data
    data = np.asarray(data)

    def back(g):
        st = s.T.tocsr() if sp.issparse(s) else s.T
        return (spmm(st, g),)

    return _make(data, (b,), back, "spmm")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return _make(data, (a,), lambda g: (reshape(g, src),), "reshape")


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    parts = [as_tensor(p) for p in parts]
    if any(p.ndim != 1 for p in parts):
        raise ValueError("concat expects 1-D tensors; reshape(-1) first")
    sizes = [p.size for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(_slice1d(g, int(bounds[i]), int(bounds[i + 1])) for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts]), parts, back, "concat")


def _slice1d(a: Tensor, lo: int, hi: int) -> Tensor:
    n = a.size

    def back(g):
        return (_pad1d(g, lo, n),)

    return _make(a.data[lo:hi].copy(), (a,), back, "slice")


def _pad1d(a: Tensor, lo: int, n: int) -> Tensor:
    hi = lo + a.size

    def back(g):
        return (_slice1d(g, lo, hi),)

    data = np.zeros(n)
    data[lo:hi] = a.data
    return _make(data, (a,), back, "pad")


def take_rows(a, idx) -> Tensor:
    """Row (first-axis) gather with integer or boolean indices."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    n = a.shape[0]
    return _make(a.data[idx], (a,), lambda g: (_scatter_rows(g, idx, n),), "take_rows")


def _scatter_rows(g: Tensor, idx: np.ndarray, n: int) -> Tensor:
    data = np.zeros((n,) + g.shape[1:])
    np.add.at(data, idx, g.data)
    return _make(data, (g,), lambda h: (take_rows(h, idx),), "scatter_rows")


# -- reductions -------------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    data = np.asarray(a.data.sum(axis=axis, keepdims=True))
    kept = data.shape

    def back(g):
        return (broadcast_to(reshape(g, kept), src),)

    if not keepdims:
        data = data.sum() if axis is None else data.reshape(np.delete(np.array(kept), axis))
        data = np.asarray(data, dtype=np.float64)
    return _make(data, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = _make(e / e.sum(axis=1, keepdims=True), (a,), None, "row_softmax")
    if out.requires_grad:
        def back(g):
            inner = tsum(mul(g, out), axis=1, keepdims=True)
            return (mul(out, sub(g, inner)),)

        out.backward_fn = back
    return out


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def back(g):
        return (sub(g, mul(row_softmax(a), tsum(g, axis=1, keepdims=True))),)

    return _make(data, (a,), back, "log_softmax")


def row_normalize(a) -> Tensor:
    """Divide every row by its sum."""
    a = as_tensor(a)
    s = a.data.sum(axis=1, keepdims=True)
    if np.any(s == 0):
        raise ZeroDivisionError("row_normalize: zero row sum")
    return div(a, tsum(a, axis=1, keepdims=True))


def trace(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"trace: expected a square matrix, got {a.shape}")
    eye = np.eye(a.shape[0])
    return _make(np.asarray(np.trace(a.data)), (a,), lambda g: (mul(broadcast_to(g, a.shape), Tensor(eye, _check=False)),), "trace")


# -- differentiation --------------------------------------------------------
def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph: bool = False) -> list:
    """Return d(output)/d(wrt) for a scalar ``output``.

    With ``create_graph`` the returned tensors are recorded, so they can be
    fed into another :func:`grad` call. Tensors in ``wrt`` that the output
    does not depend on get a zero gradient and an :class:`UnusedGradientWarning`.
    """
    single = isinstance(wrt, Tensor)
    wrt = [wrt] if single else list(wrt)
    if output.size != 1:
        raise ValueError(f"grad: output must be a scalar, got shape {output.shape}")
    grads: dict = {}
    if output.requires_grad:
        order = _toposort(output)
        grads[id(output)] = Tensor(np.ones(output.shape), _check=False)
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
                if g is None or node.backward_fn is None:
                    continue
                # leaves keep their accumulated gradient; interior nodes are freed
                pgrads = node.backward_fn(g)
                for p, pg in zip(node.parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    grads[key] = pg if key not in grads else add(grads[key], pg)
                if any(node is w for w in wrt):
                    grads[id(node)] = g
    result = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            warnings.warn("grad: a wrt tensor is not reachable from the output; returning zeros",
                          UnusedGradientWarning, stacklevel=2)
            g = Tensor(np.zeros(w.shape), _check=False)
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result[0] if single else result


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between :func:`grad` and central differences.

    The denominator per entry is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        analytic = grad(out, xt).data
    else:
        analytic = np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    # perturbed inputs still require grad so objectives that differentiate internally
    # (gradient norms, gradient matching) evaluate the same function
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape), requires_grad=True)).item()
        fm = f(Tensor(xm.reshape(x0.shape), requires_grad=True)).item()
        flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


def parameters_like(arrays: Iterable[np.ndarray]) -> list:
    """Fresh leaf tensors (requiring grad) holding copies of ``arrays``."""
    return [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
