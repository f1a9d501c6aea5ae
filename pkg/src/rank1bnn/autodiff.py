"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and a vector-Jacobian product written in
terms of other primitives, so a backward pass can itself be recorded
(``create_graph=True``). That is what makes exact Hessians possible: the
gradient is a graph, and each of its entries can be differentiated again.

Broadcasting follows numpy; gradients of broadcast operands are summed back
to the operand's shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special

_GRAD_ENABLED = True

# Ops whose second derivative is zero almost everywhere and undefined at a kink.
NONSMOOTH_OPS = frozenset({"relu", "abs"})


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonSmoothGraphError(ValueError):
    """Raised when second derivatives are requested through a kinked op."""


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


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional float64 array that may take part in a tape.

    Values are never mutated in place by library code; parameter updates
    replace ``data`` wholesale between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_op")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64) else data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._op = "leaf"

    # ------------------------------------------------------------------ basics
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
    def op(self) -> str:
        return self._op

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -------------------------------------------------------------- operators
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

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        if exponent == 0.5:
            return sqrt(self)
        raise NotImplementedError("only squares and square roots are supported")

    # ------------------------------------------------------ method shortcuts
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(np.asarray(data, dtype=np.float64))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


# ---------------------------------------------------------------- broadcasting
def _sum_to_shape(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _make(_sum_to_shape(a.data, shape), (a,),
                 lambda g, out: (broadcast_to(g, in_shape),), "sum_to")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, out: (sum_to(g, in_shape),), "broadcast_to")


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g, out: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g, out: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g, out: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), "mul")


def div(a, b) -> Tensor:
    """Elementwise quotient; division by zero yields IEEE infinities."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    sa, sb = a.shape, b.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def vjp(g, out):
        return sum_to(div(g, b), sa), sum_to(neg(div(mul(g, out), b)), sb)

    return _make(data, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, out: (neg(g),), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, out: (mul(g, mul(a, 2.0)),), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of a negative value")
    return _make(np.sqrt(a.data), (a,), lambda g, out: (div(mul(g, 0.5), out),), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.exp(a.data), (a,), lambda g, out: (mul(g, out),), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g, out: (div(g, a),), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.tanh(a.data), (a,),
                 lambda g, out: (mul(g, sub(1.0, square(out))),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.expit(a.data), (a,),
                 lambda g, out: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,),
                 lambda g, out: (mul(g, sigmoid(a)),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g, out: (mul(g, mask),), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g, out: (mul(g, sign),), "abs")


_UNARY = {
    "neg": neg, "tanh": tanh, "softplus": softplus, "relu": relu, "exp": exp,
    "log": log, "square": square, "sqrt": sqrt, "sigmoid": sigmoid, "abs": abs_,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes a single operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -------------------------------------------------------------------- matmul
def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ValueError("reduction over an empty axis")
    in_shape = a.shape
    kshape = _keepdims_shape(in_shape, axes)

    def vjp(g, out):
        return (broadcast_to(reshape(g, kshape), in_shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def logsumexp(a, axis=None, keepdims=False) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with max-subtraction."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ValueError("reduction over an empty axis")
    shift = np.max(a.data, axis=axes, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    # The shift is a constant: its contribution to the gradient cancels exactly.
    out = add(log(reduce_sum(exp(sub(a, shift)), axes, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, tuple(s for i, s in enumerate(a.shape) if i not in axes))
    return out


def reduce(op: str, a, axis=None, keepdims=False) -> Tensor:
    table = {"sum": reduce_sum, "mean": reduce_mean, "logsumexp": logsumexp}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](a, axis, keepdims)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return sub(a, logsumexp(a, axis, keepdims=True))


def softmax(a, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis))


# ------------------------------------------------------------ shape plumbing
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _make(a.data.reshape(shape), (a,),
                 lambda g, out: (reshape(g, in_shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g, out: (transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatter-adds back."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    in_shape = a.shape
    return _make(a.data[index], (a,),
                 lambda g, out: (scatter_add(g, in_shape, index),), "getitem")


def scatter_add(g, shape, index) -> Tensor:
    """Zeros of ``shape`` with ``g`` accumulated at ``index``."""
    g = as_tensor(g)
    buf = np.zeros(shape)
    np.add.at(buf, index, g.data)
    return _make(buf, (g,), lambda gg, out: (getitem(gg, index),), "scatter_add")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g, out):
        bounds = [0, *sizes, out.shape[axis]]
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(int(lo), int(hi))
            parts.append(getitem(g, tuple(idx)))
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concatenate(expanded, axis)


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    index = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g, out: (getitem(g, index),), "pad")


# ---------------------------------------------------------------- the tape
def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _run_backward(root: Tensor, seed: Tensor, create_graph: bool) -> dict:
    grads = {id(root): seed}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None) if node._vjp is not None else grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        with _grad_mode(create_graph):
            parent_grads = node._vjp(g, node)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = add(grads[key], pg) if key in grads else pg
    return grads


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list:
    """Gradients of a scalar ``output`` w.r.t. each of ``inputs``.

    Inputs the output does not depend on get exact zeros. With
    ``create_graph=True`` the returned tensors carry their own tape and can be
    differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    inputs = list(inputs)
    if not output.requires_grad:
        return [Tensor(np.zeros(x.shape)) for x in inputs]
    grads = _run_backward(output, Tensor(np.ones(output.shape)), create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor(np.zeros(x.shape)))
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = Tensor(np.ones(loss.shape))
    leaves = [n for n in topological_order(loss) if n.is_leaf]
    grads = _run_backward(loss, seed, create_graph=False)
    for leaf in leaves:
        g = grads.get(id(leaf))
        g = np.zeros(leaf.shape) if g is None else g.data
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if loss.is_leaf:
        loss.grad = np.ones(loss.shape)


# ------------------------------------------------------- second derivatives
def check_smooth(output: Tensor) -> None:
    for node in topological_order(output):
        if node._op in NONSMOOTH_OPS:
            raise NonSmoothGraphError(
                f"graph contains non-smooth op {node._op!r}; use tanh or softplus "
                "activations when second derivatives are needed")


def hessian(output: Tensor, param: Tensor) -> np.ndarray:
    """Exact Hessian of scalar ``output`` w.r.t. flattened ``param``.

    One gradient-of-gradient pass per coordinate.
    """
    check_smooth(output)
    (g,) = grad(output, [param], create_graph=True)
    flat = reshape(g, (-1,))
    n = param.size
    rows = np.zeros((n, n))
    for i in range(n):
        (row,) = grad(flat[i], [param])
        rows[i] = row.data.reshape(-1)
    return rows


def hessian_quadratic_form(output: Tensor, param: Tensor, cov) -> float:
    """trace(H @ cov), i.e. E[d^T H d] for d with covariance ``cov``."""
    cov = np.asarray(cov, dtype=np.float64)
    n = param.size
    if cov.shape != (n, n):
        raise ShapeError(f"covariance shape {cov.shape} does not match {n} parameters")
    return float(np.sum(hessian(output, param) * cov.T))


# ---------------------------------------------------------------- gradcheck
def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``."""
    out = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    view = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            view[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Per-coordinate |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              rtol: float = 1e-4) -> float:
    """Compare backprop against central differences; returns the max relative error.

    Raises AssertionError when any coordinate exceeds ``rtol``. ``fn`` must be
    deterministic (reuse the same random numbers on every call).
    """
    out = fn()
    analytic = grad(out, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        num = numerical_gradient(fn, p, h)
        err = relative_error(a.data, num)
        worst = max(worst, float(err.max(initial=0.0)))
    if worst >= rtol:
        raise AssertionError(f"gradcheck failed: max relative error {worst:.3e} >= {rtol:g}")
    return worst
