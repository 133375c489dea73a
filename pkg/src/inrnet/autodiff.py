"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Value` wraps an array. Operations on values that require gradients
record a node carrying its parents and a closure that pushes the output
gradient back to them. Node ids come from a monotone counter, so creation
order is a topological order and :meth:`Value.backward` simply walks the
reachable nodes by decreasing id.

Broadcasting follows numpy's trailing-dimension rules; gradients are summed
back over broadcast axes.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
import warnings
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, RankError, ShapeError

_state = threading.local()
_ids = itertools.count(1)


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created values."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class Value:
    """Array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        dtype = dtype or default_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Value"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Value":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        live = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = live
        if live:
            out.node_id = next(_ids)
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.node_id = None
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def custom(data: np.ndarray, parents: Sequence["Value"], op: str,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Value":
        """Record an operation whose backward returns one gradient per parent."""

        def _bw(g, out_parents=tuple(parents)):
            grads = backward(g)
            for p, gp in zip(out_parents, grads):
                if gp is not None:
                    p._accumulate(gp)

        return Value._result(data, parents, op, _bw)

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            np.add(self.grad, g, out=self.grad, casting="unsafe")

    # -- basic properties -----------------------------------------------------

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Value":
        return Value(self.data, dtype=self.data.dtype.type)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Value(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- backward -------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None):
        """Populate ``.grad`` on every reachable value that requires it.

        Leaf gradients accumulate across calls; interior gradients are reset.
        """
        if grad is None:
            if self.data.size != 1:
                raise RankError(f"backward needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            v = stack.pop()
            if v.node_id in nodes:
                continue
            nodes[v.node_id] = v
            stack.extend(p for p in v._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda v: v.node_id, reverse=True)
        for v in order:
            if v._backward is not None:
                v.grad = None
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for v in order:
            if v._backward is not None and v.grad is not None:
                v._backward(v.grad)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_value(other, like=self)
        _broadcast_shape(self.shape, other.shape, "add")
        return Value._result(self.data + other.data, (self, other), "add",
                             lambda g: (self._accumulate(g), other._accumulate(g)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_value(other, like=self)
        _broadcast_shape(self.shape, other.shape, "sub")
        return Value._result(self.data - other.data, (self, other), "sub",
                             lambda g: (self._accumulate(g), other._accumulate(-g)))

    def __rsub__(self, other):
        return as_value(other, like=self) - self

    def __mul__(self, other):
        other = as_value(other, like=self)
        _broadcast_shape(self.shape, other.shape, "mul")
        a, b = self.data, other.data
        return Value._result(a * b, (self, other), "mul",
                             lambda g: (self._accumulate(g * b), other._accumulate(g * a)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other, like=self)
        _broadcast_shape(self.shape, other.shape, "div")
        a, b = self.data, other.data
        out = a / b

        def bw(g):
            self._accumulate(g / b)
            other._accumulate(-g * out / b)

        return Value._result(out, (self, other), "div", bw)

    def __rtruediv__(self, other):
        return as_value(other, like=self) / self

    def __neg__(self):
        return Value._result(-self.data, (self,), "neg", lambda g: self._accumulate(-g))

    def __pow__(self, p: float):
        if isinstance(p, Value):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return Value._result(a ** p, (self,), "pow",
                             lambda g: self._accumulate(g * p * a ** (p - 1)))

    def scale(self, c: float) -> "Value":
        return Value._result(self.data * c, (self,), "scale", lambda g: self._accumulate(g * c))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = self.data[idx]

        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros_like(self.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            self._accumulate(full)

        return Value._result(out, (self,), "slice", bw)

    # -- elementwise ------------------------------------------------------------

    def sin(self):
        a = self.data
        return Value._result(np.sin(a), (self,), "sin", lambda g: self._accumulate(g * np.cos(a)))

    def cos(self):
        a = self.data
        return Value._result(np.cos(a), (self,), "cos", lambda g: self._accumulate(-g * np.sin(a)))

    def exp(self):
        out = np.exp(self.data)
        return Value._result(out, (self,), "exp", lambda g: self._accumulate(g * out))

    def log(self):
        a = self.data
        return Value._result(np.log(a), (self,), "log", lambda g: self._accumulate(g / a))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Value._result(out, (self,), "sqrt", lambda g: self._accumulate(g * 0.5 / out))

    def tanh(self):
        out = np.tanh(self.data)
        return Value._result(out, (self,), "tanh", lambda g: self._accumulate(g * (1 - out * out)))

    def relu(self):
        # derivative at exactly 0 is 0
        mask = self.data > 0
        return Value._result(np.where(mask, self.data, 0).astype(self.dtype), (self,), "relu",
                             lambda g: self._accumulate(g * mask))

    def abs(self):
        a = self.data
        return Value._result(np.abs(a), (self,), "abs", lambda g: self._accumulate(g * np.sign(a)))

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))

        return Value._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / count)

    def max(self, axis: int = -1, keepdims: bool = False):
        """Max along one axis; ties send the gradient to the lowest index."""
        a = self.data
        arg = np.argmax(a, axis=axis)  # first occurrence on ties
        out = np.take_along_axis(a, np.expand_dims(arg, axis), axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def bw(g):
            full = np.zeros_like(a)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(arg, axis), gg, axis=axis)
            self._accumulate(full)

        return Value._result(out, (self,), "max", bw)

    # -- shape ------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Value._result(self.data.reshape(shape), (self,), "reshape",
                             lambda g: self._accumulate(g.reshape(old)))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Value._result(self.data.transpose(axes), (self,), "transpose",
                             lambda g: self._accumulate(g.transpose(inv)))

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape):
        shape = tuple(shape)
        _broadcast_shape(self.shape, shape, "broadcast")
        return Value._result(np.broadcast_to(self.data, shape), (self,), "broadcast",
                             lambda g: self._accumulate(g))

    def take(self, idx: np.ndarray, axis: int = 0):
        """Gather along ``axis`` with an integer index array."""
        idx = np.asarray(idx)
        ax = axis % self.ndim

        def bw(g):
            full = np.zeros_like(self.data)
            moved = np.moveaxis(full, ax, 0)
            np.add.at(moved, idx, np.moveaxis(g, ax, 0))
            self._accumulate(full)

        return Value._result(np.take(self.data, idx, axis=ax), (self,), "take", bw)


def as_value(x, like: Optional[Value] = None) -> Value:
    if isinstance(x, Value):
        return x
    dtype = like.dtype.type if like is not None else None
    return Value(x, dtype=dtype)


def parameter(data, dtype=None) -> Value:
    """Leaf value that requires gradients."""
    return Value(np.array(data, copy=True), requires_grad=True, dtype=dtype)


# ----------------------------------------------------------------------------
# free-function primitives
# ----------------------------------------------------------------------------


def add(a, b):
    return as_value(a) + b


def sub(a, b):
    return as_value(a) - b


def mul(a, b):
    return as_value(a) * b


def sin(a):
    return as_value(a).sin()


def cos(a):
    return as_value(a).cos()


def exp(a):
    return as_value(a).exp()


def relu(a):
    return as_value(a).relu()


def scale(a, c):
    return as_value(a).scale(c)


def matmul(a, b) -> Value:
    """Batched matrix product of operands with at least two dimensions."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    x, y = a.data, b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(y, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(x, -1, -2) @ g)

    return Value._result(x @ y, (a, b), "matmul", bw)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return as_value(a).sum(axis, keepdims)


def mean(a, axis=None, keepdims=False):
    return as_value(a).mean(axis, keepdims)


def vmax(a, axis=-1, keepdims=False):
    return as_value(a).max(axis, keepdims)


def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Value._result(out, (a,), "softmax", bw)


def log_softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        a._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return Value._result(out, (a,), "log_softmax", bw)


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    ax = axis % vals[0].ndim
    try:
        out = np.concatenate([v.data for v in vals], axis=ax)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def bw(g):
        for v, part in zip(vals, np.split(g, splits, axis=ax)):
            v._accumulate(part)

    return Value._result(out, vals, "concat", bw)


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    expanded = [v.reshape(v.shape[:axis] + (1,) + v.shape[axis:]) for v in vals]
    return concat(expanded, axis=axis)


def maximum(a, c: float) -> Value:
    """Elementwise ``max(a, c)`` against a constant; gradient is 0 where clamped."""
    a = as_value(a)
    mask = a.data > c
    return Value._result(np.where(mask, a.data, c).astype(a.dtype), (a,), "clamp",
                         lambda g: a._accumulate(g * mask))


def sparse_apply(mat: sp.spmatrix, x: Value, axis: int = -2) -> Value:
    """Apply a constant sparse (M, N) matrix along the point axis of ``x``."""
    x = as_value(x)
    mat = sp.csr_matrix(mat)
    ax = axis % x.ndim
    if x.shape[ax] != mat.shape[1]:
        raise ShapeError(f"sparse_apply: matrix {mat.shape} vs values {x.shape} on axis {ax}")
    mat = mat.astype(x.dtype)
    moved = np.moveaxis(x.data, ax, 0)
    rest = moved.shape[1:]
    width = int(np.prod(rest))  # explicit so that empty point axes reshape cleanly
    out = (mat @ moved.reshape(moved.shape[0], width)).reshape((mat.shape[0],) + rest)
    out = np.moveaxis(out, 0, ax)
    mat_t = None

    def bw(g):
        nonlocal mat_t
        if mat_t is None:
            mat_t = mat.T.tocsr()
        gm = np.moveaxis(g, ax, 0)
        gx = (mat_t @ gm.reshape(gm.shape[0], width)).reshape((mat.shape[1],) + rest)
        x._accumulate(np.moveaxis(gx, 0, ax))

    return Value._result(np.ascontiguousarray(out), (x,), "sparse_apply", bw)


# ----------------------------------------------------------------------------
# verification and optimisation
# ----------------------------------------------------------------------------


def finite_diff_check(fn: Callable[..., Value], params: Sequence[Value], epsilon: float = 1e-3,
                      fd_dtype=np.float64, atol: float = 1e-8,
                      exclude: Optional[Callable[..., Sequence[np.ndarray]]] = None) -> float:
    """Max relative error between tape gradients and central differences.

    The tape gradient is taken at the ambient precision; the differences are
    evaluated at ``fd_dtype`` (fp64 by default). Coordinates where
    ``|fd| + |ad| <= atol`` are skipped. ``exclude`` may return boolean masks
    (one per param) of coordinates to skip, e.g. near relu kinks.
    """
    for p in params:
        p.zero_grad()
    root = fn(*params)
    if not np.all(np.isfinite(root.data)):
        raise NumericError("function output is not finite")
    # non-scalar outputs are summed, on the tape and in the differences alike
    (root if root.size == 1 else root.sum()).backward()
    ad = [np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
          for p in params]
    base = [p.data.astype(fd_dtype) for p in params]
    masks = exclude(*params) if exclude is not None else [None] * len(params)
    worst = 0.0
    with precision(fd_dtype), no_grad():
        for k, p in enumerate(params):
            flat = base[k].reshape(-1)
            for i in range(flat.size):
                if masks[k] is not None and masks[k].reshape(-1)[i]:
                    continue
                vals = []
                for sgn in (1.0, -1.0):
                    pert = [Value(b.copy(), dtype=fd_dtype) for b in base]
                    arr = pert[k].data.reshape(-1)
                    arr[i] = flat[i] + sgn * epsilon
                    out = fn(*pert).data
                    if not np.all(np.isfinite(out)):
                        raise NumericError("function output is not finite")
                    vals.append(float(np.sum(out)))
                fd = (vals[0] - vals[1]) / (2 * epsilon)
                a = ad[k].reshape(-1)[i]
                denom = abs(fd) + abs(a)
                if denom <= atol:
                    continue
                worst = max(worst, abs(fd - a) / max(abs(fd), abs(a)))
    return worst


class AdamW:
    """Decoupled-weight-decay Adam operating in place on parameter values."""

    def __init__(self, params: Iterable[Value], lr: float = 1e-3, betas=(0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            warnings.warn(f"non-finite gradient, step skipped ({self.skipped} so far)")
            return False
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p.data[...] = adamw_step(p.data, g, self.m[i], self.v[i], self.t, self.lr,
                                     self.betas, self.weight_decay, self.eps)
        return True


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float = 1e-3, betas=(0.9, 0.999), weight_decay: float = 0.01,
               eps: float = 1e-8) -> np.ndarray:
    """One AdamW update; ``m`` and ``v`` are updated in place, new params returned."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    decayed = param - lr * weight_decay * param
    return (decayed - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
