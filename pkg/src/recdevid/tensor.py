"""Dense real tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, records a :class:`Node` whose ``backward`` maps the
output gradient to input gradients.  :func:`backward` replays the recorded
nodes in exact reverse execution order.

Broadcasting is deliberately limited to three cases: identical shapes, a
scalar operand, and a 1-D bias matching the trailing axis.  Anything else
must go through :func:`broadcast_to` explicitly.
"""
from __future__ import annotations

import builtins
import contextlib
import itertools
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "Tape", "ShapeError", "DomainError",
    "tensor", "zeros", "no_grad", "grad_enabled", "precision", "get_default_dtype",
    "strict_mode", "make_op",
    "add", "sub", "neg", "mul", "hadamard", "div", "matmul", "conv1d_valid",
    "sigmoid", "tanh", "relu", "exp", "log", "sqrt", "square",
    "sum", "mean", "max", "concat", "stack", "slice", "reshape", "transpose",
    "broadcast_to", "pad", "flip", "softmax", "log_softmax",
    "backward", "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the primitive."""


_seq = itertools.count()
_local = threading.local()
_default_dtype = np.float32
_strict = False


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage type of newly created tensors.

    ``precision(np.float64)`` is the 64-bit verification mode used by the
    gradient checks; training runs in the float32 default.
    """
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Check every forward output for NaN/Inf (slow; for tests and verify)."""
    global _strict
    prev = _strict
    _strict = enabled
    try:
        yield
    finally:
        _strict = prev


class Node:
    """One executed primitive on the tape."""

    __slots__ = ("seq", "inputs", "backward", "op")

    def __init__(self, inputs, backward, op):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.op = op

    def __repr__(self):
        return f"<Node #{self.seq} {self.op}>"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_default_dtype if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        name = f" {self.name}" if self.name else ""
        return f"<Tensor{name} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __getitem__(self, idx):
        return slice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Wrap a forward value and its vector-Jacobian product as a taped op.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    This is also the extension point for fused layer kernels.
    """
    if _strict and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(tuple(inputs), backward_fn, op)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor) -> tuple[str, str]:
    """Classify how each operand relates to the result shape."""
    if a.shape == b.shape:
        return "same", "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "same", "scalar"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "scalar", "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "same", "bias"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "bias", "same"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only scalar and bias broadcasting)")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ka, kb = _broadcast_kind(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, ka, sa), _reduce_to(g, kb, sb)
    return make_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ka, kb = _broadcast_kind(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, ka, sa), _reduce_to(-g, kb, sb)
    return make_op(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ka, kb = _broadcast_kind(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, ka, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, kb, bd.shape) if b.requires_grad else None
        return ga, gb
    return make_op(ad * bd, (a, b), bw, "mul")


hadamard = mul


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ka, kb = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, ka, ad.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, kb, bd.shape) if b.requires_grad else None
        return ga, gb
    return make_op(out, (a, b), bw, "div")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return make_op(ad @ bd, (a, b), bw, "matmul")


def conv_out_len(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d_valid(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution (cross-correlation) along axis 1.

    ``x``: (N, L, Cin), ``w``: (k, Cin, Cout) -> (N, floor((L-k)/stride)+1, Cout).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d_valid: x {x.shape} incompatible with kernel {w.shape}")
    n, length, cin = x.shape
    k, _, cout = w.shape
    if length < k or stride < 1:
        raise ShapeError(f"conv1d_valid: length {length} shorter than kernel {k}")
    lout = conv_out_len(length, k, stride)
    xd = np.ascontiguousarray(x.data)
    s0, s1, s2 = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd, shape=(n, lout, k, cin), strides=(s0, s1 * stride, s1, s2), writeable=False)
    cols = win.reshape(n * lout, k * cin)
    wmat = w.data.reshape(k * cin, cout)
    out = (cols @ wmat).reshape(n, lout, cout)

    def bw(g):
        g2 = g.reshape(n * lout, cout)
        gw = (cols.T @ g2).reshape(k, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, lout, k, cin)
            gx = np.zeros_like(xd)
            stop = stride * (lout - 1) + 1
            for j in range(k):
                gx[:, j:j + stop:stride, :] += gcols[:, :, j, :]
        return gx, gw
    return make_op(out, (x, w), bw, "conv1d_valid")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of a nonpositive value")
    return make_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    y = np.sqrt(x.data)
    return make_op(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_back(g: np.ndarray, axes: tuple, keepdims: bool, shape: tuple) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        return (np.array(_expand_back(g, axes, keepdims, shape)),)
    return make_op(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        return (np.array(_expand_back(g, axes, keepdims, shape)) / count,)
    return make_op(out, (x,), bw, "mean")


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; ties share the gradient equally."""
    axes = _norm_axes(axis, x.ndim)
    out_keep = x.data.max(axis=axes, keepdims=True)
    mask = x.data == out_keep
    counts = mask.sum(axis=axes, keepdims=True)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axes)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (mask * (gk / counts),)
    return make_op(np.asarray(out, dtype=x.dtype), (x,), bw, "max")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat shapes differ off axis {ax}: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [np.s_[:]] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = np.s_[lo:hi]
            out.append(g[tuple(idx)])
        return tuple(out)
    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def slice(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing; integer indices drop the axis."""
    shape, dtype = x.shape, x.dtype
    out = x.data[idx]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] += g
        return (full,)
    return make_op(np.array(out, copy=True), (x,), bw, "slice")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward sums over expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - len(src)
    expanded = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1)

    def bw(g):
        gs = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (gs.reshape(src),)
    return make_op(out, (x,), bw, "broadcast_to")


def pad(x: Tensor, pad_width, axis: int) -> Tensor:
    """Zero-pad ``axis`` by ``(before, after)``."""
    before, after = pad_width
    ax = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[ax] = (before, after)
    n = x.shape[ax]
    idx = [np.s_[:]] * x.ndim
    idx[ax] = np.s_[before:before + n]
    idx = tuple(idx)
    return make_op(np.pad(x.data, widths), (x,), lambda g: (g[idx],), "pad")


def flip(x: Tensor, axis: int) -> Tensor:
    return make_op(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),), "flip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return make_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return make_op(y, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Tape:
    """The executed nodes reachable from an output, in execution order."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack_ = [out._node] if out._node is not None else []
        while stack_:
            node = stack_.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack_.append(t._node)
        return cls(seen.values())

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reverse(self):
        return reversed(self.nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> bool:
    """Fill ``.grad`` of every leaf that ``loss`` depends on.

    Returns ``False`` (with a warning) when ``loss`` is not connected to any
    tensor requiring a gradient.  Intermediate gradients are discarded.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = grad if loss.grad is None else loss.grad + grad
            return True
        warnings.warn("backward() on a tensor that does not require grad; nothing to do", stacklevel=2)
        return False
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss._node): grad}
    for node in tape.reverse():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = id(t._node)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.dtype)
                if gi.shape != t.shape:
                    gi = gi.reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    return True


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-3,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Compare ``backward`` gradients with central differences.

    ``point`` is perturbed in place, so ``f`` may close over it (e.g. a layer
    parameter).  Returns ``max |a-b| / max(1, |a|, |b|)`` over the checked
    coordinates; ``max_coords`` samples a seeded subset for large tensors.

    The analytic side runs in ``point``'s own precision.  The numeric side is
    evaluated in float64 at points representable in that precision, so a
    32-bit check measures the 32-bit backward pass rather than rounding in
    the forward sums.
    """
    was = point.requires_grad
    saved_grad = point.grad
    point.requires_grad = True
    point.grad = None
    out = f(point)
    backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    point.grad = saved_grad
    point.requires_grad = was

    native = point.data.dtype
    base = np.ascontiguousarray(point.data)
    work = base.astype(np.float64)
    flat = work.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
    an = analytic.reshape(-1)
    worst = 0.0
    point.data = work
    try:
        with no_grad(), precision(np.float64):
            for i in coords:
                orig = flat[i]
                # the representable step, not the nominal one
                hi = float(native.type(orig + eps))
                lo = float(native.type(orig - eps))
                flat[i] = hi
                fp = float(np.sum(f(point).data, dtype=np.float64))
                flat[i] = lo
                fm = float(np.sum(f(point).data, dtype=np.float64))
                flat[i] = orig
                num = (fp - fm) / (hi - lo)
                a = float(an[i])
                err = abs(a - num) / builtins.max(1.0, abs(a), abs(num))
                worst = err if err > worst else worst
    finally:
        point.data = base
    return worst
