"""Dense tensors with a define-by-run reverse-mode tape.

Every primitive computes its value with numpy and, when any input requires a
gradient, stamps its output with a record ``(sequence, inputs, vjp)``.
``backward`` gathers the records reachable from the loss into a ``Tape`` and
replays them in exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "set_precision",
    "get_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "parameter",
    "backward",
    "finite_difference_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "pad",
    "getitem",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "exp",
    "log",
    "relu",
    "lincomb",
    "conv2d",
    "group_norm",
    "log_softmax",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or Inf."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float64


def set_precision(mode: str) -> None:
    """Select the global floating point mode: ``"f32"`` or ``"f64"``."""
    global _dtype
    try:
        _dtype = _DTYPES[mode]
    except KeyError:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}") from None


def get_dtype() -> type:
    return _dtype


def precision_name() -> str:
    return "f32" if _dtype is np.float32 else "f64"


@contextlib.contextmanager
def precision(mode: str):
    previous = precision_name()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


class Tape:
    """Ordered record of the primitive operations that produced a tensor.

    Records live on their output tensors, each stamped with a per-thread
    sequence number; ``Tape.collect`` gathers everything reachable from a
    result and orders it by execution.
    """

    def __init__(self, records=None):
        self.records: list[tuple[int, Tensor, tuple[Tensor, ...], Callable]] = list(records or [])

    def __len__(self):
        return len(self.records)

    @classmethod
    def collect(cls, root: "Tensor") -> "Tape":
        seen: set[int] = set()
        found = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._record is None or id(t) in seen:
                continue
            seen.add(id(t))
            seq, inputs, vjp = t._record
            found.append((seq, t, inputs, vjp))
            stack.extend(inputs)
        found.sort(key=lambda r: r[0])
        return cls(found)

    def reversed(self):
        return reversed(self.records)


_local = threading.local()


def _state():
    if not hasattr(_local, "counter"):
        _local.counter = 0
        _local.grad_enabled = True
    return _local


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _state()
    previous = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = previous


class Tensor:
    """A dense array plus gradient bookkeeping.

    Values are treated as immutable once created; only ``grad`` accumulates.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_record", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record = None
        self._consumed = False

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
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{opname} produced non-finite values")


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, opname: str) -> Tensor:
    _check_finite(value, opname)
    out = Tensor(value)
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.counter += 1
        out._record = (st.counter, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        value = ad / bd
    return _make(
        value,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar (not differentiated)."""
    c = _dtype(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    return _make(value, (a,), lambda g: (g * value,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(ad)
    return _make(value, (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(value, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def pad(a: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is a numpy-style sequence of (before, after) pairs."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} pad specs for shape {a.shape}")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[index],), "pad")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.asarray(a.data[index]), (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(value, tensors, vjp, "concat")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), vjp, "reduce_sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    src = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), vjp, "reduce_mean")


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient is shared equally among tied maxima."""
    axes = _norm_axes(axis, a.ndim)
    peak = a.data.max(axis=axes, keepdims=True)
    mask = a.data == peak
    share = mask / mask.sum(axis=axes, keepdims=True)
    value = peak if keepdims else peak.squeeze(axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * share,)

    return _make(np.asarray(value), (a,), vjp, "reduce_max")


# ---------------------------------------------------------------------------
# fused primitives used by the network layers


def lincomb(weights: Sequence[float], tensors: Sequence[Tensor]) -> Tensor:
    """``sum_i weights[i] * tensors[i]``; the weights are constants."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    if len(weights) != len(tensors) or not tensors:
        raise ShapeError(f"lincomb: {len(weights)} weights for {len(tensors)} tensors")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"lincomb: shapes {shape} and {t.shape} do not conform")
    w = [_dtype(x) for x in weights]
    value = w[0] * tensors[0].data
    for wi, t in zip(w[1:], tensors[1:]):
        value = value + wi * t.data
    return _make(value, tensors, lambda g: tuple(wi * g for wi in w), "lincomb")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [N,Cin,H,W]`` with ``w [Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels, kernel {w.shape} expects {wcin}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape} after padding {padding}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride)  # [N, Cin, Ho, Wo, kh, kw]
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    wdata = w.data

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, wdata, axes=([1], [0]))  # [N, Ho, Wo, Cin, kh, kw]
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, vjp, "conv2d")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group standardization followed by a per-channel affine map."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if c % num_groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} for {c} channels")
    xg = x.data.reshape(n, num_groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _dtype(eps))
    xhat = (centered * rstd).reshape(n, c, h, w)
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gd[None, :, None, None]).reshape(n, num_groups, m)
        xh = xhat.reshape(n, num_groups, m)
        gx = rstd * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp, "group_norm")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse

    def vjp(g):
        return (g - np.exp(value) * g.sum(axis=axis, keepdims=True),)

    return _make(value, (x,), vjp, "log_softmax")


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Operations are replayed in exact reverse execution order. A loss can be
    differentiated once; a second call raises ``RuntimeError``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already called on this loss; run a fresh forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for _, out, inputs, vjp in Tape.collect(loss).reversed():
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            x.data = base.copy()
            fp = float(np.asarray(f(x).data).reshape(-1)[0])
            flat[i] = orig - eps
            x.data = base.copy()
            fm = float(np.asarray(f(x).data).reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"finite_difference_grad: f is non-finite near coordinate {i}")
            grad[i] = (fp - fm) / (2 * eps)
    x.data = base
    return grad.reshape(x.shape)
