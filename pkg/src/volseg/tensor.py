"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every differentiable operation records its parents and a closure that maps the
output gradient to one gradient per parent. ``Tensor.backward`` walks the tape
in reverse topological order and accumulates gradients additively, so a tensor
consumed by several operations receives the sum of all branch gradients.

Broadcasting is deliberately limited to tensor-with-scalar; every other binary
operation requires identical shapes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AxisError, ContractError, ShapeError

Scalar = Union[int, float, np.number]

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from Python scalars and lists."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, validation)."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def _is_scalar(x) -> bool:
    if isinstance(x, (bool, np.bool_)):
        return False
    return isinstance(x, (int, float, np.number)) or (
        isinstance(x, np.ndarray) and x.ndim == 0
    )


class Tensor:
    """An n-dimensional float array that can participate in the gradient tape."""

    __array_priority__ = 100  # keep ndarray + Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=_state["dtype"])
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.name: Optional[str] = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tape tensor ``t``.

        Gradients add onto whatever is already stored, so calling this twice
        without clearing doubles every gradient.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not on the gradient tape (requires_grad=False)")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return rdiv(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _topological_order(root: Tensor):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output; record it on the tape if any parent needs grads.

    ``backward(g)`` must return one gradient (or None) per parent, in order.
    Used by the core ops here and by fused ops elsewhere in the package.
    """
    out = Tensor(np.asarray(data))
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        return make_result(a.data + b, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        return make_result(a.data - b, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        return make_result(a.data * b, (a,), lambda g: (g * b,))
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        return make_result(a.data / b, (a,), lambda g: (g / b,))
    b = _as_tensor(b)
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    return make_result(
        out,
        (a, b),
        lambda g: (
            g / b.data if a.requires_grad else None,
            -g * out / b.data if b.requires_grad else None,
        ),
    )


def rdiv(s: Scalar, b: Tensor) -> Tensor:
    """Scalar divided by tensor."""
    out = s / b.data
    return make_result(out, (b,), lambda g: (-g * out / b.data,))


def power(a: Tensor, exponent: Scalar) -> Tensor:
    if not _is_scalar(exponent):
        raise ShapeError("power: exponent must be a scalar")
    out = a.data ** exponent
    return make_result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, minimum: Scalar) -> Tensor:
    a = _as_tensor(a)
    passed = a.data > minimum
    return make_result(np.maximum(a.data, minimum), (a,), lambda g: (g * passed,))


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, log, clamp_min."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div, "clamp_min": clamp_min}
    unary = {"exp": exp, "log": log, "neg": neg}
    if kind in binary:
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- reductions and reshaping ------------------------------------------------
def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    result = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for {ndim}-d tensor")
        result.append(int(ax) % ndim)
    if len(set(result)) != len(result):
        raise AxisError(f"repeated axis in {axes}")
    return tuple(sorted(result))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reduce(kind: str, a, axes=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return tsum(a, axes, keepdims)
    if kind == "mean":
        return mean(a, axes, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(
        isinstance(i, (slice, int, np.integer)) or i is Ellipsis
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = _normalize_axes(axis, ref.ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return make_result(out, tensors, backward)


# -- activations -------------------------------------------------------------
def leaky_relu(x: Tensor, leakiness: float = 1e-2) -> Tensor:
    slope = np.where(x.data >= 0, 1.0, leakiness).astype(x.dtype)
    return make_result(x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


# -- volumetric ops ----------------------------------------------------------
def _triple(v) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding="same") -> Tensor:
    """3D cross-correlation of ``x[N,Cin,D,H,W]`` with ``w[Cout,Cin,kd,kh,kw]``.

    ``padding`` is ``"same"`` (odd kernels only), an int, or a 3-tuple of
    zero-padding widths applied on both sides of each spatial axis.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape}, {w.shape}")
    n, cin, d, h, wd = x.shape
    cout, wcin, kd, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    s = _triple(stride)
    if min(s) < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {s}")
    k = (kd, kh, kw)
    if isinstance(padding, str):
        if padding != "same":
            raise ValueError(f"unknown padding mode {padding!r}")
        if any(ki % 2 == 0 for ki in k):
            raise ShapeError(f"'same' padding needs odd kernel sizes, got {k}")
        p = tuple(ki // 2 for ki in k)
    else:
        p = _triple(padding)

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((pi, pi) for pi in p)) if any(p) else x.data
    out_sp = tuple((xp.shape[2 + i] - k[i]) // s[i] + 1 for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: kernel {k} larger than padded input {xp.shape[2:]}")
    do, ho, wo = out_sp
    wmat = w.data.reshape(cout, -1)

    if k == (1, 1, 1) and s == (1, 1, 1):
        cols = np.moveaxis(xp, 1, -1).reshape(-1, cin)
    else:
        win = sliding_window_view(xp, k, axis=(2, 3, 4))
        win = win[:, :, : s[0] * do : s[0], : s[1] * ho : s[1], : s[2] * wo : s[2]]
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, do, ho, wo, cout).transpose(0, 4, 1, 2, 3))

    def backward(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gm @ wmat
            if k == (1, 1, 1) and s == (1, 1, 1):
                gxp = np.moveaxis(dcols.reshape(n, do, ho, wo, cin), -1, 1)
            else:
                dcols = dcols.reshape(n, do, ho, wo, cin, kd, kh, kw)
                gxp = np.zeros_like(xp)
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            gxp[
                                :,
                                :,
                                a : a + s[0] * do : s[0],
                                b : b + s[1] * ho : s[1],
                                c : c + s[2] * wo : s[2],
                            ] += np.moveaxis(dcols[..., a, b, c], -1, 1)
            gx = gxp[:, :, p[0] : p[0] + d, p[1] : p[1] + h, p[2] : p[2] + wd]
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_result(out, parents, backward)


def maxpool3d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first maximum."""
    stride = window if stride is None else stride
    if stride != window:
        raise ValueError("maxpool3d supports non-overlapping windows only (stride == window)")
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects a 5-d tensor, got {x.shape}")
    n, c, d, h, w = x.shape
    k = window
    if d % k or h % k or w % k:
        raise ShapeError(f"maxpool3d: spatial shape {(d, h, w)} not divisible by {k}")
    blocks = (
        x.data.reshape(n, c, d // k, k, h // k, k, w // k, k)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d // k, h // k, w // k, k ** 3)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, d // k, h // k, w // k, k, k, k)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x.shape)
        )
        return (gx,)

    return make_result(out, (x,), backward)


def linear_interp_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """1D linear upsampling operator (half-pixel centers, edge-clamped)."""
    n_out = n_in * factor
    src = np.maximum((np.arange(n_out) + 0.5) / factor - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _apply_along(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.moveaxis(a, axis, -1) @ m.T, -1, axis)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    if x.ndim != 5:
        raise ShapeError(f"upsample_trilinear expects a 5-d tensor, got {x.shape}")
    mats = [linear_interp_matrix(x.shape[2 + i], factor, x.dtype) for i in range(3)]
    out = x.data
    for i, m in enumerate(mats):
        out = _apply_along(out, m, 2 + i)
    out = np.ascontiguousarray(out)

    def backward(g):
        for i, m in enumerate(mats):
            g = _apply_along(g, m.T, 2 + i)
        return (np.ascontiguousarray(g),)

    return make_result(out, (x,), backward)

