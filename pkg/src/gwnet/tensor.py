"""Reverse-mode automatic differentiation over dense NCHW arrays.

Every primitive registers a vector-Jacobian product that is itself built
from primitives, so gradients can be differentiated again (needed for the
critic's gradient-norm penalty).  Arrays are plain numpy; float64 is the
default dtype and float32 is supported for faster training.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_tracking_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array plus an optional backward graph edge.

    ``data`` is always a numpy float array.  ``grad`` (an ndarray) is only
    populated on leaves by :meth:`backward`; the functional :func:`grad`
    returns gradients as Tensors instead and can keep the graph alive for
    higher-order derivatives.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._op = ""

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar for common primitives ---------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_reduce(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_reduce(self, axis, keepdims)

    def backward(self, seed: Optional[np.ndarray] = None):
        """Accumulate gradients into ``.grad`` of every reachable leaf."""
        if seed is None:
            if self.size != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed_t = Tensor(np.ones_like(self.data))
        else:
            seed_t = Tensor(np.asarray(seed, dtype=self.dtype))
        cots = _backward_sweep(self, seed_t, create_graph=False)
        for t, cot in cots.items():
            if t._vjp is None and t.requires_grad:
                if t.grad is None:
                    t.grad = cot.data.copy()
                else:
                    t.grad = t.grad + cot.data


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


# -- graph traversal --------------------------------------------------------


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backward_sweep(root: Tensor, seed: Tensor, create_graph: bool) -> dict:
    """Propagate cotangents from ``root``; returns {tensor: cotangent}."""
    order = _topo_order(root)
    keep: dict[int, Tensor] = {id(t): t for t in order}
    cots: dict[int, Tensor] = {id(root): seed}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            cot = cots.get(id(node))
            if cot is None or node._vjp is None:
                continue
            grads = node._vjp(cot)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                prev = cots.get(id(parent))
                cots[id(parent)] = g if prev is None else prev + g
    return {keep[i]: c for i, c in cots.items()}


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         seed: Optional[Tensor] = None) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own graph,
    so expressions built from them can be differentiated again.
    """
    if seed is None:
        if output.size != 1:
            raise ValueError(
                f"grad() needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.ones_like(output.data))
    cots = _backward_sweep(output, seed, create_graph)
    out = []
    for t in inputs:
        g = cots.get(t)
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


# -- broadcasting helper -----------------------------------------------------


def _unbroadcast(cot: Tensor, shape: tuple) -> Tensor:
    """Reduce a cotangent back to ``shape`` after numpy broadcasting."""
    if cot.shape == shape:
        return cot
    extra = cot.ndim - len(shape)
    if extra > 0:
        cot = sum_reduce(cot, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and cot.shape[i] != 1)
    if axes:
        cot = sum_reduce(cot, axis=axes, keepdims=True)
    if cot.shape != shape:
        cot = reshape(cot, shape)
    return cot


# -- elementwise primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(cot):
        return _unbroadcast(cot, a.shape), _unbroadcast(cot, b.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(cot):
        return _unbroadcast(cot, a.shape), _unbroadcast(neg(cot), b.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(cot):
        return _unbroadcast(mul(cot, b), a.shape), _unbroadcast(mul(cot, a), b.shape)

    return _make(out, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(cot):
        ga = _unbroadcast(div(cot, b), a.shape)
        gb = _unbroadcast(neg(div(mul(cot, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    def vjp(cot):
        return (neg(cot),)

    return _make(-a.data, (a,), vjp, "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def vjp(cot):
        return (mul(cot, mul(power(a, p - 1.0), Tensor(np.asarray(p, a.dtype)))),)

    return _make(out, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = _make(out_data, (a,), None, "exp")

    def vjp(cot):
        return (mul(cot, out),)

    out._vjp = vjp if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    def vjp(cot):
        return (div(cot, a),)

    return _make(np.log(a.data), (a,), vjp, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    out = _make(out_data, (a,), None, "sqrt")

    def vjp(cot):
        return (div(cot, mul(out, Tensor(np.asarray(2.0, a.dtype)))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    out = _make(out_data, (a,), None, "tanh")

    def vjp(cot):
        return (mul(cot, sub(Tensor(np.asarray(1.0, a.dtype)), mul(out, out))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)

    def vjp(cot):
        return (mul(cot, Tensor(mask)),)

    return _make(a.data * mask, (a,), vjp, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, a.dtype.type(1.0), a.dtype.type(slope))

    def vjp(cot):
        return (mul(cot, Tensor(scale)),)

    return _make(a.data * scale, (a,), vjp, "leaky_relu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data).astype(a.dtype)

    def vjp(cot):
        return (mul(cot, Tensor(sign)),)

    return _make(np.abs(a.data), (a,), vjp, "abs")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    take_a = (a.data >= b.data).astype(a.dtype)

    def vjp(cot):
        ga = _unbroadcast(mul(cot, Tensor(take_a)), a.shape)
        gb = _unbroadcast(mul(cot, Tensor(1.0 - take_a)), b.shape)
        return ga, gb

    return _make(np.maximum(a.data, b.data), (a, b), vjp, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    take_a = (a.data <= b.data).astype(a.dtype)

    def vjp(cot):
        ga = _unbroadcast(mul(cot, Tensor(take_a)), a.shape)
        gb = _unbroadcast(mul(cot, Tensor(1.0 - take_a)), b.shape)
        return ga, gb

    return _make(np.minimum(a.data, b.data), (a, b), vjp, "minimum")


# -- shape primitives ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    orig = a.shape

    def vjp(cot):
        return (reshape(cot, orig),)

    return _make(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(cot):
        return (transpose(cot, inv),)

    return _make(a.data.transpose(axes), (a,), vjp, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape

    def vjp(cot):
        return (_unbroadcast(cot, orig),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), vjp, "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def vjp(cot):
        return tuple(
            slice_axis(cot, axis, int(offsets[i]), int(offsets[i + 1]))
            for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, vjp, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    total = a.shape[axis]

    def vjp(cot):
        return (pad_axis(cot, axis, start, total - stop),)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), vjp, "slice")


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    pads = [(0, 0)] * a.ndim
    pads[axis] = (before, after)

    def vjp(cot):
        return (slice_axis(cot, axis, before, before + a.shape[axis]),)

    return _make(np.pad(a.data, pads), (a,), vjp, "pad")


# -- reductions ---------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    orig = a.shape

    def vjp(cot):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(orig))
            cot = reshape(cot, kshape)
        return (broadcast_to(cot, orig),)

    return _make(out, (a,), vjp, "sum")


def mean_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum_reduce(a, axes, keepdims), Tensor(np.asarray(1.0 / count, a.dtype)))


def max_reduce(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    ax = axis % a.ndim
    out = a.data.max(axis=ax, keepdims=True)
    onehot = np.zeros_like(a.data)
    idx = a.data.argmax(axis=ax)
    np.put_along_axis(onehot, np.expand_dims(idx, ax), 1.0, axis=ax)

    def vjp(cot):
        if not keepdims:
            kshape = tuple(1 if i == ax else s for i, s in enumerate(a.shape))
            cot = reshape(cot, kshape)
        return (mul(broadcast_to(cot, a.shape), Tensor(onehot)),)

    data = out if keepdims else np.squeeze(out, axis=ax)
    return _make(data, (a,), vjp, "max")


def min_reduce(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return neg(max_reduce(neg(a), axis, keepdims))


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

    def vjp(cot):
        return matmul(cot, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), cot)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# -- convolution core ---------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    return xp


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_shapes(x: Tensor, w: Tensor, op: str):
    if x.ndim != 4:
        raise ValueError(f"{op}: input must be NCHW, got {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"{op}: kernel must be 4-D, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"{op}: input channels {x.shape[1]} != kernel in_ch {w.shape[1]}")


def conv2d_raw(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    """Cross-correlation of NCHW input with (out_ch, in_ch, kh, kw) kernel."""
    _check_conv_shapes(x, w, "conv2d")
    n, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(wdt, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: spatial dims {h}x{wdt} too small for kernel {kh}x{kw} "
            f"with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(w.data.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    keep_cols = cols if _grad_enabled and (x.requires_grad
                                           or w.requires_grad) else None

    def vjp(cot):
        gx = conv2d_input_grad(cot, w, stride, padding, (h, wdt))
        gw = conv2d_kernel_grad(x, cot, stride, padding, (kh, kw),
                                _cols=keep_cols)
        return gx, gw

    return _make(out, (x, w), vjp, "conv2d")


def conv2d_input_grad(g: Tensor, w: Tensor, stride: int, padding: int,
                      out_hw: tuple) -> Tensor:
    """Adjoint of :func:`conv2d_raw` w.r.t. its input (a transposed conv)."""
    n, cout, ho, wo = g.shape
    cout_w, cin, kh, kw = w.shape
    if cout != cout_w:
        raise ValueError(
            f"deconv2d: input channels {cout} != kernel out_ch {cout_w}")
    h, wdt = out_hw
    hp, wp = h + 2 * padding, wdt + 2 * padding
    need_h = (ho - 1) * stride + kh
    need_w = (wo - 1) * stride + kw
    if need_h > hp or need_w > wp:
        raise ValueError(
            f"deconv2d: output size {h}x{wdt} too small for {ho}x{wo} input "
            f"with kernel {kh}x{kw}, stride {stride}, padding {padding}")
    cols = np.matmul(w.data.reshape(cout, -1).T, g.data.reshape(n, cout, ho * wo))
    xp = _col2im(cols, n, cin, hp, wp, kh, kw, stride, ho, wo)
    out = xp[:, :, padding:padding + h, padding:padding + wdt]

    def vjp(cot):
        gg = conv2d_raw(cot, w, stride, padding)
        gw = conv2d_kernel_grad(cot, g, stride, padding, (kh, kw))
        return gg, gw

    return _make(np.ascontiguousarray(out), (g, w), vjp, "conv2d_input_grad")


def conv2d_kernel_grad(x: Tensor, g: Tensor, stride: int, padding: int,
                       k_hw: tuple, _cols: Optional[np.ndarray] = None) -> Tensor:
    """Adjoint of :func:`conv2d_raw` w.r.t. its kernel.

    ``_cols`` lets a conv forward hand over its im2col buffer; it is a pure
    function of ``x.data`` so the recorded graph is unchanged.
    """
    kh, kw = k_hw
    n, cin, h, wdt = x.shape
    _, cout, ho, wo = g.shape
    if _cols is None:
        xp = np.pad(x.data,
                    ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        _cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(g.data.reshape(n, cout, ho * wo),
                    _cols.transpose(0, 2, 1)).sum(axis=0)
    out = out.reshape(cout, cin, kh, kw)

    def vjp(cot):
        gx = conv2d_input_grad(g, cot, stride, padding, (h, wdt))
        gg = conv2d_raw(x, cot, stride, padding)
        return gx, gg

    return _make(out, (x, g), vjp, "conv2d_kernel_grad")


# -- constructors -------------------------------------------------------------


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def as_tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)
