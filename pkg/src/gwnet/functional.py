"""Composite differentiable operations built on the tensor primitives.

Everything here is expressed through the primitives in :mod:`gwnet.tensor`,
so first- and second-order gradients come from the same machinery.  The one
exception is the von Neumann divergence core, which carries a hand-derived
eigendecomposition VJP (first-order only; it never sits on the
double-backward path).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger("gwnet")

NORM_EPS = 1e-5


# -- conv specs ---------------------------------------------------------------


@dataclass
class ConvSpec:
    """Kernel, stride and padding for one (de)convolution.

    ``kernel`` is (out_ch, in_ch, kh, kw); ``bias`` has out_ch entries.
    ``output_padding`` disambiguates the transposed-conv output size (a
    stride-2 map from H has two valid preimages; 1 selects exact doubling).
    """

    kernel: Tensor
    stride: int = 1
    padding: int = 0
    bias: Optional[Tensor] = None
    output_padding: int = 0

    @property
    def out_ch(self):
        return self.kernel.shape[0]

    @property
    def in_ch(self):
        return self.kernel.shape[1]


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Strided cross-correlation; output H = floor((H+2p-k)/s)+1."""
    y = T.conv2d_raw(x, spec.kernel, spec.stride, spec.padding)
    if spec.bias is not None:
        y = y + spec.bias.reshape(1, spec.out_ch, 1, 1)
    return y


def deconv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    The stored kernel layout matches conv2d, (out_ch, in_ch, kh, kw) with
    in_ch = x channels, so a deconv with a conv's kernel transposed inverts
    that conv's sizing.
    """
    cout, cin, kh, kw = spec.kernel.shape
    if x.shape[1] != cin:
        raise ValueError(
            f"deconv2d: input channels {x.shape[1]} != kernel in_ch {cin}")
    n, _, h, w = x.shape
    oh = (h - 1) * spec.stride - 2 * spec.padding + kh + spec.output_padding
    ow = (w - 1) * spec.stride - 2 * spec.padding + kw + spec.output_padding
    wt = T.transpose(spec.kernel, (1, 0, 2, 3))
    y = T.conv2d_input_grad(x, wt, spec.stride, spec.padding, (oh, ow))
    if spec.bias is not None:
        y = y + spec.bias.reshape(1, cout, 1, 1)
    return y


# -- activations ---------------------------------------------------------------


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky_relu":
        return T.leaky_relu(x, slope)
    if kind == "tanh":
        return T.tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# -- normalization --------------------------------------------------------------

_NORM_AXES = {"batch": (0, 2, 3), "instance": (2, 3), "layer": (1, 2, 3)}


def normalize(x: Tensor, kind: str, gamma: Tensor, beta: Tensor,
              eps: float = NORM_EPS) -> Tensor:
    """Batch / instance / layer normalization with per-channel affine."""
    axes = _NORM_AXES.get(kind)
    if axes is None:
        raise ValueError(f"unknown normalization kind {kind!r}")
    if gamma.size != x.shape[1] or beta.size != x.shape[1]:
        raise ValueError(
            f"normalize: affine params need {x.shape[1]} entries, got "
            f"{gamma.size}/{beta.size}")
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    xn = centered / T.sqrt(var + eps)
    c = x.shape[1]
    return gamma.reshape(1, c, 1, 1) * xn + beta.reshape(1, c, 1, 1)


def normalize_with_stats(x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor,
                         beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Affine normalization against externally supplied per-channel stats."""
    c = x.shape[1]
    xn = (x - mean.reshape(1, c, 1, 1)) / T.sqrt(var.reshape(1, c, 1, 1) + eps)
    return gamma.reshape(1, c, 1, 1) * xn + beta.reshape(1, c, 1, 1)


def spatial_stats(x: Tensor, eps: float = NORM_EPS):
    """Per-(n, c) spatial mean and std, epsilon inside the square root."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    sd = T.sqrt((centered * centered).mean(axis=(2, 3), keepdims=True) + eps)
    return mu, sd


def adain(content: Tensor, style: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Re-normalize content to the style feature's spatial statistics.

    Computed as ``x + (sd_s/sd_c - 1) * (x - mu_c) + (mu_s - mu_c)``, which
    is algebraically ``sd_s * (x - mu_c) / sd_c + mu_s`` but returns the
    content bit-for-bit when the statistics coincide.
    """
    if content.shape[0] != style.shape[0] or content.shape[1] != style.shape[1]:
        raise ValueError(
            f"adain: content {content.shape} and style {style.shape} must "
            "share batch and channel dims")
    mu_c, sd_c = spatial_stats(content, eps)
    mu_s, sd_s = spatial_stats(style, eps)
    ratio = sd_s / sd_c
    one = Tensor(np.asarray(1.0, content.dtype))
    return content + (ratio - one) * (content - mu_c) + (mu_s - mu_c)


# -- set reduction ---------------------------------------------------------------


def _canonical_unique(xs: Sequence[Tensor]):
    """Order tensors by raw bytes and drop exact duplicates.

    Returns (unique tensors in byte order, index of each one's first
    occurrence in the original list).
    """
    first_seen: dict[bytes, int] = {}
    for i, t in enumerate(xs):
        key = t.data.tobytes()
        if key not in first_seen:
            first_seen[key] = i
    order = sorted(first_seen)
    return [xs[first_seen[k]] for k in order], [first_seen[k] for k in order]


def set_reduce(xs: Sequence[Tensor], mode: str) -> Tensor:
    """Elementwise avg/max/min over a set of same-shape tensors.

    The list is treated as a set: exact duplicates are dropped and the
    remainder is processed in byte order, so the result is invariant, bit
    for bit, under permutation and duplication.  Gradients go to the first
    occurrence of each distinct element (max/min additionally route ties to
    the earliest element in canonical order).
    """
    xs = list(xs)
    if not xs:
        raise ValueError("set_reduce: empty input list")
    shape = xs[0].shape
    for i, t in enumerate(xs):
        if t.shape != shape:
            raise ValueError(
                f"set_reduce: element {i} has shape {t.shape}, expected {shape}")
    unique, _ = _canonical_unique(xs)
    if mode == "avg":
        acc = unique[0]
        for t in unique[1:]:
            acc = acc + t
        return acc * Tensor(np.asarray(1.0 / len(unique), acc.dtype))
    if mode == "max":
        acc = unique[0]
        for t in unique[1:]:
            acc = T.maximum(acc, t)
        return acc
    if mode == "min":
        acc = unique[0]
        for t in unique[1:]:
            acc = T.minimum(acc, t)
        return acc
    raise ValueError(f"unknown set_reduce mode {mode!r}")


def channel_concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; N/H/W must match."""
    xs = list(xs)
    if not xs:
        raise ValueError("channel_concat: empty input list")
    ref = xs[0].shape
    for i, t in enumerate(xs):
        if t.ndim != 4:
            raise ValueError(f"channel_concat: element {i} is not NCHW: {t.shape}")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(
                f"channel_concat: element {i} shape {t.shape} incompatible "
                f"with {ref} (batch/spatial must match)")
    return T.concat(xs, axis=1)


def interpolate_uniform(a: Tensor, b: Tensor, u) -> Tensor:
    """(1-u)*a + u*b; u may be a float or a per-sample (N,1,1,1) array."""
    if a.shape != b.shape:
        raise ValueError(
            f"interpolate_uniform: shapes differ, {a.shape} vs {b.shape}")
    u_t = u if isinstance(u, Tensor) else Tensor(np.asarray(u, a.dtype))
    one = Tensor(np.asarray(1.0, a.dtype))
    return (one - u_t) * a + u_t * b


# -- pooling ---------------------------------------------------------------------


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be divisible by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by {k}")
    r = x.reshape(n, c, h // k, k, w // k, k)
    r = T.max_reduce(r, axis=3)
    r = T.max_reduce(r, axis=4)
    return r


def global_sum_pool(x: Tensor) -> Tensor:
    """Sum over spatial positions: NCHW -> (N, C)."""
    return x.sum(axis=(2, 3))


# -- classification loss -----------------------------------------------------------


def log_softmax(logits: Tensor) -> Tensor:
    m = T.max_reduce(logits, axis=1, keepdims=True)
    z = logits - m
    return z - T.log(T.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = (log_softmax(logits) * Tensor(onehot)).sum(axis=1)
    return -picked.mean()


# -- input gradients ----------------------------------------------------------------


def input_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                   create_graph: bool = False, method: str = "autodiff",
                   fd_step: float = 1e-3) -> Tensor:
    """Gradient of a scalar-valued function at ``x``.

    ``method='autodiff'`` returns a graph-carrying gradient (differentiable
    again when ``create_graph`` is set).  ``method='fdiff'`` substitutes
    central finite differences behind the same interface; it is logged and
    its result is a constant.
    """
    if method == "autodiff":
        leaf = Tensor(x.data, requires_grad=True)
        y = f(leaf)
        if y.size != 1:
            raise ValueError(f"input_gradient: f must be scalar, got {y.shape}")
        return T.grad(y, [leaf], create_graph=create_graph)[0]
    if method == "fdiff":
        log.warning("input_gradient: using finite-difference fallback "
                    "(step=%g, %d elements)", fd_step, x.size)
        base = x.data
        out = np.zeros_like(base)
        flat = out.reshape(-1)
        with T.no_grad():
            probe = base.copy()
            for i in range(base.size):
                orig = probe.reshape(-1)[i]
                probe.reshape(-1)[i] = orig + fd_step
                hi = f(Tensor(probe)).item()
                probe.reshape(-1)[i] = orig - fd_step
                lo = f(Tensor(probe)).item()
                probe.reshape(-1)[i] = orig
                flat[i] = (hi - lo) / (2 * fd_step)
        return Tensor(out)
    raise ValueError(f"unknown input_gradient method {method!r}")


# -- von Neumann divergence -----------------------------------------------------------

VN_RIDGE = 1e-4


def von_neumann_div(a: Tensor, b: Tensor) -> Tensor:
    """tr(A logA - A logB - A + B) for symmetric positive-definite A, B.

    This is the Bregman divergence of the negative matrix entropy: zero iff
    A equals B, nonnegative otherwise, and asymmetric in general.  The
    backward pass differentiates through both arguments (first order).
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"von_neumann_div: A must be square, got {a.shape}")
    if b.shape != a.shape:
        raise ValueError(
            f"von_neumann_div: shape mismatch {a.shape} vs {b.shape}")
    for name, m in (("A", a), ("B", b)):
        if not np.allclose(m.data, m.data.T, rtol=1e-8, atol=1e-10):
            raise ValueError(f"von_neumann_div: {name} is not symmetric")

    def _logm(mdat):
        lam, u = np.linalg.eigh((mdat + mdat.T) / 2)
        if lam.min() <= 0:
            raise ValueError(
                f"von_neumann_div: matrix not positive definite "
                f"(min eigenvalue {lam.min():.3e})")
        return u @ (np.log(lam)[:, None] * u.T), lam, u

    log_a, _, _ = _logm(a.data)
    log_b, lam_b, u_b = _logm(b.data)
    val = float(np.sum(a.data * (log_a - log_b)) - np.trace(a.data)
                + np.trace(b.data))
    out_data = np.asarray(val, dtype=a.dtype)

    def vjp(cot):
        # d/dA tr(A logA - A logB - A + B) = logA - logB
        ga = cot.reshape(()) * Tensor((log_a - log_b).astype(a.dtype))
        # d/dB -tr(A logB) uses the Daleckii-Krein derivative of log at B
        lam_col = lam_b[:, None]
        diff = lam_col - lam_col.T
        same = np.abs(diff) < 1e-12 * np.maximum(np.abs(lam_col), 1.0)
        num = np.log(lam_col) - np.log(lam_col.T)
        kern = np.where(same, 1.0 / lam_col, num / np.where(same, 1.0, diff))
        inner = u_b.T @ a.data @ u_b
        dlog = u_b @ (inner * kern) @ u_b.T
        gb_mat = np.eye(a.shape[0]) - dlog
        gb = cot.reshape(()) * Tensor(gb_mat.astype(a.dtype))
        return ga, gb

    return T._make(out_data, (a, b), vjp, "von_neumann")


def regularized_density(a: Tensor, ridge: float = VN_RIDGE) -> Tensor:
    """Ridge a symmetric PSD matrix and scale it to unit trace."""
    c = a.shape[0]
    eye = Tensor(np.eye(c, dtype=a.dtype) * ridge)
    m = a + eye
    return m / _trace(m)


def _trace(m: Tensor) -> Tensor:
    c = m.shape[0]
    mask = Tensor(np.eye(c, dtype=m.dtype))
    return (m * mask).sum()


def channel_covariance(x: Tensor) -> Tensor:
    """Channel-by-channel covariance of an NCHW feature map.

    Treats every (sample, spatial position) pair as one observation of a
    C-dimensional variable.
    """
    n, c, h, w = x.shape
    flat = T.transpose(x, (1, 0, 2, 3)).reshape(c, n * h * w)
    mu = flat.mean(axis=1, keepdims=True)
    cen = flat - mu
    cov = T.matmul(cen, T.transpose(cen, (1, 0))) * Tensor(
        np.asarray(1.0 / (n * h * w), x.dtype))
    return cov
