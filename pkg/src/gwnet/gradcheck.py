"""Finite-difference verification of analytic gradients.

Checks run in double precision on small tensors: the op's output is probed
through a fixed random cotangent so the full Jacobian is exercised, then
every input element is perturbed centrally and compared against the
recorded backward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAX_ELEMENTS = 1000


def grad_check(op: Callable, inputs: Sequence[np.ndarray],
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps Tensors to one Tensor; ``inputs`` are float64 arrays (each
    treated as differentiable).  The relative error uses
    ``|a - n| / max(1, |a|, |n|)`` per element.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    total = sum(a.size for a in arrays)
    if total > MAX_ELEMENTS:
        raise ValueError(f"grad_check: {total} elements exceeds {MAX_ELEMENTS}")
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    probe = np.random.default_rng(0).standard_normal(out.shape)

    def scalar(ts):
        # no no_grad here: ops may differentiate internally (input_gradient)
        y = op(*ts)
        return float((y.data * probe).sum())

    analytic = T.grad((out * Tensor(probe)).sum(), leaves)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        a_flat = analytic[k].data.reshape(-1)
        base = leaf.data.copy()
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = scalar([Tensor(base) if j == k else Tensor(arrays[j])
                         for j in range(len(leaves))])
            flat[i] = orig - step
            lo = scalar([Tensor(base) if j == k else Tensor(arrays[j])
                         for j in range(len(leaves))])
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            denom = max(1.0, abs(a_flat[i]), abs(numeric))
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


def grad_check_tensors(op: Callable, tensors: Sequence[Tensor],
                       step: float = 1e-5) -> float:
    """grad_check over an op of Tensors, differentiating w.r.t. all of them."""
    return grad_check(op, [t.data for t in tensors], step=step)


# -- the standard suite -------------------------------------------------------


def _linear_critic_penalty(w: Tensor, x: Tensor) -> Tensor:
    """Unit-norm penalty of a linear critic, kept differentiable in ``w``."""
    from . import functional as F

    def critic(v: Tensor) -> Tensor:
        return (v * w).sum()

    g = F.input_gradient(critic, x, create_graph=True)
    norm = T.sqrt((g * g).sum() + 1e-12)
    return (norm - 1.0) ** 2


def suite_entries() -> list[tuple[str, float, Callable[[], float]]]:
    """(name, tolerance, runner) for every differentiable op and loss term."""
    from . import functional as F
    from . import losses as L

    rng = np.random.default_rng(20240811)

    def r(*shape):
        return rng.standard_normal(shape)

    def away_from_kinks(*shape):
        x = rng.standard_normal(shape)
        return x + 0.2 * np.sign(x)

    spd = lambda c: (lambda q: q @ q.T / c + np.eye(c))(r(c, c))

    x_img = r(1, 2, 6, 6)
    k5 = r(3, 2, 5, 5) * 0.3
    k5_t = r(2, 3, 5, 5) * 0.3

    def vn_op(a, b):
        return F.von_neumann_div(
            F.regularized_density((a + T.transpose(a, (1, 0))) * 0.5),
            F.regularized_density((b + T.transpose(b, (1, 0))) * 0.5))

    def const_term(wk, xa, xb):
        spec = F.ConvSpec(wk, stride=2, padding=2)
        fa = F.conv2d(xa, spec).reshape(1, -1)
        fb = F.conv2d(xb, spec).reshape(1, -1)
        d = fa - fb
        return (d * d).sum(axis=1).mean()

    def perceptual_term(wk, gen, ref):
        spec = F.ConvSpec(wk, stride=1, padding=1)
        fg = T.relu(F.conv2d(gen, spec))
        fr = T.relu(F.conv2d(ref, spec))
        return L.feature_distance(fg, fr, w_vn=0.1)

    checks = [
        ("conv2d", 1e-4, lambda: grad_check(
            lambda a, w: T.conv2d_raw(a, w, 2, 2), [x_img, k5])),
        ("conv2d_bias", 1e-4, lambda: grad_check(
            lambda a, w, b: F.conv2d(a, F.ConvSpec(w, 2, 2, b)),
            [x_img, k5, r(3)])),
        ("deconv2d", 1e-4, lambda: grad_check(
            lambda a, w: F.deconv2d(a, F.ConvSpec(w, 2, 2, None, 1)),
            [r(1, 3, 3, 3), k5_t])),
        ("relu", 1e-6, lambda: grad_check(
            lambda a: T.relu(a), [away_from_kinks(2, 3, 4, 4)])),
        ("leaky_relu", 1e-6, lambda: grad_check(
            lambda a: T.leaky_relu(a, 0.2), [away_from_kinks(2, 3, 4, 4)])),
        ("tanh", 1e-6, lambda: grad_check(lambda a: T.tanh(a), [r(2, 3, 4, 4)])),
        ("normalize_batch", 1e-4, lambda: grad_check(
            lambda a, g, b: F.normalize(a, "batch", g, b), [r(2, 3, 3, 3),
                                                            r(3), r(3)])),
        ("normalize_instance", 1e-4, lambda: grad_check(
            lambda a, g, b: F.normalize(a, "instance", g, b), [r(2, 3, 3, 3),
                                                               r(3), r(3)])),
        ("normalize_layer", 1e-4, lambda: grad_check(
            lambda a, g, b: F.normalize(a, "layer", g, b), [r(2, 3, 3, 3),
                                                            r(3), r(3)])),
        ("adain", 1e-4, lambda: grad_check(
            lambda a, b: F.adain(a, b), [r(1, 2, 3, 3), r(1, 2, 3, 3)])),
        ("set_reduce_avg", 1e-6, lambda: grad_check(
            lambda a, b, c: F.set_reduce([a, b, c], "avg"),
            [r(2, 2), r(2, 2), r(2, 2)])),
        ("set_reduce_max", 1e-6, lambda: grad_check(
            lambda a, b, c: F.set_reduce([a, b, c], "max"),
            [r(2, 2), r(2, 2), r(2, 2)])),
        ("set_reduce_min", 1e-6, lambda: grad_check(
            lambda a, b, c: F.set_reduce([a, b, c], "min"),
            [r(2, 2), r(2, 2), r(2, 2)])),
        ("channel_concat", 1e-6, lambda: grad_check(
            lambda a, b: F.channel_concat([a, b]).sum(axis=(2, 3)),
            [r(1, 2, 3, 3), r(1, 1, 3, 3)])),
        ("interpolate_uniform", 1e-6, lambda: grad_check(
            lambda a, b: F.interpolate_uniform(a, b, 0.37),
            [r(2, 1, 3, 3), r(2, 1, 3, 3)])),
        ("maxpool2d", 1e-5, lambda: grad_check(
            lambda a: F.maxpool2d(a, 2), [r(1, 2, 4, 4)])),
        ("matmul", 1e-5, lambda: grad_check(
            lambda a, b: T.matmul(a, b), [r(3, 4), r(4, 2)])),
        ("global_sum_pool", 1e-6, lambda: grad_check(
            lambda a: F.global_sum_pool(a), [r(2, 3, 3, 3)])),
        ("softmax_cross_entropy", 1e-5, lambda: grad_check(
            lambda a: F.softmax_cross_entropy(a, np.array([1, 0, 2])),
            [r(3, 4)])),
        ("input_gradient_linear", 1e-6, lambda: grad_check(
            lambda w, x: (F.input_gradient(
                lambda v: (v * w).sum(), x, create_graph=True) * x).sum(),
            [r(2, 3), r(2, 3)])),
        ("penalty_double_backward", 1e-3, lambda: grad_check(
            _linear_critic_penalty, [r(2, 4), r(2, 4)], step=1e-4)),
        ("von_neumann_div", 1e-4, lambda: grad_check(
            vn_op, [spd(3), spd(3)], step=1e-5)),
        ("adv_linear_critic", 1e-5, lambda: grad_check(
            lambda w, xr, xf: (xf * w).sum() - (xr * w).sum(),
            [r(1, 8), r(1, 8), r(1, 8)])),
        ("ac_loss", 1e-5, lambda: grad_check(
            lambda lr_, lf: L.ac_loss(lr_, lf, np.array([1, 0])),
            [r(2, 3), r(2, 3)])),
        ("pixel_l1", 1e-5, lambda: grad_check(
            lambda a, b: L.pixel_l1(a, b),
            [away_from_kinks(1, 1, 4, 4), r(1, 1, 4, 4) * 0.1])),
        ("const_loss_path", 1e-4, lambda: grad_check(
            const_term, [r(2, 1, 5, 5) * 0.5, r(1, 1, 8, 8), r(1, 1, 8, 8)])),
        ("perceptual_path", 1e-4, lambda: grad_check(
            perceptual_term, [r(3, 1, 3, 3) * 0.5, r(1, 1, 6, 6),
                              r(1, 1, 6, 6)], step=1e-5)),
    ]
    return [(name, tol, fn) for name, tol, fn in checks]


def run_suite(verbose: bool = True) -> list[tuple[str, float, float, bool]]:
    """Run every check; returns (name, max_rel_err, tolerance, passed)."""
    results = []
    for name, tol, fn in suite_entries():
        err = fn()
        ok = err < tol
        results.append((name, err, tol, ok))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<28} "
                  f"max_rel_err={err:.3e}  limit={tol:.0e}")
    return results

