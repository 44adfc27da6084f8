"""Training objectives: adversarial pair, gradient penalty, auxiliary
classification, encoder-constancy, pixel, and perceptual terms.

Sign convention: the critic minimizes score(fake) - score(real) plus the
penalty; the generator minimizes -score(fake) plus its reconstruction and
perceptual terms.  All terms are batch means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict, fields as dc_fields
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .percep import DEEP_TAPS, TAP_NAMES, TapClassifier
from .tensor import Tensor
from .wnet import Critic, Generator, discriminate

log = logging.getLogger("gwnet")


@dataclass
class LossWeights:
    alpha: float = 1.0          # adversarial
    alpha_gp: float = 10.0      # gradient penalty
    beta: float = 1.0           # auxiliary classification
    lambda_pixel: float = 50.0
    psi_p: float = 1.0          # content-encoder constancy
    psi_r: float = 1.0          # style-encoder constancy
    w_real: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    w_content: tuple = (1.0, 1.0)
    w_style: tuple = (1.0, 1.0)
    w_vn: float = 0.1           # covariance-divergence share of each tap

    def __post_init__(self):
        self.w_real = tuple(float(w) for w in self.w_real)
        self.w_content = tuple(float(w) for w in self.w_content)
        self.w_style = tuple(float(w) for w in self.w_style)
        scalars = [self.alpha, self.alpha_gp, self.beta, self.lambda_pixel,
                   self.psi_p, self.psi_r, self.w_vn]
        if any(v < 0 for v in scalars + list(self.w_real + self.w_content
                                             + self.w_style)):
            raise ValueError("loss weights must be nonnegative")
        if len(self.w_real) != len(TAP_NAMES):
            raise ValueError(f"w_real needs {len(TAP_NAMES)} entries")
        if len(self.w_content) != len(DEEP_TAPS) or len(self.w_style) != len(DEEP_TAPS):
            raise ValueError(f"w_content/w_style need {len(DEEP_TAPS)} entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("w_real", "w_content", "w_style"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


REPORT_FIELDS = (
    "step", "adv_g", "adv_d", "grad_penalty", "grad_norm", "ac", "pixel_l1",
    "const_p", "const_r", "phi_real", "phi_content", "phi_style", "phi_total",
    "total_g", "total_d",
)


@dataclass
class LossReport:
    """Scalar value of every term at one optimization step."""

    step: int = 0
    adv_g: float = 0.0
    adv_d: float = 0.0
    grad_penalty: float = 0.0
    grad_norm: float = 0.0
    ac: float = 0.0
    pixel_l1: float = 0.0
    const_p: float = 0.0
    const_r: float = 0.0
    phi_real: float = 0.0
    phi_content: float = 0.0
    phi_style: float = 0.0
    phi_total: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def row(self) -> str:
        vals = [getattr(self, f) for f in REPORT_FIELDS]
        return ",".join(str(v) if isinstance(v, int) else repr(float(v))
                        for v in vals)

    @staticmethod
    def header() -> str:
        return ",".join(REPORT_FIELDS)

    def check_finite(self):
        for f in REPORT_FIELDS:
            v = getattr(self, f)
            if not np.isfinite(v):
                raise FloatingPointError(f"loss term {f!r} is not finite: {v}")


# -- adversarial -----------------------------------------------------------------


def adv_losses(critic: Critic, triple_real: Tensor,
               triple_fake: Tensor) -> tuple[Tensor, Tensor]:
    """(generator score, critic objective): mean D(fake), D(fake) - D(real)."""
    score_real, _ = critic(triple_real)
    score_fake, _ = critic(triple_fake)
    adv_g = score_fake.mean()
    adv_d = score_fake.mean() - score_real.mean()
    return adv_g, adv_d


def gradient_penalty(critic: Critic, proto_pick: Tensor, real_cand: Tensor,
                     fake_cand: Tensor, ref_pick: Tensor, u: np.ndarray,
                     method: str = "autodiff") -> tuple[Tensor, float]:
    """Two-sided unit-norm penalty on interpolated candidates.

    ``u`` is one uniform draw per sample; interpolation touches only the
    candidate slot.  Returns (penalty, mean gradient norm).  With
    ``method='fdiff'`` the inner gradient is finite differences and the
    penalty is a reporting-only constant (no parameter gradients).
    """
    n = real_cand.shape[0]
    u = np.asarray(u, dtype=real_cand.dtype).reshape(n, 1, 1, 1)
    with T.no_grad():
        x_hat_data = (1.0 - u) * real_cand.data + u * fake_cand.data
    proto_c = proto_pick.detach()
    ref_c = ref_pick.detach()

    if method == "fdiff":
        g = F.input_gradient(
            lambda x: discriminate(critic, proto_c, x, ref_c)[0].sum(),
            Tensor(x_hat_data), method="fdiff")
        norms_sq = (g * g).sum(axis=(1, 2, 3))
    elif method == "autodiff":
        x_hat = Tensor(x_hat_data, requires_grad=True)
        score, _ = discriminate(critic, proto_c, x_hat, ref_c)
        g = T.grad(score.sum(), [x_hat], create_graph=True)[0]
        norms_sq = (g * g).sum(axis=(1, 2, 3))
    else:
        raise ValueError(f"unknown gradient_penalty method {method!r}")
    # tiny floor keeps sqrt differentiable if a gradient vanishes exactly
    norms = T.sqrt(norms_sq + 1e-12)
    penalty = ((norms - 1.0) ** 2).mean()
    return penalty, float(norms.data.mean())


def ac_loss(style_logits_real: Tensor, style_logits_fake: Tensor,
            true_style: np.ndarray) -> Tensor:
    """Cross-entropy of the true style under both triples' logits."""
    return (F.softmax_cross_entropy(style_logits_real, true_style)
            + F.softmax_cross_entropy(style_logits_fake, true_style))


# -- reconstruction --------------------------------------------------------------


def _flatten_terminal(feat: Tensor) -> Tensor:
    n = feat.shape[0]
    return feat.reshape(n, feat.size // n)


def const_losses(gen: Generator, protos: Tensor, refs: Tensor,
                 generated: Tensor) -> tuple[Tensor, Tensor]:
    """Squared distance between terminal encoder features of the inputs and
    of the generated glyph.

    The content probe replicates the generated glyph across all M channels;
    the style probe treats it as a single-element reference set.
    """
    m = gen.cfg.M
    probe_p = F.channel_concat([generated] * m)
    f_inputs = gen.encode_content(protos)[-1]
    f_probe = gen.encode_content(probe_p)[-1]
    diff_p = _flatten_terminal(f_inputs) - _flatten_terminal(f_probe)
    const_p = (diff_p * diff_p).sum(axis=1).mean()

    r_inputs = gen.encode_style(refs)[-1]
    b = generated.shape[0]
    probe_r = generated.reshape(b, 1, 1, generated.shape[2], generated.shape[3])
    r_probe = gen.encode_style(probe_r)[-1]
    diff_r = _flatten_terminal(r_inputs) - _flatten_terminal(r_probe)
    const_r = (diff_r * diff_r).sum(axis=1).mean()
    return const_p, const_r


def pixel_l1(generated: Tensor, target: Tensor) -> Tensor:
    """Mean absolute pixel difference."""
    if generated.shape != target.shape:
        raise ValueError(
            f"pixel_l1: shapes differ, {generated.shape} vs {target.shape}")
    return T.abs_(generated - target).mean()


# -- perceptual -------------------------------------------------------------------


def feature_distance(feat_a: Tensor, feat_b: Tensor, w_vn: float) -> Tensor:
    """MSE plus weighted covariance divergence between two feature maps."""
    d = feat_a - feat_b
    loss = (d * d).mean()
    if w_vn > 0.0:
        cov_a = F.regularized_density(F.channel_covariance(feat_a))
        cov_b = F.regularized_density(F.channel_covariance(feat_b))
        loss = loss + w_vn * F.von_neumann_div(cov_a, cov_b)
    return loss


def perceptual_term(net: TapClassifier, generated: Tensor,
                    reference_feats: dict[str, Tensor],
                    taps: Sequence[str], tap_weights: Sequence[float],
                    w_vn: float) -> Tensor:
    """Weighted tap-feature distance between generated and cached features."""
    gen_feats = net.extract_features(generated, taps)
    total = Tensor(np.asarray(0.0, generated.dtype))
    for tap, w in zip(taps, tap_weights):
        if w == 0.0:
            continue
        total = total + w * feature_distance(gen_feats[tap],
                                             reference_feats[tap], w_vn)
    return total


def reference_features(net: TapClassifier, image: Tensor,
                       taps: Sequence[str]) -> dict[str, Tensor]:
    """Constant tap features of a target image (no graph)."""
    with T.no_grad():
        return net.extract_features(image, taps)


def perceptual_total(phi_real: TapClassifier, phi_content: TapClassifier,
                     phi_style: TapClassifier, generated: Tensor,
                     target: Tensor, content_probe: Tensor,
                     style_probe: Tensor, weights: LossWeights
                     ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(real, content, style, total) perceptual losses.

    The real term compares against the ground-truth glyph over all five
    taps; content and style terms use only the two deepest taps against the
    picked prototype and reference.
    """
    real_ref = reference_features(phi_real, target, TAP_NAMES)
    l_real = perceptual_term(phi_real, generated, real_ref, TAP_NAMES,
                             weights.w_real, weights.w_vn)
    content_ref = reference_features(phi_content, content_probe, DEEP_TAPS)
    l_content = perceptual_term(phi_content, generated, content_ref,
                                DEEP_TAPS, weights.w_content, weights.w_vn)
    style_ref = reference_features(phi_style, style_probe, DEEP_TAPS)
    l_style = perceptual_term(phi_style, generated, style_ref, DEEP_TAPS,
                              weights.w_style, weights.w_vn)
    return l_real, l_content, l_style, l_real + l_content + l_style


# -- totals -----------------------------------------------------------------------


def total_g(adv_g: Tensor, ac: Tensor, pixel: Tensor, phi_total: Tensor,
            const_p: Tensor, const_r: Tensor, w: LossWeights) -> Tensor:
    return (-w.alpha * adv_g + w.beta * ac + w.lambda_pixel * pixel
            + phi_total + w.psi_p * const_p + w.psi_r * const_r)


def total_d(adv_d: Tensor, grad_penalty_term: Tensor, ac: Tensor,
            w: LossWeights) -> Tensor:
    return w.alpha * adv_d + w.alpha_gp * grad_penalty_term + w.beta * ac
