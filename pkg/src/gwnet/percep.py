"""Small VGG-style classifiers whose intermediate features feed the
perceptual losses.

Five conv blocks with (2, 2, 3, 3, 3) conv3x3 layers at widths
(16, 32, 64, 128, 128), max-pooled between blocks.  The last conv of each
block is a named tap: phi1_2, phi2_2, phi3_3, phi4_3, phi5_3.  A trunk can
carry a content head, a style head, or both.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import functional as F
from . import nn
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger("gwnet")

BLOCK_CONVS = (2, 2, 3, 3, 3)
BLOCK_WIDTHS = (16, 32, 64, 128, 128)
TAP_NAMES = ("phi1_2", "phi2_2", "phi3_3", "phi4_3", "phi5_3")
DEEP_TAPS = ("phi4_3", "phi5_3")


class TapClassifier(nn.Module):
    """Conv trunk with named feature taps and up to two linear heads."""

    def __init__(self, size: int, n_content: int = 0, n_style: int = 0,
                 rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if size % (2 ** len(BLOCK_CONVS)) != 0:
            raise ValueError(f"input size {size} not divisible by "
                             f"{2 ** len(BLOCK_CONVS)}")
        self.size = size
        self.n_content = n_content
        self.n_style = n_style
        convs = []
        prev = 1
        for n_conv, w in zip(BLOCK_CONVS, BLOCK_WIDTHS):
            block = []
            for _ in range(n_conv):
                block.append(nn.Conv2d(prev, w, 3, stride=1, padding=1,
                                       rng=rng, dtype=dtype, init="he"))
                prev = w
            convs.append(block)
        self.conv_blocks = [c for block in convs for c in block]
        self._block_sizes = list(BLOCK_CONVS)
        feat = BLOCK_WIDTHS[-1] * (size // 2 ** len(BLOCK_CONVS)) ** 2
        self.content_head = (nn.Linear(feat, n_content, rng=rng, dtype=dtype,
                                       init="he") if n_content else None)
        self.style_head = (nn.Linear(feat, n_style, rng=rng, dtype=dtype,
                                     init="he") if n_style else None)

    def _trunk(self, x: Tensor, want: Optional[set] = None,
               run_heads: bool = False):
        taps = {}
        h = x
        ci = 0
        for b, n_conv in enumerate(self._block_sizes):
            for k in range(n_conv):
                h = T.relu(self.conv_blocks[ci](h))
                ci += 1
            name = TAP_NAMES[b]
            if want is None or name in want:
                taps[name] = h
            h = F.maxpool2d(h, 2)
        if not run_heads:
            return taps, None, None
        flat = h.reshape(h.shape[0], h.shape[1] * h.shape[2] * h.shape[3])
        content = self.content_head(flat) if self.content_head else None
        style = self.style_head(flat) if self.style_head else None
        return taps, content, style

    def forward(self, x: Tensor):
        _, content, style = self._trunk(x, want=set(), run_heads=True)
        return content, style

    def extract_features(self, x: Tensor,
                         taps: Sequence[str] = TAP_NAMES) -> dict[str, Tensor]:
        """Named activation maps, differentiable w.r.t. ``x``."""
        for t in taps:
            if t not in TAP_NAMES:
                raise ValueError(f"unknown tap {t!r}; taps are {TAP_NAMES}")
        got, _, _ = self._trunk(x, want=set(taps))
        return {t: got[t] for t in taps}

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        self.eval()
        return self


@dataclass
class TrainedClassifier:
    net: TapClassifier
    content_accuracy: Optional[float]
    style_accuracy: Optional[float]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def train_classifier(images: np.ndarray, content_labels: Optional[np.ndarray],
                     style_labels: Optional[np.ndarray], size: int,
                     n_content: int = 0, n_style: int = 0, epochs: int = 30,
                     batch: int = 32, lr: float = 1e-3, seed: int = 0,
                     dtype=np.float64) -> TrainedClassifier:
    """Cross-entropy training of one trunk with the requested heads.

    ``images`` is (n, H, W) in [-1, 1]; labels are 0-based ints.  Training
    is deterministic for a fixed seed.
    """
    if n_content == 0 and n_style == 0:
        raise ValueError("classifier needs at least one head")
    for name, labels, k in (("content", content_labels, n_content),
                            ("style", style_labels, n_style)):
        if k and labels is not None and len(np.unique(labels)) < 2:
            raise ValueError(f"{name} head needs >= 2 distinct classes")
    rng = np.random.default_rng(seed)
    net = TapClassifier(size, n_content, n_style, rng=rng, dtype=dtype)
    opt = nn.Adam(net.parameters(), lr=lr, beta1=0.9, beta2=0.999)
    n = images.shape[0]
    x_all = images[:, None].astype(dtype)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            xb = Tensor(x_all[idx])
            _, c_logits, s_logits = net._trunk(xb, want=set(), run_heads=True)
            loss = Tensor(np.asarray(0.0, x_all.dtype))
            if c_logits is not None:
                loss = loss + F.softmax_cross_entropy(c_logits,
                                                      content_labels[idx])
            if s_logits is not None:
                loss = loss + F.softmax_cross_entropy(s_logits,
                                                      style_labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    c_acc = s_acc = None
    with T.no_grad():
        c_out = []
        s_out = []
        for lo in range(0, n, batch):
            _, c_logits, s_logits = net._trunk(Tensor(x_all[lo:lo + batch]),
                                               want=set(), run_heads=True)
            if c_logits is not None:
                c_out.append(c_logits.data)
            if s_logits is not None:
                s_out.append(s_logits.data)
        if c_out:
            c_acc = _accuracy(np.concatenate(c_out), content_labels)
        if s_out:
            s_acc = _accuracy(np.concatenate(s_out), style_labels)
    log.info("classifier trained: content=%s style=%s",
             f"{c_acc:.3f}" if c_acc is not None else "-",
             f"{s_acc:.3f}" if s_acc is not None else "-")
    return TrainedClassifier(net, c_acc, s_acc)


def classify(net: TapClassifier, images: np.ndarray, batch: int = 64):
    """(content_logits, style_logits) over a stack of (n, H, W) images."""
    c_out, s_out = [], []
    x_all = images[:, None]
    with T.no_grad():
        for lo in range(0, images.shape[0], batch):
            c_logits, s_logits = net(Tensor(x_all[lo:lo + batch]))
            if c_logits is not None:
                c_out.append(c_logits.data)
            if s_logits is not None:
                s_out.append(s_logits.data)
    content = np.concatenate(c_out) if c_out else None
    style = np.concatenate(s_out) if s_out else None
    return content, style


def save_classifier(path: str, net: TapClassifier, meta: Optional[dict] = None):
    config = {
        "size": net.size,
        "n_content": net.n_content,
        "n_style": net.n_style,
        "meta": meta or {},
    }
    ckpt.save(path, ckpt.MAGIC_CLASSIFIER, config, net.state_arrays())


def load_classifier(path: str, dtype=np.float64) -> TapClassifier:
    config, arrays = ckpt.load(path, ckpt.MAGIC_CLASSIFIER)
    net = TapClassifier(config["size"], config["n_content"],
                        config["n_style"], dtype=dtype)
    net.load_state_arrays(arrays)
    net.freeze()
    return net
