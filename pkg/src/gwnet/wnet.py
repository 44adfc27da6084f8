"""Generator (two encoders, feature mixer, decoder) and critic.

The generator halves 64x64 glyphs through six stride-2 conv blocks down to
1x1x512 per encoder path, mixes content and style features layer by layer,
and mirrors the chain back up with stride-2 transposed convs.  The critic
scores (prototype, candidate, reference) triples channel-concatenated to a
3-channel input, with an auxiliary style-classification head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from . import nn
from . import tensor as T
from . import checkpoint as ckpt
from .tensor import Tensor

DEFAULT_WIDTHS = (64, 128, 256, 512, 512, 512)


def depth_for_size(size: int) -> int:
    """Number of stride-2 halvings from ``size`` down to 1."""
    n = int(round(np.log2(size)))
    if 2 ** n != size or n < 3:
        raise ValueError(f"glyph size must be a power of two >= 8, got {size}")
    return n


def scaled_widths(size: int, mult: float = 1.0) -> tuple[int, ...]:
    depth = depth_for_size(size)
    base = DEFAULT_WIDTHS[:depth]
    if len(base) < depth:
        base = base + (DEFAULT_WIDTHS[-1],) * (depth - len(base))
    return tuple(max(4, int(round(w * mult))) for w in base)


@dataclass
class MixerConfig:
    variant: str = "bn"            # bn | adain
    block_kind: str = "residual"   # residual | dense
    blocks_per_layer: int = 3
    deep_boundary: int = 4         # layers gamma >= this use the concat shortcut

    def validate(self, depth: int):
        if self.variant not in ("bn", "adain"):
            raise ValueError(f"unknown mixer variant {self.variant!r}")
        if self.block_kind not in ("residual", "dense"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if not 1 <= self.deep_boundary <= depth:
            raise ValueError(
                f"deep_boundary {self.deep_boundary} outside [1, {depth}]")
        if self.blocks_per_layer < 1:
            raise ValueError("blocks_per_layer must be >= 1")


@dataclass
class ModelConfig:
    size: int = 64
    M: int = 3
    n_styles: int = 5
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    mixer: MixerConfig = field(default_factory=MixerConfig)
    leaky_slope: float = 0.2
    dtype: str = "float64"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if isinstance(self.mixer, dict):
            self.mixer = MixerConfig(**self.mixer)
        depth = depth_for_size(self.size)
        if len(self.widths) != depth:
            raise ValueError(
                f"{len(self.widths)} widths for depth-{depth} chain")
        self.mixer.validate(depth)

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def critic_widths(self) -> tuple[int, ...]:
        return self.widths[:self.depth - 1]

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["mixer"] = MixerConfig(**d["mixer"])
        d["widths"] = tuple(d["widths"])
        return ModelConfig(**d)


# -- building blocks -------------------------------------------------------------


class ConvBlock(nn.Module):
    """conv(5x5, stride 2) -> norm -> activation."""

    def __init__(self, in_ch, out_ch, norm, act, slope, rng, dtype):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 5, stride=2, padding=2,
                              rng=rng, dtype=dtype)
        self.norm = nn.make_norm(norm, out_ch, dtype=dtype)
        self.act = act
        self.slope = slope

    def forward(self, x):
        h = self.norm(self.conv(x))
        return F.activation(h, self.act, self.slope)


class DeconvBlock(nn.Module):
    """deconv(5x5, stride 2) -> norm -> activation; ``final`` maps to tanh."""

    def __init__(self, in_ch, out_ch, norm, slope, rng, dtype,
                 final: bool = False):
        super().__init__()
        self.deconv = nn.Deconv2d(in_ch, out_ch, 5, stride=2, padding=2,
                                  output_padding=1, rng=rng, dtype=dtype)
        self.norm = nn.Identity() if final else nn.make_norm(norm, out_ch,
                                                             dtype=dtype)
        self.slope = slope
        self.final = final

    def forward(self, x):
        h = self.norm(self.deconv(x))
        if self.final:
            return T.tanh(h)
        return T.leaky_relu(h, self.slope)


class Encoder(nn.Module):
    """Stride-2 conv stack returning every intermediate feature map."""

    def __init__(self, in_ch: int, widths, norm: Optional[str], slope, rng,
                 dtype):
        super().__init__()
        blocks = []
        prev = in_ch
        for w in widths:
            blocks.append(ConvBlock(prev, w, norm, "relu", slope, rng, dtype))
            prev = w
        self.blocks = blocks

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for b in self.blocks:
            h = b(h)
            feats.append(h)
        return feats


class StyleTransform(nn.Module):
    """Two conv(3x3)-ReLU stages mapping a combined style feature."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1,
                               rng=rng, dtype=dtype)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1,
                               rng=rng, dtype=dtype)

    def forward(self, x):
        return T.relu(self.conv2(T.relu(self.conv1(x))))


class MixBlock(nn.Module):
    """Pre-activation norm -> ReLU -> conv(3x3); residual add or dense concat.

    In the adain variant the normalization takes its statistics from a
    transformed style feature instead of batch statistics.
    """

    def __init__(self, in_ch, out_ch, kind, variant, rng, dtype):
        super().__init__()
        self.kind = kind
        self.variant = variant
        if variant == "bn":
            self.norm = nn.BatchNorm2d(in_ch, dtype=dtype)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1,
                              rng=rng, dtype=dtype)

    def forward(self, x: Tensor, style_sig: Optional[Tensor]) -> Tensor:
        if self.variant == "bn":
            h = self.norm(x)
        else:
            h = F.adain(x, style_sig)
        h = self.conv(T.relu(h))
        if self.kind == "residual":
            return x + h
        return F.channel_concat([x, h])


def grouped_style_stats_view(f_r: Tensor) -> Tensor:
    """View a concatenated (avg|max|min) style feature as one per-channel map.

    (B, 3C, H, W) -> (B, C, 3H, W) so that spatial statistics pool over all
    three reductions of each underlying channel.
    """
    b, c3, h, w = f_r.shape
    c = c3 // 3
    r = f_r.reshape(b, 3, c, h, w)
    r = T.transpose(r, (0, 2, 1, 3, 4))
    return r.reshape(b, c, 3 * h, w)


class MixLayer(nn.Module):
    """Per-resolution feature mixing: concat shortcut or content blocks."""

    def __init__(self, gamma: int, content_ch: int, style_ch: int,
                 cfg: MixerConfig, rng, dtype):
        super().__init__()
        self.gamma = gamma
        self.deep = gamma >= cfg.deep_boundary
        self.variant = cfg.variant
        self.out_ch = content_ch + style_ch if self.deep else content_ch
        if self.deep:
            return
        blocks = []
        transforms = []
        ch = content_ch
        for b in range(cfg.blocks_per_layer):
            out = content_ch
            blocks.append(MixBlock(ch, out, cfg.block_kind, cfg.variant,
                                   rng, dtype))
            if cfg.variant == "adain":
                # dense blocks widen per step, so each needs its own
                # transform; residual blocks share one per layer
                if cfg.block_kind == "dense" or not transforms:
                    transforms.append(StyleTransform(style_ch, ch, rng, dtype))
            ch = ch + out if cfg.block_kind == "dense" else out
        self.out_ch = ch
        self.blocks = blocks
        self.transforms = transforms

    def forward(self, f_p: Tensor, f_r: Tensor) -> Tensor:
        if self.deep:
            return F.channel_concat([f_p, f_r])
        if self.variant == "adain":
            h = F.adain(f_p, grouped_style_stats_view(f_r))
        else:
            h = f_p
        for b, block in enumerate(self.blocks):
            sig = None
            if self.variant == "adain":
                t = self.transforms[b if len(self.transforms) > 1 else 0]
                sig = t(f_r)
            h = block(h, sig)
        return h


class Decoder(nn.Module):
    """Deconv stack consuming one mixed feature per resolution."""

    def __init__(self, mixed_channels: list[int], widths, norm, slope, rng,
                 dtype):
        super().__init__()
        depth = len(widths)
        blocks = []
        prev = 0
        for t in range(depth):
            in_ch = mixed_channels[depth - 1 - t] + prev
            final = t == depth - 1
            out_ch = 1 if final else widths[depth - 2 - t]
            blocks.append(DeconvBlock(in_ch, out_ch, norm, slope, rng, dtype,
                                      final=final))
            prev = out_ch
        self.blocks = blocks

    def forward(self, mixed: list[Tensor]) -> Tensor:
        depth = len(self.blocks)
        if len(mixed) != depth:
            raise ValueError(f"decoder needs {depth} features, got {len(mixed)}")
        h = None
        for t, block in enumerate(self.blocks):
            feat = mixed[depth - 1 - t]
            h = feat if h is None else F.channel_concat([h, feat])
            h = block(h)
        return h


# -- generator ---------------------------------------------------------------------


def canonical_reference_order(arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Sort reference bitmaps by raw bytes and drop exact duplicates."""
    if not arrays:
        raise ValueError("need at least one style reference")
    first: dict[bytes, np.ndarray] = {}
    for a in arrays:
        key = a.tobytes()
        if key not in first:
            first[key] = a
    return [first[k] for k in sorted(first)]


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        dtype = cfg.np_dtype()
        mixer = cfg.mixer
        enc_norm = "layer" if mixer.variant == "adain" else "batch"
        style_norm = None if mixer.variant == "adain" else "batch"
        dec_norm = "instance" if mixer.variant == "adain" else "batch"
        self.content_enc = Encoder(cfg.M, cfg.widths, enc_norm,
                                   cfg.leaky_slope, rng, dtype)
        self.style_enc = Encoder(1, cfg.widths, style_norm, cfg.leaky_slope,
                                 rng, dtype)
        self.mix_layers = [
            MixLayer(g + 1, w, 3 * w, mixer, rng, dtype)
            for g, w in enumerate(cfg.widths)
        ]
        mixed_ch = [m.out_ch for m in self.mix_layers]
        self.decoder = Decoder(mixed_ch, cfg.widths, dec_norm,
                               cfg.leaky_slope, rng, dtype)

    # -- encoding ------------------------------------------------------------

    def encode_content(self, protos: Tensor) -> list[Tensor]:
        """M-channel prototype stack -> per-layer features."""
        if protos.shape[1] != self.cfg.M:
            raise ValueError(
                f"expected {self.cfg.M} prototype channels, got {protos.shape[1]}")
        return self.content_enc(protos)

    def encode_style(self, refs: Tensor) -> list[Tensor]:
        """(B, L, 1, H, W) references -> per-layer combined features.

        Each reference runs through the shared-weight encoder; per layer the
        avg/max/min over the reference axis are channel-concatenated.
        """
        if refs.ndim != 5:
            raise ValueError(f"references must be (B, L, 1, H, W), got {refs.shape}")
        b, l = refs.shape[0], refs.shape[1]
        if l < 1:
            raise ValueError("need at least one style reference")
        flat = refs.reshape(b * l, 1, refs.shape[3], refs.shape[4])
        feats = self.style_enc(flat)
        combined = []
        for f in feats:
            _, c, h, w = f.shape
            g = f.reshape(b, l, c, h, w)
            parts = [
                g.mean(axis=1),
                T.max_reduce(g, axis=1),
                T.min_reduce(g, axis=1),
            ]
            combined.append(T.concat(parts, axis=1))
        return combined

    def mix_features(self, f_p: list[Tensor], f_r: list[Tensor]) -> list[Tensor]:
        return [layer(p, r) for layer, p, r in zip(self.mix_layers, f_p, f_r)]

    def decode(self, mixed: list[Tensor]) -> Tensor:
        return self.decoder(mixed)

    def forward(self, protos: Tensor, refs: Tensor) -> Tensor:
        f_p = self.encode_content(protos)
        f_r = self.encode_style(refs)
        return self.decode(self.mix_features(f_p, f_r))

    # -- glyph-level API -------------------------------------------------------

    def encode_reference_set(self, references: Sequence[np.ndarray]) -> list[Tensor]:
        """Combined style features of one reference set (batch of one).

        Runs in inference mode; the set is canonicalized first, so permuting
        or duplicating the references cannot change the result bit-for-bit.
        """
        dtype = self.cfg.np_dtype()
        refs = canonical_reference_order(
            [np.asarray(r, dtype=dtype) for r in references])
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                return self.encode_style(Tensor(np.stack(refs)[None, :, None]))
        finally:
            self.train(was_training)

    def synthesize(self, prototypes: Sequence[np.ndarray],
                   references: Sequence[np.ndarray]) -> np.ndarray:
        """Single-sample inference; the reference set is canonicalized so the
        output is invariant to its order and duplication."""
        dtype = self.cfg.np_dtype()
        protos = np.stack([np.asarray(p, dtype=dtype) for p in prototypes])
        refs = canonical_reference_order(
            [np.asarray(r, dtype=dtype) for r in references])
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.forward(
                    Tensor(protos[None]),
                    Tensor(np.stack(refs)[None, :, None]),
                )
        finally:
            self.train(was_training)
        return out.data[0, 0]


# -- critic ---------------------------------------------------------------------------


class Critic(nn.Module):
    """Shared conv trunk with a scalar score head and I style logits."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        dtype = cfg.np_dtype()
        widths = cfg.critic_widths
        blocks = []
        prev = 3
        for w in widths:
            blocks.append(ConvBlock(prev, w, "layer", "leaky_relu",
                                    cfg.leaky_slope, rng, dtype))
            prev = w
        self.blocks = blocks
        self.score_head = nn.Linear(prev, 1, rng=rng, dtype=dtype)
        self.style_head = nn.Linear(prev, cfg.n_styles, rng=rng, dtype=dtype)

    def forward(self, triple: Tensor) -> tuple[Tensor, Tensor]:
        if triple.shape[1] != 3:
            raise ValueError(
                f"critic input must have 3 channels, got {triple.shape[1]}")
        h = triple
        for b in self.blocks:
            h = b(h)
        pooled = F.global_sum_pool(h)
        return self.score_head(pooled).reshape(triple.shape[0]), \
            self.style_head(pooled)


def discriminate(critic: Critic, prototype_pick: Tensor, candidate: Tensor,
                 reference_pick: Tensor) -> tuple[Tensor, Tensor]:
    """Score a (prototype, candidate, reference) triple."""
    triple = F.channel_concat([prototype_pick, candidate, reference_pick])
    return critic(triple)


# -- checkpointing ----------------------------------------------------------------------


def save_generator(path: str, gen: Generator):
    ckpt.save(path, ckpt.MAGIC_MODEL,
              {"kind": "generator", "model": gen.cfg.to_dict()},
              gen.state_arrays())


def load_generator(path: str) -> Generator:
    config, arrays = ckpt.load(path, ckpt.MAGIC_MODEL)
    gen = Generator(ModelConfig.from_dict(config["model"]))
    gen.load_state_arrays(arrays)
    gen.eval()
    return gen


def save_critic(path: str, critic: Critic):
    ckpt.save(path, ckpt.MAGIC_MODEL,
              {"kind": "critic", "model": critic.cfg.to_dict()},
              critic.state_arrays())


def load_critic(path: str) -> Critic:
    config, arrays = ckpt.load(path, ckpt.MAGIC_MODEL)
    critic = Critic(ModelConfig.from_dict(config["model"]))
    critic.load_state_arrays(arrays)
    critic.eval()
    return critic
