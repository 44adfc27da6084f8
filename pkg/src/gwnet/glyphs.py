"""Glyph corpus handling: directory packs, sampling, and a synthetic corpus.

A pack on disk is ``<style_id>/<content_id>.png`` (8-bit grayscale) plus a
``manifest.json`` declaring the style/content universe.  Pixels map to
[-1, 1] via p/127.5 - 1; +1 is background (white), -1 is ink.

Style ids 1..I are generation targets (the critic's class universe).
Prototype fonts and held-out styles live at ids above I so they never mix
with training targets.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger("gwnet")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class GlyphDataError(Exception):
    """Raised for malformed packs, manifests or image files."""


@dataclass
class GlyphImage:
    """One grayscale character bitmap in [-1, 1]."""

    pixels: np.ndarray
    style_id: int
    content_id: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise GlyphDataError(f"glyph must be 2-D, got {self.pixels.shape}")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise GlyphDataError(
                f"glyph pixels outside [-1, 1]: "
                f"[{self.pixels.min():.4f}, {self.pixels.max():.4f}]")


@dataclass
class GlyphPack:
    """Immutable-after-load glyph collection with its sampling index."""

    I: int
    J: int
    prototype_styles: list[int]
    holdout_styles: list[int]
    size: int
    images: dict[tuple[int, int], GlyphImage] = field(default_factory=dict)
    labels: dict[int, str] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.prototype_styles)

    @property
    def train_styles(self) -> list[int]:
        return [i for i in range(1, self.I + 1) if i not in self.holdout_styles]

    def get(self, style: int, content: int) -> GlyphImage:
        img = self.images.get((style, content))
        if img is None:
            raise GlyphDataError(f"missing glyph style={style} content={content}")
        return img

    def contents_of(self, style: int) -> list[int]:
        return sorted(c for (s, c) in self.images if s == style)

    def validate(self):
        if self.M < 1:
            raise GlyphDataError("pack needs at least one prototype style")
        targets = set(self.train_styles)
        if targets & set(self.prototype_styles):
            raise GlyphDataError(
                "prototype styles overlap training target styles")
        for cm in self.prototype_styles:
            if not self.contents_of(cm):
                raise GlyphDataError(f"prototype style {cm} has no glyphs")
        for (s, c), img in self.images.items():
            if img.pixels.shape != (self.size, self.size):
                raise GlyphDataError(
                    f"glyph ({s},{c}) is {img.pixels.shape}, pack size is "
                    f"{self.size}")


@dataclass
class TrainSample:
    """One training triple: real target, prototypes, style references."""

    target: GlyphImage
    prototypes: list[GlyphImage]
    references: list[GlyphImage]
    m_pick: int  # index into prototypes, 0-based
    n_pick: int  # index into references, 0-based

    def check(self):
        j = self.target.content_id
        i = self.target.style_id
        for p in self.prototypes:
            if p.content_id != j:
                raise GlyphDataError("prototype content differs from target")
            if p.style_id == i:
                raise GlyphDataError("prototype style equals target style")
        for r in self.references:
            if r.style_id != i:
                raise GlyphDataError("reference style differs from target")
            if r.content_id == j:
                raise GlyphDataError("reference content equals target content")


# -- pixel mapping ---------------------------------------------------------------


def pixels_from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 127.5 - 1.0


def pixels_to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_glyph_png(path: str, size: Optional[int] = None) -> np.ndarray:
    img = Image.open(path).convert("L")
    arr = np.asarray(img)
    if size is not None and arr.shape != (size, size):
        raise GlyphDataError(
            f"{path}: expected {size}x{size}, got {arr.shape[0]}x{arr.shape[1]}")
    return pixels_from_uint8(arr)


def save_glyph_png(path: str, pixels: np.ndarray):
    Image.fromarray(pixels_to_uint8(pixels), mode="L").save(path)


# -- manifest and directory I/O -----------------------------------------------------


def _require(manifest: dict, key: str):
    if key not in manifest:
        raise GlyphDataError(f"manifest missing field {key!r}")
    return manifest[key]


def import_directory(path: str, manifest_path: Optional[str] = None) -> GlyphPack:
    """Load a ``<style>/<content>.png`` tree described by its manifest."""
    manifest_path = manifest_path or os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise GlyphDataError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as e:
        raise GlyphDataError(f"manifest is not valid JSON: {e}")
    version = _require(manifest, "version")
    if version != MANIFEST_VERSION:
        raise GlyphDataError(f"manifest version {version} unsupported")
    pack = GlyphPack(
        I=int(_require(manifest, "I")),
        J=int(_require(manifest, "J")),
        prototype_styles=[int(s) for s in _require(manifest, "prototype_styles")],
        holdout_styles=[int(s) for s in manifest.get("holdout_styles", [])],
        size=int(manifest.get("size", 64)),
        labels={int(k): v for k, v in manifest.get("labels", {}).items()},
    )
    n_missing = 0
    for entry in sorted(os.listdir(path)):
        sub = os.path.join(path, entry)
        if not (os.path.isdir(sub) and entry.isdigit()):
            continue
        style = int(entry)
        for fname in sorted(os.listdir(sub)):
            if not fname.endswith(".png"):
                continue
            stem = fname[:-4]
            if not stem.isdigit():
                continue
            content = int(stem)
            pixels = load_glyph_png(os.path.join(sub, fname), pack.size)
            pack.images[(style, content)] = GlyphImage(pixels, style, content)
    expected = (pack.I + len(pack.prototype_styles) + len(pack.holdout_styles))
    n_missing = expected * pack.J - len(pack.images)
    pack.validate()
    log.info("loaded pack: %d glyphs, I=%d J=%d M=%d holdout=%s (%d absent)",
             len(pack.images), pack.I, pack.J, pack.M, pack.holdout_styles,
             max(n_missing, 0))
    return pack


def export_pack(pack: GlyphPack, path: str):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "I": pack.I,
        "J": pack.J,
        "prototype_styles": pack.prototype_styles,
        "holdout_styles": pack.holdout_styles,
        "size": pack.size,
        "labels": {str(k): v for k, v in pack.labels.items()},
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    for (style, content), img in sorted(pack.images.items()):
        sub = os.path.join(path, str(style))
        os.makedirs(sub, exist_ok=True)
        save_glyph_png(os.path.join(sub, f"{content}.png"), img.pixels)


# -- synthetic corpus ------------------------------------------------------------------


def _render_strokes(segments: np.ndarray, thickness: np.ndarray, ink: float,
                    size: int) -> np.ndarray:
    """Rasterize line segments with soft edges onto a white canvas.

    ``segments`` is (n, 4) of normalized (x0, y0, x1, y1); thickness is per
    segment in pixels.
    """
    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size
    coverage = np.zeros((size, size))
    aa = 0.7 / size
    for (x0, y0, x1, y1), th in zip(segments, thickness):
        dx, dy = x1 - x0, y1 - y0
        seg_len2 = dx * dx + dy * dy
        if seg_len2 < 1e-12:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / seg_len2, 0.0, 1.0)
        cx = x0 + t * dx
        cy = y0 + t * dy
        dist = np.hypot(px - cx, py - cy)
        half = 0.5 * th / size
        alpha = np.clip((half - dist) / aa + 0.5, 0.0, 1.0)
        coverage = 1.0 - (1.0 - coverage) * (1.0 - alpha)
    return 1.0 - 2.0 * np.clip(coverage * ink, 0.0, 1.0)


def _content_segments(pack_seed: int, content: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([pack_seed, 7919, content]))
    n = int(rng.integers(3, 7))
    pts = rng.uniform(0.18, 0.82, size=(n, 4))
    # anchor one long diagonal spine so every glyph has clear extent
    pts[0] = [0.25, 0.25, 0.75, 0.75] + rng.uniform(-0.08, 0.08, size=4)
    return pts


@dataclass
class _StyleParams:
    rot: float
    shear: float
    scale: float
    dx: float
    dy: float
    thickness: float
    ink: float


def _style_params(pack_seed: int, style: int) -> _StyleParams:
    rng = np.random.default_rng(np.random.SeedSequence([pack_seed, 104729, style]))
    return _StyleParams(
        rot=float(rng.uniform(-0.35, 0.35)),
        shear=float(rng.uniform(-0.45, 0.45)),
        scale=float(rng.uniform(0.8, 1.12)),
        dx=float(rng.uniform(-0.05, 0.05)),
        dy=float(rng.uniform(-0.05, 0.05)),
        thickness=float(rng.uniform(1.3, 3.4)),
        ink=float(rng.uniform(0.72, 1.0)),
    )


def _apply_style(segments: np.ndarray, sp: _StyleParams) -> np.ndarray:
    pts = segments.reshape(-1, 2) - 0.5
    c, s = np.cos(sp.rot), np.sin(sp.rot)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, sp.shear], [0.0, 1.0]])
    pts = pts @ (rot @ shear).T * sp.scale
    pts = pts + 0.5 + np.array([sp.dx, sp.dy])
    return np.clip(pts, 0.04, 0.96).reshape(-1, 4)


def render_toy_glyph(pack_seed: int, style: int, content: int,
                     size: int) -> np.ndarray:
    segs = _content_segments(pack_seed, content)
    sp = _style_params(pack_seed, style)
    styled = _apply_style(segs, sp)
    thickness = np.full(len(styled), sp.thickness)
    return _render_strokes(styled, thickness, sp.ink, size)


def make_toy_pack(seed: int, n_styles: int, n_contents: int, size: int = 64,
                  n_prototypes: int = 3, n_holdout: int = 1) -> GlyphPack:
    """Deterministic stroke-composition corpus.

    Styles 1..n_styles are training targets; the next ``n_holdout`` ids are
    held-out styles and the ones after that are the prototype fonts.
    """
    if n_styles < 2 or n_contents < 2:
        raise GlyphDataError("toy pack needs at least 2 styles and 2 contents")
    holdout = list(range(n_styles + 1, n_styles + 1 + n_holdout))
    protos = list(range(n_styles + 1 + n_holdout,
                        n_styles + 1 + n_holdout + n_prototypes))
    pack = GlyphPack(I=n_styles, J=n_contents, prototype_styles=protos,
                     holdout_styles=holdout, size=size)
    for style in range(1, n_styles + 1 + n_holdout + n_prototypes):
        for content in range(1, n_contents + 1):
            pixels = render_toy_glyph(seed, style, content, size)
            pack.images[(style, content)] = GlyphImage(pixels, style, content)
    pack.validate()
    return pack


# -- sampling ---------------------------------------------------------------------------


class BatchSampler:
    """Draws (target, prototypes, references) triples; owns its RNG."""

    def __init__(self, pack: GlyphPack, M: int, N: int, seed: int):
        if M != pack.M:
            raise GlyphDataError(
                f"sampler M={M} but pack has {pack.M} prototype styles")
        self.pack = pack
        self.M = M
        self.N = N
        self.rng = np.random.default_rng(seed)
        self.pairs = self._eligible_pairs()
        if not self.pairs:
            raise GlyphDataError("no sampleable (style, content) pairs")

    def _eligible_pairs(self) -> list[tuple[int, int]]:
        pack, n = self.pack, self.N
        pairs = []
        proto_contents = [set(pack.contents_of(cm))
                          for cm in pack.prototype_styles]
        for style in pack.train_styles:
            contents = pack.contents_of(style)
            if len(contents) < n + 1:
                log.warning("style %d has %d contents, needs %d; excluded",
                            style, len(contents), n + 1)
                continue
            for j in contents:
                if all(j in pc for pc in proto_contents):
                    pairs.append((style, j))
        return sorted(pairs)

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict):
        self.rng.bit_generator.state = state

    def sample(self, batch: int) -> list[TrainSample]:
        out = []
        for _ in range(batch):
            style, j = self.pairs[int(self.rng.integers(len(self.pairs)))]
            others = [c for c in self.pack.contents_of(style) if c != j]
            ref_ids = self.rng.choice(len(others), size=self.N, replace=False)
            refs = [self.pack.get(style, others[int(r)]) for r in ref_ids]
            protos = [self.pack.get(cm, j) for cm in self.pack.prototype_styles]
            sample = TrainSample(
                target=self.pack.get(style, j),
                prototypes=protos,
                references=refs,
                m_pick=int(self.rng.integers(self.M)),
                n_pick=int(self.rng.integers(self.N)),
            )
            sample.check()
            out.append(sample)
        return out


def sample_batch(pack: GlyphPack, batch: int, M: int, N: int,
                 rng_seed: int) -> list[TrainSample]:
    """One-shot reproducible batch (see :class:`BatchSampler` for streams)."""
    return BatchSampler(pack, M, N, rng_seed).sample(batch)


def build_inference_inputs(pack: GlyphPack, content_ids: Sequence[int],
                           style_refs: Sequence[GlyphImage]):
    """Pair every requested content's prototypes with one shared reference set.

    Returns (content_id, prototypes, references) triples; contents whose
    prototype glyphs are missing are skipped and reported.
    """
    if len(style_refs) < 1:
        raise GlyphDataError("need at least one style reference")
    out = []
    skipped = []
    for q in content_ids:
        try:
            protos = [pack.get(cm, q) for cm in pack.prototype_styles]
        except GlyphDataError:
            skipped.append(q)
            continue
        out.append((q, protos, list(style_refs)))
    if skipped:
        log.warning("skipped contents without prototype glyphs: %s", skipped)
    return out


# -- glyph sheets -----------------------------------------------------------------------


def glyph_sheet(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Tile glyphs into one [-1, 1] image; rows may have unequal lengths."""
    if not rows:
        raise GlyphDataError("glyph_sheet: no rows")
    size = rows[0][0].shape[0]
    width = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * size, width * size))
    for r, row in enumerate(rows):
        for c, tile in enumerate(row):
            sheet[r * size:(r + 1) * size, c * size:(c + 1) * size] = tile
    return sheet
