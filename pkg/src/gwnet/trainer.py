"""Alternating critic/generator optimization with checkpointing and logging.

Each step draws one batch, runs ``n_critic`` critic updates (the fake
candidates are detached), then one generator update through the refreshed
critic.  Everything (parameter init, sampling, interpolation draws) derives
from one seed, so runs replay bit-for-bit in double precision and resume
from a checkpoint continues the exact same stream.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import functional as F
from . import glyphs as G
from . import losses as L
from . import nn
from . import tensor as T
from .percep import DEEP_TAPS, TAP_NAMES, TapClassifier
from .tensor import Tensor
from .wnet import (Critic, Generator, MixerConfig, ModelConfig,
                   canonical_reference_order, discriminate)

log = logging.getLogger("gwnet")


class NumericError(Exception):
    """A loss or parameter became non-finite."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    N: int = 4
    batch: int = 8
    n_critic: int = 5
    steps: int = 2000
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    precision: str = "float64"     # float64 | float32
    gp_method: str = "autodiff"    # autodiff | fdiff
    checkpoint_every: int = 500
    sheet_every: int = 500
    cache_features: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights.from_dict(self.weights)
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        for name in ("N", "batch", "n_critic", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        self.model.dtype = self.precision

    def np_dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class Classifiers:
    phi_real: TapClassifier
    phi_content: TapClassifier
    phi_style: TapClassifier

    def freeze(self):
        for net in (self.phi_real, self.phi_content, self.phi_style):
            net.freeze()
        return self


class TrainState:
    def __init__(self, config: TrainConfig, pack: G.GlyphPack,
                 phi: Classifiers):
        if config.model.M != pack.M:
            raise ValueError(
                f"config M={config.model.M} but pack has {pack.M} prototypes")
        if config.model.n_styles != pack.I:
            raise ValueError(
                f"config n_styles={config.model.n_styles} but pack I={pack.I}")
        if config.model.size != pack.size:
            raise ValueError(
                f"config size={config.model.size} but pack size={pack.size}")
        self.config = config
        self.pack = pack
        self.phi = phi.freeze()
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self.gen = Generator(config.model, np.random.default_rng(seeds[0]))
        self.critic = Critic(config.model, np.random.default_rng(seeds[1]))
        self.sampler = G.BatchSampler(pack, config.model.M, config.N,
                                      seed=seeds[2])
        self.rng = np.random.default_rng(seeds[3])
        self.opt_g = nn.Adam(self.gen.parameters(), config.lr, config.beta1,
                             config.beta2)
        self.opt_d = nn.Adam(self.critic.parameters(), config.lr,
                             config.beta1, config.beta2)
        self.step = 0
        self._feat_cache: dict = {}

    # -- batch assembly ------------------------------------------------------

    def assemble(self, samples: list[G.TrainSample]) -> dict:
        dt = self.config.np_dtype()
        targets = np.stack([s.target.pixels for s in samples])[:, None]
        protos = np.stack(
            [np.stack([p.pixels for p in s.prototypes]) for s in samples])
        refs = np.stack([
            np.stack(canonical_reference_order(
                [r.pixels for r in s.references]))
            for s in samples])[:, :, None]
        b = len(samples)
        idx = np.arange(b)
        m_pick = np.array([s.m_pick for s in samples])
        n_pick = np.array([s.n_pick for s in samples])
        return {
            "targets": targets.astype(dt),
            "protos": protos.astype(dt),
            "refs": refs.astype(dt),
            "proto_pick": protos[idx, m_pick][:, None].astype(dt),
            "ref_pick": refs[idx, n_pick].astype(dt),
            "style_labels": np.array(
                [s.target.style_id - 1 for s in samples]),
            "samples": samples,
        }

    # -- cached frozen-classifier features ------------------------------------

    def _image_features(self, net_name: str, net: TapClassifier,
                        key: tuple, pixels: np.ndarray,
                        taps: Sequence[str]) -> dict[str, Tensor]:
        cache_key = (net_name, key)
        if self.config.cache_features and cache_key in self._feat_cache:
            return self._feat_cache[cache_key]
        x = Tensor(pixels[None, None].astype(self.config.np_dtype()))
        with T.no_grad():
            feats = net.extract_features(x, taps)
        if self.config.cache_features:
            self._feat_cache[cache_key] = feats
        return feats

    def _batch_reference_features(self, net_name: str, net: TapClassifier,
                                  images: list[G.GlyphImage],
                                  taps: Sequence[str]) -> dict[str, Tensor]:
        per_img = [
            self._image_features(net_name, net,
                                 (img.style_id, img.content_id), img.pixels,
                                 taps)
            for img in images
        ]
        return {t: T.concat([f[t] for f in per_img], axis=0) for t in taps}

    # -- one optimization step --------------------------------------------------

    def train_step(self, samples: list[G.TrainSample]) -> L.LossReport:
        cfg = self.config
        w = cfg.weights
        batch = self.assemble(samples)
        protos_t = Tensor(batch["protos"])
        refs_t = Tensor(batch["refs"])
        target_t = Tensor(batch["targets"])
        proto_pick = Tensor(batch["proto_pick"])
        ref_pick = Tensor(batch["ref_pick"])
        labels = batch["style_labels"]

        self.gen.train(True)
        self.critic.train(True)
        fake = self.gen(protos_t, refs_t)
        fake_const = fake.detach()

        triple_real = F.channel_concat([proto_pick, target_t, ref_pick])
        triple_fake_const = F.channel_concat([proto_pick, fake_const, ref_pick])

        report = L.LossReport(step=self.step)
        norm_sum = 0.0
        for _ in range(cfg.n_critic):
            self.opt_d.zero_grad()
            _, adv_d = L.adv_losses(self.critic, triple_real,
                                    triple_fake_const)
            u = self.rng.uniform(0.0, 1.0, size=len(samples))
            gp, mean_norm = L.gradient_penalty(
                self.critic, proto_pick, target_t, fake_const, ref_pick, u,
                method=cfg.gp_method)
            _, logits_real = self.critic(triple_real)
            _, logits_fake = self.critic(triple_fake_const)
            ac = L.ac_loss(logits_real, logits_fake, labels)
            t_d = L.total_d(adv_d, gp, ac, w)
            t_d.backward()
            self.opt_d.step()
            norm_sum += mean_norm
            report.adv_d = float(adv_d.data)
            report.grad_penalty = float(gp.data)
            report.total_d = float(t_d.data)
        report.grad_norm = norm_sum / cfg.n_critic

        # generator update through the refreshed critic
        self.opt_g.zero_grad()
        self.critic.zero_grad()
        triple_fake = F.channel_concat([proto_pick, fake, ref_pick])
        score_fake, logits_fake = self.critic(triple_fake)
        adv_g = score_fake.mean()
        with T.no_grad():
            _, logits_real = self.critic(triple_real)
        ac_g = L.ac_loss(logits_real.detach(), logits_fake, labels)
        pix = L.pixel_l1(fake, target_t)
        const_p, const_r = L.const_losses(self.gen, protos_t, refs_t, fake)

        phi_real_ref = self._batch_reference_features(
            "real", self.phi.phi_real, [s.target for s in samples], TAP_NAMES)
        phi_content_ref = self._batch_reference_features(
            "content", self.phi.phi_content,
            [s.prototypes[s.m_pick] for s in samples], DEEP_TAPS)
        phi_style_ref = self._batch_reference_features(
            "style", self.phi.phi_style,
            [s.references[s.n_pick] for s in samples], DEEP_TAPS)
        l_real = L.perceptual_term(self.phi.phi_real, fake, phi_real_ref,
                                   TAP_NAMES, w.w_real, w.w_vn)
        l_content = L.perceptual_term(self.phi.phi_content, fake,
                                      phi_content_ref, DEEP_TAPS,
                                      w.w_content, w.w_vn)
        l_style = L.perceptual_term(self.phi.phi_style, fake, phi_style_ref,
                                    DEEP_TAPS, w.w_style, w.w_vn)
        phi_total = l_real + l_content + l_style

        t_g = L.total_g(adv_g, ac_g, pix, phi_total, const_p, const_r, w)
        t_g.backward()
        self.opt_g.step()

        report.adv_g = float(adv_g.data)
        report.ac = float(ac_g.data)
        report.pixel_l1 = float(pix.data)
        report.const_p = float(const_p.data)
        report.const_r = float(const_r.data)
        report.phi_real = float(l_real.data)
        report.phi_content = float(l_content.data)
        report.phi_style = float(l_style.data)
        report.phi_total = float(phi_total.data)
        report.total_g = float(t_g.data)
        report.check_finite()
        self.step += 1
        return report

    # -- persistence -------------------------------------------------------------

    def checkpoint_arrays(self) -> tuple[dict, dict]:
        arrays: dict[str, np.ndarray] = {}
        g_names = []
        for name, p in self.gen.named_parameters():
            arrays["gen." + name] = p.data
            g_names.append("gen." + name)
        for name, b in self.gen.named_buffers():
            arrays["gen." + name] = b.data
        d_names = []
        for name, p in self.critic.named_parameters():
            arrays["critic." + name] = p.data
            d_names.append("critic." + name)
        for name, b in self.critic.named_buffers():
            arrays["critic." + name] = b.data
        arrays.update(self.opt_g.state_arrays(g_names))
        arrays.update(self.opt_d.state_arrays(d_names))
        config = {
            "kind": "train_state",
            "train": self.config.to_dict(),
            "step": self.step,
            "opt_t": [self.opt_g.t, self.opt_d.t],
            "sampler_rng": _rng_state_to_json(self.sampler.rng_state()),
            "train_rng": _rng_state_to_json(self.rng.bit_generator.state),
        }
        return config, arrays

    def save(self, path: str):
        config, arrays = self.checkpoint_arrays()
        ckpt.save(path, ckpt.MAGIC_MODEL, config, arrays)

    @staticmethod
    def load(path: str, pack: G.GlyphPack, phi: Classifiers) -> "TrainState":
        config, arrays = ckpt.load(path, ckpt.MAGIC_MODEL)
        if config.get("kind") != "train_state":
            raise ValueError(f"{path} is not a training checkpoint")
        state = TrainState(TrainConfig.from_dict(config["train"]), pack, phi)
        gen_arrays = {k[len("gen."):]: v for k, v in arrays.items()
                      if k.startswith("gen.") and ".adam_" not in k}
        critic_arrays = {k[len("critic."):]: v for k, v in arrays.items()
                         if k.startswith("critic.") and ".adam_" not in k}
        state.gen.load_state_arrays(gen_arrays)
        state.critic.load_state_arrays(critic_arrays)
        g_names = ["gen." + n for n, _ in state.gen.named_parameters()]
        d_names = ["critic." + n for n, _ in state.critic.named_parameters()]
        state.opt_g.load_state_arrays(g_names, arrays, config["opt_t"][0])
        state.opt_d.load_state_arrays(d_names, arrays, config["opt_t"][1])
        state.step = config["step"]
        state.sampler.set_rng_state(_rng_state_from_json(config["sampler_rng"]))
        state.rng.bit_generator.state = _rng_state_from_json(
            config["train_rng"])
        return state


def _rng_state_to_json(state: dict) -> dict:
    out = dict(state)
    out["state"] = {k: int(v) if isinstance(v, (int, np.integer)) else v
                    for k, v in state["state"].items()}
    return out


def _rng_state_from_json(state: dict) -> dict:
    return {k: (dict(v) if isinstance(v, dict) else v)
            for k, v in state.items()}


# -- fit loop --------------------------------------------------------------------


def fit(config: TrainConfig, pack: G.GlyphPack, phi: Classifiers,
        out_dir: str, resume_from: Optional[str] = None,
        progress: bool = True) -> TrainState:
    """Run the training schedule, writing checkpoints, CSV log and sheets."""
    os.makedirs(out_dir, exist_ok=True)
    if resume_from:
        state = TrainState.load(resume_from, pack, phi)
        state.config.steps = config.steps
        log.info("resumed from %s at step %d", resume_from, state.step)
        log_mode = "a"
    else:
        state = TrainState(config, pack, phi)
        state.save(os.path.join(out_dir, "ckpt_initial.gwn"))
        log_mode = "w"
    config = state.config
    if config.gp_method == "fdiff":
        log.warning("gradient penalty uses the finite-difference fallback; "
                    "critic updates will not see penalty gradients")
    log_path = os.path.join(out_dir, "losses.csv")
    with open(log_path, log_mode) as f:
        if log_mode == "w":
            f.write(L.LossReport.header() + "\n")
        while state.step < config.steps:
            samples = state.sampler.sample(config.batch)
            report = state.train_step(samples)
            f.write(report.row() + "\n")
            step = state.step
            if progress and (step % 25 == 0 or step == config.steps):
                log.info("step %d/%d pixel=%.4f adv_d=%.4f gnorm=%.3f",
                         step, config.steps, report.pixel_l1, report.adv_d,
                         report.grad_norm)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                state.save(os.path.join(out_dir, f"ckpt_{step:06d}.gwn"))
            if config.sheet_every and step % config.sheet_every == 0:
                _write_sheet(state, samples,
                             os.path.join(out_dir, f"sheet_{step:06d}.png"))
    state.save(os.path.join(out_dir, "ckpt_final.gwn"))
    return state


def _write_sheet(state: TrainState, samples: list[G.TrainSample], path: str):
    state.gen.eval()
    rows = []
    for s in samples[:8]:
        gen_px = state.gen.synthesize([p.pixels for p in s.prototypes],
                                      [r.pixels for r in s.references])
        rows.append([s.target.pixels, gen_px])
    state.gen.train(True)
    G.save_glyph_png(path, G.glyph_sheet(rows))


# -- evaluation ------------------------------------------------------------------


def reconstruct_training_set(gen: Generator, pack: G.GlyphPack, N: int,
                             seed: int = 0,
                             limit: Optional[int] = None) -> dict:
    """Inference-mode reconstruction of training targets.

    For every training (style, content) pair, synthesize from that pair's
    prototypes plus N references and compare against ground truth.
    """
    gen.eval()
    sampler = G.BatchSampler(pack, pack.M, N, seed=seed)
    pairs = sampler.pairs if limit is None else sampler.pairs[:limit]
    out_images = []
    targets = []
    labels_content = []
    labels_style = []
    rng = np.random.default_rng(seed)
    for style, j in pairs:
        others = [c for c in pack.contents_of(style) if c != j]
        ref_ids = rng.choice(len(others), size=N, replace=False)
        refs = [pack.get(style, others[int(r)]).pixels for r in ref_ids]
        protos = [pack.get(cm, j).pixels for cm in pack.prototype_styles]
        out_images.append(gen.synthesize(protos, refs))
        targets.append(pack.get(style, j).pixels)
        labels_content.append(j - 1)
        labels_style.append(style - 1)
    gen_stack = np.stack(out_images)
    tgt_stack = np.stack(targets)
    return {
        "generated": gen_stack,
        "targets": tgt_stack,
        "content_labels": np.array(labels_content),
        "style_labels": np.array(labels_style),
        "pixel_l1": float(np.abs(gen_stack - tgt_stack).mean()),
    }


def one_shot_synthesis(gen: Generator, pack: G.GlyphPack,
                       reference: G.GlyphImage,
                       content_ids: Sequence[int]) -> dict:
    """Generate every requested content from a single style reference."""
    gen.eval()
    inputs = G.build_inference_inputs(pack, content_ids, [reference])
    images = []
    contents = []
    for q, protos, refs in inputs:
        images.append(gen.synthesize([p.pixels for p in protos],
                                     [r.pixels for r in refs]))
        contents.append(q)
    return {
        "generated": np.stack(images) if images else np.zeros((0,)),
        "content_ids": contents,
    }
