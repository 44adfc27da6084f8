"""Command-line pipeline: data prep, classifier and adversarial training,
few-shot synthesis, evaluation, and gradient checking.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every flag has a ``key = value`` config-file equivalent; flags win.
``GWNET_THREADS`` caps the numeric libraries' thread pools.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("gwnet")


def _apply_thread_cap():
    cap = os.environ.get("GWNET_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import numpy as np  # noqa: E402  (thread cap must precede this import)

from . import glyphs as G  # noqa: E402
from . import percep as P  # noqa: E402
from . import trainer as TR  # noqa: E402
from .checkpoint import CheckpointError  # noqa: E402
from .losses import LossWeights  # noqa: E402
from .wnet import (MixerConfig, ModelConfig, load_generator,  # noqa: E402
                   scaled_widths)

CONFIG_KEYS = {
    "variant": str, "blocks": str, "blocks_per_layer": int,
    "deep_boundary": int, "width_mult": float, "n_refs": int, "batch": int,
    "n_critic": int, "steps": int, "lr": float, "beta1": float,
    "beta2": float, "seed": int, "precision": str, "gp_method": str,
    "checkpoint_every": int, "sheet_every": int, "alpha": float,
    "alpha_gp": float, "beta": float, "lambda_pixel": float, "psi_p": float,
    "psi_r": float, "w_vn": float, "cache_features": int,
}


def parse_config_file(path: str) -> dict:
    """Plain ``key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = CONFIG_KEYS[key](val.strip())
    return values


def _train_settings(args) -> dict:
    settings = dict(
        variant="bn", blocks="residual", blocks_per_layer=3, deep_boundary=4,
        width_mult=1.0, n_refs=4, batch=8, n_critic=5, steps=2000, lr=2e-4,
        beta1=0.5, beta2=0.999, seed=0, precision="float32",
        gp_method="autodiff", checkpoint_every=500, sheet_every=500,
        alpha=1.0, alpha_gp=10.0, beta=1.0, lambda_pixel=50.0, psi_p=1.0,
        psi_r=1.0, w_vn=0.1, cache_features=1,
    )
    if args.config:
        settings.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    return settings


def build_train_config(pack: G.GlyphPack, settings: dict) -> TR.TrainConfig:
    model = ModelConfig(
        size=pack.size, M=pack.M, n_styles=pack.I,
        widths=scaled_widths(pack.size, settings["width_mult"]),
        mixer=MixerConfig(settings["variant"], settings["blocks"],
                          settings["blocks_per_layer"],
                          settings["deep_boundary"]),
        dtype=settings["precision"])
    weights = LossWeights(
        alpha=settings["alpha"], alpha_gp=settings["alpha_gp"],
        beta=settings["beta"], lambda_pixel=settings["lambda_pixel"],
        psi_p=settings["psi_p"], psi_r=settings["psi_r"],
        w_vn=settings["w_vn"])
    return TR.TrainConfig(
        model=model, weights=weights, N=settings["n_refs"],
        batch=settings["batch"], n_critic=settings["n_critic"],
        steps=settings["steps"], lr=settings["lr"], beta1=settings["beta1"],
        beta2=settings["beta2"], seed=settings["seed"],
        precision=settings["precision"], gp_method=settings["gp_method"],
        checkpoint_every=settings["checkpoint_every"],
        sheet_every=settings["sheet_every"],
        cache_features=bool(settings["cache_features"]))


# -- classifier artifacts ----------------------------------------------------------

PHI_FILES = {"real": "phi_real.gwnp", "content": "phi_content.gwnp",
             "style": "phi_style.gwnp"}


def _pack_arrays(pack: G.GlyphPack, styles: list[int]):
    imgs, contents, style_ids = [], [], []
    for (s, c), img in sorted(pack.images.items()):
        if s in styles:
            imgs.append(img.pixels)
            contents.append(c - 1)
            style_ids.append(s - 1)
    return np.stack(imgs), np.array(contents), np.array(style_ids)


def train_pack_classifiers(pack: G.GlyphPack, out_dir: str, epochs: int,
                           seed: int) -> dict:
    """Train and store the three frozen-feature classifiers.

    The joint and style networks see the training target styles; the
    content network additionally sees the prototype fonts.  Held-out styles
    are never used, so later evaluations on them are honest.
    """
    os.makedirs(out_dir, exist_ok=True)
    report = {}
    tr_imgs, tr_content, tr_style = _pack_arrays(pack, pack.train_styles)
    both = P.train_classifier(tr_imgs, tr_content, tr_style, pack.size,
                              n_content=pack.J, n_style=pack.I,
                              epochs=epochs, seed=seed)
    P.save_classifier(os.path.join(out_dir, PHI_FILES["real"]), both.net,
                      {"role": "real"})
    report["real"] = {"content": both.content_accuracy,
                      "style": both.style_accuracy}

    c_imgs, c_content, _ = _pack_arrays(
        pack, pack.train_styles + pack.prototype_styles)
    content_only = P.train_classifier(c_imgs, c_content, None, pack.size,
                                      n_content=pack.J, epochs=epochs,
                                      seed=seed + 1)
    P.save_classifier(os.path.join(out_dir, PHI_FILES["content"]),
                      content_only.net, {"role": "content"})
    report["content"] = {"content": content_only.content_accuracy}

    style_only = P.train_classifier(tr_imgs, None, tr_style, pack.size,
                                    n_style=pack.I, epochs=epochs,
                                    seed=seed + 2)
    P.save_classifier(os.path.join(out_dir, PHI_FILES["style"]),
                      style_only.net, {"role": "style"})
    report["style"] = {"style": style_only.style_accuracy}
    return report


def load_pack_classifiers(clf_dir: str, dtype=np.float64) -> TR.Classifiers:
    nets = {}
    for role, fname in PHI_FILES.items():
        path = os.path.join(clf_dir, fname)
        if not os.path.exists(path):
            raise G.GlyphDataError(
                f"classifier checkpoint missing: {path}; run "
                f"'gwnet classifiers' first")
        nets[role] = P.load_classifier(path, dtype=dtype)
    return TR.Classifiers(nets["real"], nets["content"], nets["style"])


# -- subcommands ----------------------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.toy:
        seed, n_styles, n_contents = args.toy
        pack = G.make_toy_pack(seed, n_styles, n_contents, size=args.size)
    else:
        if not args.input:
            raise ValueError("prepare needs --toy or --input")
        pack = G.import_directory(args.input, args.manifest)
    G.export_pack(pack, args.out)
    sheet_rows = []
    styles = sorted({s for s, _ in pack.images})
    for s in styles:
        row = [pack.images[(s, c)].pixels for c in pack.contents_of(s)[:12]]
        if row:
            sheet_rows.append(row)
    G.save_glyph_png(os.path.join(args.out, "pack_sheet.png"),
                     G.glyph_sheet(sheet_rows))
    print(f"pack written to {args.out}: I={pack.I} J={pack.J} M={pack.M} "
          f"holdout={pack.holdout_styles} glyphs={len(pack.images)}")
    return EXIT_OK


def cmd_classifiers(args) -> int:
    pack = G.import_directory(args.pack)
    report = train_pack_classifiers(pack, args.out, args.epochs, args.seed)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    pack = G.import_directory(args.pack)
    settings = _train_settings(args)
    config = build_train_config(pack, settings)
    phi = load_pack_classifiers(args.classifiers, dtype=config.np_dtype())
    TR.fit(config, pack, phi, args.out, resume_from=args.resume)
    print(f"run complete: {os.path.join(args.out, 'ckpt_final.gwn')}")
    return EXIT_OK


def cmd_synth(args) -> int:
    pack = G.import_directory(args.pack)
    gen = load_generator(args.ckpt)
    if gen.cfg.size != pack.size:
        raise G.GlyphDataError(
            f"checkpoint expects {gen.cfg.size}px glyphs, pack is {pack.size}")
    refs = []
    for path in args.refs:
        try:
            refs.append(G.load_glyph_png(path, pack.size))
        except FileNotFoundError:
            raise G.GlyphDataError(f"reference image not readable: {path}")
    content_ids = [int(c) for c in args.contents.split(",") if c]
    inputs = G.build_inference_inputs(
        pack, content_ids,
        [G.GlyphImage(r, 0, 0) for r in refs])
    rows = []
    for q, protos, ref_imgs in inputs:
        out = gen.synthesize([p.pixels for p in protos],
                             [r.pixels for r in ref_imgs])
        rows.append([out])
    if not rows:
        raise G.GlyphDataError("no synthesizable contents")
    G.save_glyph_png(args.out, G.glyph_sheet(rows))
    print(f"wrote {args.out}: {len(rows)} glyphs from {len(refs)} reference(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    pack = G.import_directory(args.pack)
    gen = load_generator(args.ckpt)
    phi = load_pack_classifiers(args.classifiers)
    report = {}

    if args.ground_truth:
        sampler = G.BatchSampler(pack, pack.M, args.n_refs, seed=args.seed)
        pairs = sampler.pairs[:args.limit] if args.limit else sampler.pairs
        gen_images = np.stack([pack.get(s, c).pixels for s, c in pairs])
        content_labels = np.array([c - 1 for _, c in pairs])
        style_labels = np.array([s - 1 for s, _ in pairs])
        pix = 0.0
    else:
        recon = TR.reconstruct_training_set(gen, pack, N=args.n_refs,
                                            seed=args.seed, limit=args.limit)
        gen_images = recon["generated"]
        content_labels = recon["content_labels"]
        style_labels = recon["style_labels"]
        pix = recon["pixel_l1"]
    c_logits, _ = P.classify(phi.phi_content, gen_images)
    _, s_logits = P.classify(phi.phi_style, gen_images)
    report["reconstruction"] = {
        "pixel_l1": pix,
        "content_accuracy": float(
            (c_logits.argmax(1) == content_labels).mean()),
        "style_accuracy": float(
            (s_logits.argmax(1) == style_labels).mean()),
        "n": int(len(gen_images)),
    }

    if args.holdout:
        holdout = {}
        for style in pack.holdout_styles:
            contents = pack.contents_of(style)
            if not contents:
                continue
            ref = pack.get(style, contents[0])
            targets = [q for q in range(1, pack.J + 1)]
            synth = TR.one_shot_synthesis(gen, pack, ref, targets)
            c_logits, _ = P.classify(phi.phi_content, synth["generated"])
            labels = np.array(synth["content_ids"]) - 1
            real = np.stack([pack.get(style, q).pixels
                             for q in synth["content_ids"]
                             if (style, q) in pack.images])
            holdout[str(style)] = {
                "content_accuracy": float((c_logits.argmax(1) == labels).mean()),
                "one_shot_pixel_l1": float(
                    np.abs(synth["generated"][:len(real)] - real).mean()),
                "n": int(len(labels)),
            }
        report["holdout_one_shot"] = holdout

    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(verbose=True)
    failed = [name for name, _, _, ok in results if not ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gwnet",
        description="few-shot glyph synthesis: data prep, training, "
                    "synthesis, evaluation")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a glyph pack")
    p.add_argument("--toy", nargs=3, type=int, metavar=("SEED", "I", "J"),
                   help="emit the synthetic corpus")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--input", help="directory of <style>/<content>.png")
    p.add_argument("--manifest", help="manifest path (default: in --input)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("classifiers", help="train the frozen classifiers")
    p.add_argument("--pack", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_classifiers)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--pack", required=True)
    p.add_argument("--classifiers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--resume", help="resume from a training checkpoint")
    p.add_argument("--variant", choices=("bn", "adain"))
    p.add_argument("--blocks", choices=("residual", "dense"))
    p.add_argument("--blocks-per-layer", dest="blocks_per_layer", type=int)
    p.add_argument("--deep-boundary", dest="deep_boundary", type=int)
    p.add_argument("--width-mult", dest="width_mult", type=float)
    p.add_argument("--n-refs", dest="n_refs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--n-critic", dest="n_critic", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--gp-method", dest="gp_method",
                   choices=("autodiff", "fdiff"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--sheet-every", dest="sheet_every", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth", help="few-shot synthesis from references")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pack", required=True,
                   help="pack supplying the prototype fonts")
    p.add_argument("--refs", nargs="+", required=True)
    p.add_argument("--contents", required=True,
                   help="comma-separated content ids")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="metrics on a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pack", required=True)
    p.add_argument("--classifiers", required=True)
    p.add_argument("--holdout", action="store_true",
                   help="also run one-shot synthesis on held-out styles")
    p.add_argument("--ground-truth", action="store_true",
                   help="score ground-truth images instead of generations")
    p.add_argument("--n-refs", dest="n_refs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (G.GlyphDataError, CheckpointError, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (TR.NumericError, FloatingPointError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
