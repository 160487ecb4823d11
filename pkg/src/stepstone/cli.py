"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 dependency error, 4 integrity
error, 5 training divergence. Generic failures exit 1.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys

import torch

from . import alignment as align_mod
from . import diffusion as diff_mod
from . import embedder as emb_mod
from . import field as field_mod
from . import render as render_mod
from . import scenes as scenes_mod
from . import stylize as style_mod
from . import svr as svr_mod
from .checkpoint import checkpoint_roundtrip, load as ckpt_load
from .config import default_root, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    DependencyError,
    IntegrityError,
    StalenessError,
    StepstoneError,
    TrainingDivergence,
)
from .pipeline import load_alignment_inputs, run_stage
from .seeding import derive_seed

EXIT_CODES = {
    ConfigError: 2,
    DependencyError: 3,
    StalenessError: 3,
    CheckpointError: 3,
    IntegrityError: 4,
    TrainingDivergence: 5,
}

STAGE_COMMANDS = {
    "dataset": "dataset",
    "train-embedder": "embedder",
    "train-svr": "svr",
    "train-baseline": "baseline",
    "stage1": "stage1",
    "train-prior": "prior",
    "train-image": "image",
    "eval": "eval",
}


def _common(parser):
    parser.add_argument("--config", default=None, help="INI config path")
    parser.add_argument("--seed", type=int, default=None, help="root seed override")
    parser.add_argument("--out-dir", default=None, help="artifact root")
    parser.add_argument("--force", action="store_true")
    parser.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="config override (repeatable)",
    )


def _build_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    return load_config(args.config, overrides)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stepstone")
    sub = p.add_subparsers(dest="command", required=True)

    for cmd in STAGE_COMMANDS:
        sp = sub.add_parser(cmd, help=f"run the {STAGE_COMMANDS[cmd]} stage")
        _common(sp)

    sp = sub.add_parser("align", help="per-text stage-2 alignment")
    _common(sp)
    sp.add_argument("--text", required=True)
    sp.add_argument("--use-prior", action="store_true")
    sp.add_argument("--tau", type=float, default=None)

    sp = sub.add_parser("refine", help="SDS refinement of an aligned shape")
    _common(sp)
    sp.add_argument("--text", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--guidance-scale", type=float, default=None)

    sp = sub.add_parser("stylize", help="text-guided stylization")
    _common(sp)
    sp.add_argument("--text", required=True, help="base generation text")
    sp.add_argument("--style-text", required=True)
    sp.add_argument(
        "--mode", choices=["texture", "shape-texture", "sds"], default="texture"
    )
    sp.add_argument("--lambda-p", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=None)

    sp = sub.add_parser("sample-prior", help="draw diffusion-prior samples")
    _common(sp)
    sp.add_argument("--text", required=True)
    sp.add_argument("--n", type=int, default=3)

    sp = sub.add_parser("svr-reconstruct", help="single-view reconstruction")
    _common(sp)
    sp.add_argument("--image", required=True, help="path to an input PNG")

    sp = sub.add_parser("embedder-info", help="print an embedder header")
    _common(sp)
    sp.add_argument("--checkpoint", default=None)

    sp = sub.add_parser("checkpoint-verify", help="round-trip a checkpoint")
    _common(sp)
    sp.add_argument("path")

    sp = sub.add_parser("report", help="render an HTML metrics summary")
    _common(sp)
    return p


def _cmd_align(args, cfg, root):
    embedder, _, mapper, decoder = load_alignment_inputs(root)
    prior = None
    if args.use_prior:
        prior, _ = diff_mod.load_diffusion(
            os.path.join(root, "checkpoints", "prior.ckpt")
        )
    seed = args.seed if args.seed is not None else cfg.seed
    result = align_mod.generate(
        args.text, mapper, decoder, embedder, cfg.alignment, seed,
        use_prior=args.use_prior, prior=prior, tau=args.tau,
    )
    out = os.path.join(root, "generations", args.text.replace(" ", "_"))
    os.makedirs(out, exist_ok=True)
    align_mod.save_mapper(
        os.path.join(out, "mapper_prime.ckpt"), result.mapper_prime,
        {"config_hash": cfg.config_hash, "text": args.text, "seed": seed},
    )
    with open(os.path.join(out, "loss.csv"), "w") as f:
        f.write("iteration,clip_loss,bg_loss,total\n")
        for it, lc, lbg, tot in result.log_rows:
            f.write(f"{it},{lc:.6f},{lbg:.6f},{tot:.6f}\n")
    render_mod.write_png(os.path.join(out, "turntable.png"), result.strip)
    grid = field_mod.snapshot_occupancy(decoder, result.latent, 32)
    render_mod.write_float_npz(
        os.path.join(out, "occupancy.npz"), values=grid.values
    )
    print(f"aligned {args.text!r} -> {out}")
    return 0


def _cmd_refine(args, cfg, root):
    from .sds import SdsConfig, sds_refine

    embedder, _, mapper, decoder = load_alignment_inputs(root)
    model, _ = diff_mod.load_diffusion(
        os.path.join(root, "checkpoints", "image_diffusion.ckpt")
    )
    seed = args.seed if args.seed is not None else cfg.seed
    result = align_mod.generate(
        args.text, mapper, decoder, embedder, cfg.alignment, seed
    )
    sds_cfg = cfg.sds
    if args.epochs is not None or args.guidance_scale is not None:
        import dataclasses

        updates = {}
        if args.epochs is not None:
            updates["epochs"] = args.epochs
        if args.guidance_scale is not None:
            updates["guidance_scale"] = args.guidance_scale
        sds_cfg = dataclasses.replace(sds_cfg, **updates)
    refined, rows = sds_refine(
        decoder, result.latent, args.text, model, embedder, sds_cfg,
        derive_seed(seed, "refine"),
    )
    out = os.path.join(root, "refinements", args.text.replace(" ", "_"))
    os.makedirs(out, exist_ok=True)
    field_mod.save_decoder(
        os.path.join(out, "decoder_refined.ckpt"), refined,
        {"config_hash": cfg.config_hash, "text": args.text},
    )
    with open(os.path.join(out, "diagnostics.csv"), "w") as f:
        f.write("epoch,grad_norm,t_steps,camera_seed\n")
        for epoch, gnorm, ts, cam in rows:
            f.write(f"{epoch},{gnorm:.6f},{';'.join(map(str, ts))},{cam}\n")
    before = render_mod.turntable_strip(
        field_mod.field_closure(decoder, result.latent)
    )
    after = render_mod.turntable_strip(
        field_mod.field_closure(refined, result.latent)
    )
    render_mod.write_png(os.path.join(out, "before.png"), before)
    render_mod.write_png(os.path.join(out, "after.png"), after)
    print(f"refined {args.text!r} -> {out}")
    return 0


def _cmd_stylize(args, cfg, root):
    embedder, _, mapper, decoder = load_alignment_inputs(root)
    seed = args.seed if args.seed is not None else cfg.seed
    result = align_mod.generate(
        args.text, mapper, decoder, embedder, cfg.alignment, seed
    )
    mode = {"texture": "texture", "shape-texture": "shape_and_texture",
            "sds": "sds"}[args.mode]
    base_decoder = decoder
    if mode == "texture":
        base_decoder = field_mod.split_decoder(decoder)
    job = style_mod.StyleJob(
        base_decoder=base_decoder,
        base_latent=result.latent,
        style_text=args.style_text,
        mode=mode,
        epochs=args.epochs if args.epochs is not None else 40,
        lambda_p=args.lambda_p,
    )
    style_seed = derive_seed(seed, "stylize")
    if mode == "texture":
        styled, rows = style_mod.texture_stylize(job, embedder, cfg.style, style_seed)
    elif mode == "shape_and_texture":
        styled, _, rows = style_mod.shape_texture_stylize(
            job, embedder, cfg.style, style_seed
        )
    else:
        model, _ = diff_mod.load_diffusion(
            os.path.join(root, "checkpoints", "image_diffusion.ckpt")
        )
        styled, _, rows = style_mod.sds_stylize(
            job, model, embedder, cfg.style, cfg.sds, style_seed
        )
    out = os.path.join(
        root, "stylizations",
        f"{args.text.replace(' ', '_')}--{args.style_text.replace(' ', '_')}--{args.mode}",
    )
    os.makedirs(out, exist_ok=True)
    field_mod.save_decoder(
        os.path.join(out, "decoder_styled.ckpt"), styled,
        {"config_hash": cfg.config_hash, "style_text": args.style_text,
         "mode": args.mode},
    )
    with open(os.path.join(out, "loss.csv"), "w") as f:
        f.write("epoch,terms\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")
    before = render_mod.turntable_strip(
        field_mod.field_closure(base_decoder, result.latent)
    )
    after = render_mod.turntable_strip(
        field_mod.field_closure(styled, result.latent)
    )
    render_mod.write_png(os.path.join(out, "before.png"), before)
    render_mod.write_png(os.path.join(out, "after.png"), after)
    print(f"stylized {args.text!r} as {args.style_text!r} -> {out}")
    return 0


def _cmd_sample_prior(args, cfg, root):
    embedder, _ = emb_mod.load_embedder(
        os.path.join(root, "checkpoints", "embedder.ckpt")
    )
    prior, _ = diff_mod.load_diffusion(os.path.join(root, "checkpoints", "prior.ckpt"))
    seed = args.seed if args.seed is not None else cfg.seed
    with torch.no_grad():
        f_t = emb_mod.embed_text(embedder, args.text)
    for i in range(args.n):
        sample = diff_mod.sample_prior(prior, f_t, derive_seed(seed, "sample", i))
        sim = float(f_t @ sample)
        print(f"sample {i}: cos(f_T, f_T->I) = {sim:.4f}")
    return 0


def _cmd_svr_reconstruct(args, cfg, root):
    from PIL import Image
    import numpy as np

    encoder, _ = svr_mod.load_encoder(
        os.path.join(root, "checkpoints", "svr_encoder.ckpt")
    )
    decoder, _ = field_mod.load_decoder(
        os.path.join(root, "checkpoints", "svr_decoder.ckpt")
    )
    arr = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    image = torch.from_numpy(arr)
    with torch.no_grad():
        latent = svr_mod.encode_image(encoder, image)
    strip = render_mod.turntable_strip(field_mod.field_closure(decoder, latent))
    out = os.path.splitext(args.image)[0] + "_reconstruction.png"
    render_mod.write_png(out, strip)
    print(f"reconstruction strip -> {out}")
    return 0


def _cmd_embedder_info(args, cfg, root):
    path = args.checkpoint or os.path.join(root, "checkpoints", "embedder.ckpt")
    _, meta = ckpt_load(path)
    print(json.dumps(meta, sort_keys=True, indent=2))
    return 0


def _cmd_report(args, cfg, root):
    metrics_path = os.path.join(root, "metrics", "metrics.json")
    if not os.path.exists(metrics_path):
        raise DependencyError("run the eval stage before report")
    with open(metrics_path) as f:
        metrics = json.load(f)
    parts = [
        "<html><head><title>stepstone report</title></head><body>",
        "<h1>Pipeline metrics</h1>",
        f"<pre>{json.dumps(metrics, sort_keys=True, indent=2)}</pre>",
    ]
    gen_dir = os.path.join(root, "generations")
    if os.path.isdir(gen_dir):
        for name in sorted(os.listdir(gen_dir)):
            strip = os.path.join(gen_dir, name, "turntable.png")
            if os.path.exists(strip):
                with open(strip, "rb") as f:
                    b64 = base64.b64encode(f.read()).decode()
                parts.append(f"<h3>{name}</h3><img src='data:image/png;base64,{b64}'>")
    parts.append("</body></html>")
    out = os.path.join(root, "metrics", "report.html")
    with open(out, "w") as f:
        f.write("\n".join(parts))
    print(f"report -> {out}")
    return 0


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        root = default_root(args.out_dir)
        if args.command in STAGE_COMMANDS:
            result = run_stage(STAGE_COMMANDS[args.command], cfg, root, args.force)
            print(f"{args.command}: {result['status']}")
            for k, v in sorted(result.get("metrics", {}).items()):
                print(f"  {k}: {v}")
            return 0
        handler = {
            "align": _cmd_align,
            "refine": _cmd_refine,
            "stylize": _cmd_stylize,
            "sample-prior": _cmd_sample_prior,
            "svr-reconstruct": _cmd_svr_reconstruct,
            "embedder-info": _cmd_embedder_info,
            "report": _cmd_report,
            "checkpoint-verify": lambda a, c, r: (
                checkpoint_roundtrip(a.path) and print(f"{a.path}: ok")
            ) or 0,
        }[args.command]
        return handler(args, cfg, root)
    except StepstoneError as exc:
        for klass, code in EXIT_CODES.items():
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
