"""Command-line entry point: ``nada <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, fewshot, trainer
from .embedding import load_text_table, resolve_backend
from .generator import (GeneratorConfig, StyleGenerator, broadcast_w, load_checkpoint, map_to_w,
                        sample_z, save_checkpoint, synthesize)
from .layer_selection import rank_layers, select_top_k
from .mapper import MapperConfig, load_mapper, save_mapper, train_mapper
from .perceptual import resolve_perceptual

log = logging.getLogger("nada")


class CommandError(Exception):
    pass


def _backends(args):
    table = load_text_table(args.text_table) if args.text_table else None
    return [resolve_backend(b, text_table=table, seed=args.seed) for b in args.backend]


def _add_backend_flags(p):
    p.add_argument("--backend", action="append", default=None,
                   help="encoder identifier (repeatable): 'mock', 'mock:<seed>' or a CLIP model name")
    p.add_argument("--text-table", help="prompt<TAB>v1,v2,... file for mock backends")


def _source_generator(config: trainer.AdaptationConfig) -> StyleGenerator:
    if config.source_checkpoint:
        return load_checkpoint(config.source_checkpoint)
    log.info("no source_checkpoint set; using the toy generator (seed %d)", config.seed)
    return StyleGenerator(GeneratorConfig(), seed=config.seed)


def _load_config(args) -> trainer.AdaptationConfig:
    config = trainer.load_config(args.config) if args.config else trainer.AdaptationConfig()
    if args.preset:
        config = trainer.apply_preset(config, args.preset)
    overrides = {k: v for k, v in (("iterations", args.iterations), ("seed", args.seed)) if v is not None}
    config = dataclasses.replace(config, **overrides)
    config.validate()
    return config


def cmd_init_toy(args):
    G = StyleGenerator(GeneratorConfig(resolution=args.resolution, num_layers=args.layers), seed=args.seed)
    save_checkpoint(G, 0, args.out)
    print(f"wrote {args.out}")


def cmd_adapt(args):
    config = _load_config(args)
    if args.dry_run:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return
    G = _source_generator(config)
    snaps = trainer.adapt(G, config, out_dir=args.out_dir)
    print(f"wrote {len(snaps)} checkpoints under {args.out_dir}")


def cmd_fewshot_adapt(args):
    config = _load_config(args)
    G = _source_generator(config)
    real = fewshot.load_image_dir(args.images, G.resolution)
    if args.dry_run:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return
    snaps = fewshot.adapt_with_images(G, real, config, n_source=args.n_source, out_dir=args.out_dir)
    print(f"wrote {len(snaps)} checkpoints under {args.out_dir}")


def cmd_map_train(args):
    G = load_checkpoint(args.ckpt)
    cfg = MapperConfig(target_text=args.target_text, steps=args.steps, batch_size=args.batch_size,
                       learning_rate=args.lr, l2_lambda=args.l2_lambda, norm_lambda=args.norm_lambda,
                       seed=args.seed)
    mapper = train_mapper(G, args.target_text, cfg, _backends(args))
    save_mapper(mapper, args.out)
    print(f"wrote {args.out}")


def _sample_images(G, n, psi, seed, mapper=None):
    with torch.no_grad():
        w = broadcast_w(map_to_w(G, sample_z(n, seed, G.cfg.z_dim), psi), G.num_layers)
        if mapper is not None:
            w = mapper(w)
        return synthesize(G, w)


def cmd_sample(args):
    G = load_checkpoint(args.ckpt)
    mapper = load_mapper(args.mapper) if args.mapper else None
    images = _sample_images(G, args.n, args.psi, args.seed, mapper)
    trainer.save_png(trainer.tile_images(trainer.to_uint8(images), min(args.cols, args.n)), args.out)
    print(f"wrote {args.out}")


def cmd_interpolate(args):
    G_a, G_b = load_checkpoint(args.ckpt_a), load_checkpoint(args.ckpt_b)
    with torch.no_grad():
        code = broadcast_w(map_to_w(G_a, sample_z(1, args.seed, G_a.cfg.z_dim), args.psi), G_a.num_layers)
    frames = analysis.interpolation_sweep(G_a, G_b, code, args.steps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(trainer.to_uint8(torch.stack(frames))):
        trainer.save_png(img, out / f"frame_{i:03d}.png")
    print(f"wrote {len(frames)} frames to {out}")


def cmd_rank_layers(args):
    G = load_checkpoint(args.ckpt)
    ranking = rank_layers(G, args.target_text, args.n_w, args.n_i, args.latent_lr, _backends(args),
                          args.seed, args.psi)
    for i, s in enumerate(ranking.scores):
        print(f"layer {i}\t{s:.6g}")
    if args.k:
        print("selected\t" + ",".join(str(i) for i in sorted(select_top_k(ranking, args.k))))


def cmd_embed_analyze(args):
    backends = _backends(args)
    if len(backends) != 1:
        raise CommandError("embed-analyze takes exactly one --backend")
    backend = backends[0]
    images, labels = None, []
    if args.images:
        files = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in fewshot.IMAGE_SUFFIXES)
        images = fewshot.load_image_dir(args.images, args.resolution)
        labels = [f.name for f in files]
    rows = analysis.embed_corpus(images, args.texts or [], backend, labels or None)
    pca = analysis.pca_project(np.stack([r.embedding for r in rows]), 2)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "coords.tsv", "w") as f:
        f.write("label\tkind\tpc1\tpc2\n")
        for r, (x, y) in zip(rows, pca.points):
            f.write(f"{r.label}\t{r.kind}\t{x:.8f}\t{y:.8f}\n")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 5))
    for kind, marker in (("image", "o"), ("text", "*")):
        pts = np.array([p for r, p in zip(rows, pca.points) if r.kind == kind])
        if len(pts):
            ax.scatter(pts[:, 0], pts[:, 1], marker=marker, s=80 if kind == "text" else 20, label=kind)
    for r, (x, y) in zip(rows, pca.points):
        if r.kind == "text":
            ax.annotate(r.label, (x, y))
    ax.set_xlabel(f"PC1 ({pca.variances[0]:.3g})")
    ax.set_ylabel(f"PC2 ({pca.variances[1]:.3g})")
    ax.legend()
    fig.savefig(out / "scatter.png", dpi=100)
    plt.close(fig)
    print(f"wrote {out / 'coords.tsv'} and {out / 'scatter.png'}")


def cmd_diversity(args):
    images = fewshot.load_image_dir(args.images, args.resolution)
    res = analysis.diversity_score(images, args.k, resolve_perceptual(args.perceptual), args.seed)
    print(f"diversity: {res.score:.6f}")
    print("cluster\tmedoid\tsize\tpairs\tmean_distance")
    for c in res.clusters:
        print(f"{c['cluster']}\t{c['medoid']}\t{c['size']}\t{c['pairs']}\t{c['mean_distance']:.6f}")


def cmd_catchup(args):
    G = load_checkpoint(args.ckpt)
    D = (fewshot.load_discriminator(args.disc) if args.disc
         else fewshot.ToyDiscriminator(G.resolution, seed=args.seed))
    real = fewshot.load_image_dir(args.images, G.resolution)
    fewshot.discriminator_catchup(G, D, real, steps=args.steps, lr=args.lr, r1_weight=args.r1,
                                  seed=args.seed)
    fewshot.save_discriminator(D, args.out)
    print(f"wrote {args.out}")


def cmd_export_samples(args):
    G = load_checkpoint(args.ckpt)
    mapper = load_mapper(args.mapper) if args.mapper else None
    if mapper is None:
        manifest = fewshot.export_samples(G, args.n, args.psi, args.out_dir, args.seed)
    else:
        manifest = fewshot.synthesize_finetune_set(G, mapper, args.n, args.out_dir, args.seed, args.psi)
    if manifest["status"] != "ok":
        raise CommandError(f"export incomplete: {manifest.get('error')}")
    print(f"wrote {manifest['count']} images to {args.out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nada", description="Text-guided generator domain adaptation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-toy", help="write a randomly initialised toy generator checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--layers", type=int, default=4)
    p.set_defaults(func=cmd_init_toy)

    for name, func in (("adapt", cmd_adapt), ("fewshot-adapt", cmd_fewshot_adapt)):
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--preset", choices=sorted(trainer.PRESETS))
        p.add_argument("--out-dir", default="run")
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
        if name == "fewshot-adapt":
            p.add_argument("--images", required=True)
            p.add_argument("--n-source", type=int, default=16)
        p.set_defaults(func=func)

    p = sub.add_parser("map-train")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target-text", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--l2-lambda", type=float, default=0.5)
    p.add_argument("--norm-lambda", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_map_train)

    p = sub.add_parser("sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mapper")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--psi", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--psi", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="frames")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("rank-layers")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target-text", required=True)
    p.add_argument("--n-w", type=int, default=8)
    p.add_argument("--n-i", type=int, default=1)
    p.add_argument("--latent-lr", type=float, default=0.01)
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_rank_layers)

    p = sub.add_parser("embed-analyze")
    p.add_argument("--images")
    p.add_argument("--texts", nargs="*")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="embed")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_embed_analyze)

    p = sub.add_parser("diversity")
    p.add_argument("--images", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--perceptual", default="lpips", choices=["lpips", "l2"])
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("catchup")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--disc", help="source discriminator checkpoint (fresh toy D if omitted)")
    p.add_argument("--images", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--r1", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_catchup)

    p = sub.add_parser("export-samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mapper")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="samples")
    p.set_defaults(func=cmd_export_samples)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "backend", "unset") is None:
        args.backend = ["mock"]
    try:
        args.func(args)
    except (CommandError, ValueError, KeyError, OSError, RuntimeError, ImportError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"nada {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
