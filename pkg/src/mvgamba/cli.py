"""Command-line entry points.

Exit codes: 0 on success, 1 when a run fails, 2 for usage errors (bad flags,
missing or malformed inputs).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .diffcore import rng_for
from .geometry import load_cameras, save_cameras
from .meshing import extract_mesh
from .splat import load_png, load_ply, render, save_png, save_ply
from .ssm import FLOPS_LENGTHS, flops_table
from .tokenizer import sequence_length

log = logging.getLogger("mvgamba")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .trainkit import TrainingAborted, load_config, train

    cfg = _config(args.config, seed=args.seed, threads=args.threads, out_dir=args.out_dir)
    try:
        result = train(cfg, resume=args.resume)
    except TrainingAborted as exc:
        print(f"error: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return 1
    print(result.checkpoint)
    return 0


def cmd_reconstruct(args) -> int:
    from .trainkit.train import load_model, reconstruct

    checkpoint = _existing(args.checkpoint, "checkpoint")
    views = load_cameras(_existing(args.cameras, "camera file"))
    images = sorted(Path(_existing(args.images, "image directory")).glob("*.png"))
    if len(images) != 4 or len(views) != 4:
        raise UsageError(f"reconstruction needs exactly 4 posed images, got {len(images)} images "
                         f"and {len(views)} cameras")
    rgbs = [load_png(p)[0] for p in images]
    for rgb, view in zip(rgbs, views):
        if rgb.shape[:2] != (view.height, view.width):
            raise UsageError(f"image size {rgb.shape[1]}x{rgb.shape[0]} does not match its camera")
    model = load_model(checkpoint)
    gs = reconstruct(model, rgbs, views)
    save_ply(args.out, gs)
    print(f"wrote {gs.count} Gaussians to {args.out}")
    return 0


def cmd_render(args) -> int:
    gs = load_ply(_existing(args.ply, "PLY file"))
    views = load_cameras(_existing(args.cameras, "camera file"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for i, view in enumerate(views):
            res = render(gs, view, tile_size=args.tile_size)
            save_png(out / f"view_{i:03d}.png", res.rgb, res.alpha)
    print(f"rendered {len(views)} views to {out}")
    return 0


def cmd_mesh(args) -> int:
    gs = load_ply(_existing(args.ply, "PLY file"))
    mesh = extract_mesh(gs, n_views=args.views, resolution=args.resolution, trunc_voxels=args.trunc_voxels,
                        elevation=args.elevation)
    mesh.save_obj(args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return 0


def cmd_bench_flops(args) -> int:
    table = flops_table(FLOPS_LENGTHS, args.dim, args.d_state)
    rows = [("attention", table["attention"]), ("ssm", table["ssm"])]
    if args.csv:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["model"] + [str(n) for n in FLOPS_LENGTHS])
        for name, vals in rows:
            writer.writerow([name] + [f"{v:.2f}" for v in vals])
    else:
        print(f"{'GFLOPs':<10}" + "".join(f"{n:>10}" for n in FLOPS_LENGTHS))
        for name, vals in rows:
            print(f"{name:<10}" + "".join(f"{v:>10.2f}" for v in vals))
    return 0


def noise_sweep(model, scene_seed: int, sigmas, cfg=None) -> list[dict]:
    """Novel-view PSNR with input view 0 perturbed by pixel noise of each ``sigma``."""
    from .trainkit import TrainConfig
    from .trainkit.metrics import psnr
    from .trainkit.train import fixed_sample, reconstruct

    cfg = cfg or TrainConfig(image_size=model.cfg.image_size, patch=model.cfg.patch, mode=model.cfg.mode)
    sample = fixed_sample(int(scene_seed), cfg)

    def score(images):
        gs = reconstruct(model, images, sample.input_views)
        with torch.no_grad():
            preds = [render(gs, v, tile_size=cfg.tile_size).rgb for v in sample.novel_views]
        finite = bool(all(torch.isfinite(t).all() for t in (gs.means, gs.scales, gs.colors, gs.opacities, gs.quats)))
        return float(np.mean([psnr(p, g) for p, g in zip(preds, sample.novel_images)])), finite

    clean, _ = score(sample.input_images)
    rows = []
    for i, sigma in enumerate(sigmas):
        images = list(sample.input_images)
        if sigma > 0:
            noise = rng_for(scene_seed, "input-noise", i).normal(size=images[0].shape)
            images[0] = np.clip(images[0] + sigma * noise, 0.0, 1.0)
        value, finite = score(images)
        rows.append({"sigma": sigma, "psnr": value, "clean_psnr": clean,
                     "relative_drop": (clean - value) / clean, "finite": finite})
    return rows


def cmd_ablate_noise(args) -> int:
    from .trainkit.train import load_model

    model = load_model(_existing(args.checkpoint, "checkpoint"))
    rows = noise_sweep(model, args.scene, args.sigma)
    _write_csv(args.out, ["sigma", "psnr", "clean_psnr", "relative_drop", "finite"], rows)
    return 0


def cmd_ablate_seqlen(args) -> int:
    from .trainkit import evaluate, train

    base = _config(args.config, seed=args.seed, threads=args.threads)
    for p in args.patch:
        if p <= 0 or base.image_size % p:
            raise UsageError(f"patch {p} does not divide image size {base.image_size}")
    rows = []
    for p in args.patch:
        cfg = base.replace(patch=p, out_dir=str(Path(args.work_dir) / f"patch{p}"))
        result = train(cfg)
        scenes = [int(rng_for(cfg.held_out_seed, "eval-scenes", i).integers(2 ** 31 - 1))
                  for i in range(args.eval_scenes)]
        score = evaluate(result.checkpoint, scenes, cfg)
        rows.append({"patch": p, "seq_len": sequence_length(4, cfg.image_size, cfg.image_size, p),
                     "psnr": score["psnr"]})
        log.info("patch %d: held-out psnr %.3f", p, score["psnr"])
    _write_csv(args.out, ["patch", "seq_len", "psnr"], rows)
    return 0


def cmd_gen_data(args) -> int:
    from .trainkit import generate_scene
    from .trainkit.data import render_targets
    from .geometry import sample_orbit_cameras

    gs = generate_scene(args.scene, args.k, args.mode)
    views = sample_orbit_cameras(rng_for(args.scene, "eval-cams"), 4, args.novel, args.size, args.size)
    out = Path(args.out_dir)
    for sub, subviews in (("inputs", views[:4]), ("novel", views[4:])):
        (out / sub).mkdir(parents=True, exist_ok=True)
        images, alphas = render_targets(gs, subviews)
        for i, (img, a) in enumerate(zip(images, alphas)):
            save_png(out / sub / f"view_{i:03d}.png", img, a)
        save_cameras(out / sub / "cameras.json", subviews)
    save_ply(out / "scene.ply", gs)
    print(f"wrote scene {args.scene} to {out}")
    return 0


# ----------------------------------------------------------------------------- plumbing


def _existing(path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _config(path, **overrides):
    from .trainkit import ConfigError, load_config

    try:
        return load_config(_existing(path, "config"), **overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    if path is None or path == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _sigmas(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvgamba", description="Feed-forward Gaussian reconstruction toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
        return p

    p = command("train", cmd_train, "Train a model from a key = value config file.")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = command("reconstruct", cmd_reconstruct, "Reconstruct Gaussians from 4 posed PNG views.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory with exactly 4 PNG files (sorted by name)")
    p.add_argument("--cameras", required=True, help="JSON camera file, same order as the images")
    p.add_argument("--out", required=True, help="output PLY")

    p = command("render", cmd_render, "Render a PLY splat file from JSON cameras to PNG.")
    p.add_argument("--ply", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tile-size", type=int, default=8)

    p = command("mesh", cmd_mesh, "Extract a triangle mesh (OBJ) from a PLY splat file.")
    p.add_argument("--ply", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--trunc-voxels", type=float, default=4.0)
    p.add_argument("--elevation", type=float, default=15.0)

    p = command("bench-flops", cmd_bench_flops, "Print the analytic attention vs SSM FLOPs table.")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--d-state", type=int, default=16)

    p = command("ablate-noise", cmd_ablate_noise, "Perturb input view 0 with pixel noise and score novel views.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, required=True, help="procedural scene seed")
    p.add_argument("--sigma", type=_sigmas, default=[0.0, 0.1, 0.3, 0.5], help="comma-separated noise levels")
    p.add_argument("--out", default=None, help="CSV path (default: standard output)")

    p = command("ablate-seqlen", cmd_ablate_seqlen, "Train one model per patch size and score held-out scenes.")
    p.add_argument("--config", required=True)
    p.add_argument("--patch", type=int, nargs="+", default=[16, 8])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-scenes", type=int, default=8)
    p.add_argument("--work-dir", default="runs/seqlen")
    p.add_argument("--out", default=None, help="CSV path (default: standard output)")

    p = command("gen-data", cmd_gen_data, "Write a procedural scene as PNG views, cameras and a PLY.")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--novel", type=int, default=6)
    p.add_argument("--mode", choices=["3d", "2d"], default="3d")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mvgamba {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail
        print(f"mvgamba {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
