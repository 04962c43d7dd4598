"""Score a trained checkpoint with one input view perturbed by pixel noise, over several held-out scenes."""

import argparse

import numpy as np

from mvgamba.cli import noise_sweep
from mvgamba.diffcore import rng_for
from mvgamba.trainkit import load_config
from mvgamba.trainkit.train import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", default="runs/seqlen/patch8/final.mvgb")
    ap.add_argument("--config", default="configs/seqlen.cfg")
    ap.add_argument("--scenes", type=int, default=4)
    ap.add_argument("--sigma", type=float, nargs="+", default=[0.0, 0.1, 0.3, 0.5])
    args = ap.parse_args()
    model = load_model(args.checkpoint)
    cfg = load_config(args.config)
    table = {s: [] for s in args.sigma}
    for i in range(args.scenes):
        scene = int(rng_for(cfg.held_out_seed, "eval-scenes", i).integers(2 ** 31 - 1))
        for row in noise_sweep(model, scene, args.sigma, cfg):
            table[row["sigma"]].append((row["psnr"], row["relative_drop"], row["finite"]))
    print("sigma  mean_psnr  worst_drop  finite")
    for s, vals in table.items():
        psnr, drop, finite = zip(*vals)
        print(f"{s:5.2f}  {np.mean(psnr):9.2f}  {max(drop):10.1%}  {all(finite)}")


if __name__ == "__main__":
    main()
