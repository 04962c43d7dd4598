"""Overfit the desk-scale model to one procedural scene and report training-view PSNR."""

import argparse
import logging
import time

from mvgamba.trainkit import load_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/overfit.cfg")
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--steps", type=int, default=None, help="stop early after this many steps")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config, out_dir=args.out_dir)
    t0 = time.time()
    result = train(cfg, stop_after=args.steps)
    scored = [r for r in result.rows if r["train_psnr"] is not None]
    best = max(r["train_psnr"] for r in scored)
    print(f"steps={len(result.rows)} final_train_psnr={scored[-1]['train_psnr']:.2f} best={best:.2f} "
          f"held_out_psnr={scored[-1]['psnr']:.2f} minutes={(time.time() - t0) / 60:.1f}")


if __name__ == "__main__":
    main()
