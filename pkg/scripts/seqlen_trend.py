"""Train the tiny benchmark at two patch sizes and compare held-out novel-view PSNR."""

import argparse
import csv
import sys
from pathlib import Path

from mvgamba.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/seqlen.cfg")
    ap.add_argument("--work-dir", default="runs/seqlen")
    ap.add_argument("--eval-scenes", type=int, default=8)
    args = ap.parse_args()
    out = Path(args.work_dir) / "seqlen.csv"
    code = cli(["-v", "ablate-seqlen", "--config", args.config, "--patch", "16", "8", "--work-dir", args.work_dir,
                "--eval-scenes", str(args.eval_scenes), "--out", str(out)])
    if code:
        sys.exit(code)
    rows = {int(r["patch"]): r for r in csv.DictReader(out.open())}
    for p in sorted(rows, reverse=True):
        print(f"patch {p:>2}  seq_len {rows[p]['seq_len']:>5}  held-out PSNR {float(rows[p]['psnr']):.2f} dB")
    print(f"gain {float(rows[8]['psnr']) - float(rows[16]['psnr']):+.2f} dB")


if __name__ == "__main__":
    main()
