"""Train on a handful of synthetic records, then report noise-MSE ratio and DDIM sample PSNR.

    python scripts/overfit_smoke.py --out runs/smoke            # desk preset, 2000 steps, 4 samples
    python scripts/overfit_smoke.py --preset tiny --steps 200 --set train.lr=3e-3
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mvps.config import PRESETS, apply_overrides
from mvps.train import overfit_smoke


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/overfit_smoke", help="dataset, run and report directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--cfg-scale", type=float, default=None, help="default: the config's sample.cfg_scale")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    torch.set_num_threads(args.threads)
    cfg = apply_overrides(PRESETS[args.preset](), args.set)
    cfg.train.ckpt_every = max(cfg.train.ckpt_every, args.steps)
    out = Path(args.out)
    r = overfit_smoke(cfg, out, n_samples=args.samples, steps=args.steps, cfg_scale=args.cfg_scale)

    # top row: samples, bottom row: targets
    strip = np.concatenate([np.concatenate(r.pop("images"), 1), np.concatenate(r.pop("truth"), 1)], 0)
    Image.fromarray(strip).save(out / "samples_vs_truth.png")
    (out / "overfit_report.json").write_text(json.dumps(r, indent=2))
    print(json.dumps(r, indent=2))
    verdict = r["ratio"] < 0.25 and r["min_psnr"] >= 18.0
    print(f"ratio {r['ratio']:.3f} (< 0.25), min PSNR {r['min_psnr']:.2f} dB (>= 18): {'PASS' if verdict else 'FAIL'}")


if __name__ == "__main__":
    main()
