"""End-to-end CLI demo: gen-data -> train -> sample -> eval -> viz-attn in one directory."""

import argparse
import json
import sys
from pathlib import Path

from mvps.cli import main as mvps


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--preset", default="desk")
    args = p.parse_args()

    out = Path(args.out)
    data, run = out / "data", out / "run"
    manifest = data / "manifest.jsonl"
    steps = [
        ["gen-data", "--scenes", str(args.scenes), "--seed", "7", "--out", str(data), "--preset", args.preset],
        ["train", "--preset", args.preset, "--manifest", str(manifest), "--steps", str(args.steps),
         "--run-dir", str(run), "--force"],
    ]
    for argv in steps:
        if mvps(argv):
            sys.exit(f"failed: mvps {' '.join(argv)}")
    ckpt = str(sorted(run.glob("ckpt_*.pt"))[-1])
    rid = json.loads(manifest.read_text().splitlines()[0])["id"]
    for argv in (["sample", "--checkpoint", ckpt, "--out", str(out / "samples")],
                 ["eval", "--pred-dir", str(out / "samples"), "--manifest", str(manifest), "--out", str(out / "metrics")],
                 ["viz-attn", "--checkpoint", ckpt, "--record", rid, "--out", str(out / "attention")]):
        if mvps(argv):
            sys.exit(f"failed: mvps {' '.join(argv)}")
    print(f"done; see {out}")


if __name__ == "__main__":
    main()
