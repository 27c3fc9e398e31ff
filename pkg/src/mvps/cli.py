"""Command line entry point: ``mvps {gen-data,train,sample,eval,viz-attn}``.

Exit codes: 0 ok, 1 runtime/IO failure, 2 usage or validation error.
The compute device comes from ``MVPS_DEVICE`` (default ``cpu``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("mvps")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; mapped to exit code 2."""


def _device():
    import torch

    return torch.device(os.environ.get("MVPS_DEVICE", "cpu"))


def _positive(name):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {s!r}")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return parse


def _location(s: str):
    from .geo import GeoLocation

    try:
        lat, lon = (float(x) for x in s.split(","))
        return GeoLocation(lat, lon)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"location must be LAT,LON within range, got {s!r} ({exc})")


def _records(manifest: str):
    from .dataio import load_manifest

    if not Path(manifest).exists():
        raise UsageError(f"manifest {manifest} does not exist")
    return load_manifest(manifest)


def _find_record(records, rid: str):
    for r in records:
        if r.id == rid:
            return r
    raise UsageError(f"record {rid!r} not found (manifest has {len(records)} records, e.g. {records[0].id!r})")


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .synthworld import make_dataset

    overrides = list(args.set or [])
    if args.pano_height is not None:
        overrides.append(f"world.render.pano_size=[{args.pano_height}, {4 * args.pano_height}]")
    if args.overhead_size is not None:
        overrides.append(f"world.render.overhead_size={args.overhead_size}")
    if args.gsd is not None:
        overrides.append(f"world.render.gsd={args.gsd}")
    cfg = _config_with(args, overrides)
    path = make_dataset(args.scenes, args.panos, args.seed, args.out, cfg.world, workers=args.workers)
    print(path)
    return EXIT_OK


def _config_with(args, overrides: list[str]):
    from .config import PRESETS, RunConfig, apply_overrides

    try:
        cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
        return apply_overrides(cfg, overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))


def _load_config(args):
    overrides = list(args.set or [])
    if args.manifest:
        overrides.append(f"data.manifest={args.manifest}")
    if args.steps is not None:
        overrides.append(f"train.steps={args.steps}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return _config_with(args, overrides)


def cmd_train(args) -> int:
    from filelock import FileLock, Timeout

    from .train import latest_checkpoint, load_examples, load_run, train

    cfg = _load_config(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        log.error("run directory %s is locked by another training process", run_dir)
        return EXIT_RUNTIME
    try:
        existing = latest_checkpoint(run_dir) is not None or (run_dir / "loss.jsonl").exists()
        if existing and not (args.resume or args.force):
            raise UsageError(f"{run_dir} already holds a run; pass --resume to continue or --force to overwrite")
        if args.resume and latest_checkpoint(run_dir) is None:
            raise UsageError(f"--resume given but {run_dir} has no checkpoint")
        if args.force and not args.resume:
            for p in run_dir.glob("ckpt_*.pt"):
                p.unlink()
            (run_dir / "loss.jsonl").unlink(missing_ok=True)
        if args.resume:
            # the saved config is authoritative, apart from the step budget
            _, _, _, saved = load_run(latest_checkpoint(run_dir))
            saved.train.steps = cfg.train.steps
            cfg = saved
        cfg.save(run_dir / "config.yaml")
        records = _records(cfg.data.manifest)
        examples = load_examples(records, cfg)
        device = _device()
        model = None
        if not args.resume:
            from .model import build_model

            model = build_model(cfg).to(device)

        def report(step, loss):
            if step % cfg.train.log_every == 0:
                log.info("step %d loss %.5f", step, loss)

        _, ckpt = train(cfg, examples, run_dir, cfg.train.steps, resume=args.resume, on_step=report, model=model)
        print(ckpt)
        return EXIT_OK
    finally:
        lock.release()


def cmd_sample(args) -> int:
    from PIL import Image

    from .geo import haversine_distance, in_footprint
    from .model import collate, ddim_sample, dump_features, load_example, retarget
    from .train import load_run

    model, _, step, cfg = load_run(args.checkpoint)
    model.to(_device())
    records = _records(args.manifest or cfg.data.manifest)
    jobs = []  # (output stem, record)
    for rid in args.record or []:
        rec = _find_record(records, rid)
        jobs.append((rec.id, rec))
    for loc in args.location or []:
        hits = [r for r in records if in_footprint(loc, r.frame)]
        if not hits:
            nearest = min(records, key=lambda r: haversine_distance(loc, r.frame.center))
            raise UsageError(f"location ({loc.lat}, {loc.lon}) lies outside every satellite footprint; "
                             f"nearest record is {nearest.id!r} "
                             f"({haversine_distance(loc, nearest.frame.center):.1f} m from its center)")
        rec = retarget(hits[0], loc)
        jobs.append((f"{rec.id}_{loc.lat:.6f}_{loc.lon:.6f}", rec))
    if not jobs:
        jobs = [(r.id, r) for r in records]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, rec in jobs:
        batch = collate([load_example(rec, cfg, with_target=False)], cfg)
        img = ddim_sample(model, batch, args.steps, args.cfg, args.eta, args.seed,
                          clip_x0=model.cfg.sample.clip_x0)[0]
        path = out / f"{stem}.png"
        Image.fromarray(img).save(path)
        print(path)
        if args.dump_features:
            Path(args.dump_features).mkdir(parents=True, exist_ok=True)
            dump_features(model, batch, Path(args.dump_features) / f"{stem}.npz")
    log.info("sampled %d panoramas from checkpoint step %d (steps=%d, cfg=%.2f, seed=%d)",
             len(jobs), step, args.steps, args.cfg, args.seed)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_directory

    if not Path(args.pred_dir).is_dir():
        raise UsageError(f"prediction directory {args.pred_dir} does not exist")
    records = _records(args.manifest)
    report = evaluate_directory(args.pred_dir, records, args.out)
    s = report["summary"]
    print(f"{args.out}.csv: {s['status']}")
    if report["n_failed"]:
        log.error("%d of %d predictions missing or unreadable", report["n_failed"], len(records))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_viz_attn(args) -> int:
    from .train import load_run
    from .viz import visualize_attention

    model, _, _, cfg = load_run(args.checkpoint)
    records = _records(args.manifest or cfg.data.manifest)
    rec = _find_record(records, args.record)
    sidecar = visualize_attention(model, rec, args.out, scale=args.scale)
    print(Path(args.out) / "attention.json")
    log.info("wrote %d local maps and 1 global map", len(sidecar["local"]))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvps", description="Mixed-view panorama synthesis at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset and its manifest")
    g.add_argument("--scenes", type=_positive("--scenes"), required=True, help="number of scenes/records")
    g.add_argument("--panos", type=int, default=8, help="nearby panoramas per record")
    g.add_argument("--seed", type=int, default=0, help="dataset seed; record i uses substream (seed, i)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--pano-height", type=int, help="panorama height, width is 4x (overrides world.render)")
    g.add_argument("--overhead-size", type=int, help="satellite image size in pixels")
    g.add_argument("--gsd", type=float, help="meters per satellite pixel")
    g.add_argument("--workers", type=int, default=1, help="render processes (output does not depend on it)")
    g.add_argument("--config", help="YAML run config; its world section sets scene and render knobs")
    g.add_argument("--preset", choices=("desk", "tiny", "full"), default="desk", help="base config when --config is absent")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the model, writing checkpoints and a JSONL loss log")
    t.add_argument("--config", help="YAML run config (default: the preset)")
    t.add_argument("--preset", choices=("desk", "tiny", "full"), default="desk", help="base config when --config is absent")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--manifest", help="overrides data.manifest")
    t.add_argument("--steps", type=_positive("--steps"), help="overrides train.steps (total, incl. resumed)")
    t.add_argument("--seed", type=int, help="overrides seed")
    t.add_argument("--run-dir", required=True, help="checkpoints, loss.jsonl and config.yaml go here")
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    mode.add_argument("--force", action="store_true", help="discard an existing run in --run-dir")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="synthesize panoramas for records or explicit locations")
    s.add_argument("--checkpoint", required=True, help="run checkpoint (.pt)")
    s.add_argument("--manifest", help="defaults to the manifest recorded in the checkpoint config")
    s.add_argument("--record", action="append", help="record id, repeatable (default: every record)")
    s.add_argument("--location", action="append", type=_location, metavar="LAT,LON",
                   help="arbitrary target inside some record's footprint, repeatable")
    s.add_argument("--steps", type=_positive("--steps"), default=50, help="DDIM steps")
    s.add_argument("--cfg", type=float, default=7.5, help="classifier-free guidance scale")
    s.add_argument("--eta", type=float, default=0.0, help="DDIM eta (0 = deterministic)")
    s.add_argument("--seed", type=int, default=0, help="sampling seed (initial noise)")
    s.add_argument("--out", required=True, help="output directory for PNGs")
    s.add_argument("--dump-features", metavar="DIR",
                   help="also save attention maps, masks and injected features as <stem>.npz (debugging)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score predicted panoramas against the manifest targets")
    e.add_argument("--pred-dir", required=True, help="directory with <record id>.png predictions")
    e.add_argument("--manifest", required=True, help="manifest whose target panoramas are the ground truth")
    e.add_argument("--out", required=True, help="report path prefix; writes .csv and .json")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-attn", help="draw local and global attention for one record")
    v.add_argument("--checkpoint", required=True, help="run checkpoint (.pt)")
    v.add_argument("--manifest", help="defaults to the manifest recorded in the checkpoint config")
    v.add_argument("--record", required=True, help="record id to visualize")
    v.add_argument("--out", required=True, help="output directory for figures, raw maps and attention.json")
    v.add_argument("--scale", type=int, default=4, help="satellite upscaling for the global figure")
    v.set_defaults(func=cmd_viz_attn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .dataio import CheckpointError, ManifestError
    from .synthworld import SceneError

    try:
        return args.func(args)
    except (UsageError, ManifestError, SceneError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
