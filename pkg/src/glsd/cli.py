"""Command line entry point: ``synth``, ``train``, ``eval`` and ``viz``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import MultiCropConfig, make_views
from .checkpoint import load_checkpoint
from .data import load_dataset, load_image, save_dataset, synth_dataset
from .evaluation import evaluate, report_json
from .geometry import GeoParams
from .trainer import TrainConfig, metrics_line, steps_per_epoch, train
from .viz import match_views, render_svg

log = logging.getLogger("glsd")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _bool(text: str) -> bool:
    return TrainConfig.coerce("photometric", text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides (any key of the config file)")
    for f in dataclasses.fields(TrainConfig):
        kind = type(f.default)
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{f.name}", type=_bool if kind is bool else kind,
                           default=None, metavar=kind.__name__.upper(),
                           help=f"default: {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glsd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a class-balanced synthetic texture dataset")
    p.add_argument("out_dir")
    p.add_argument("--n-images", type=int, default=512)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("config", nargs="?", help="key=value config file; flags override it")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the config and print the step count without training")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--which", choices=["knn", "linear", "correspondence", "all"], default="all")
    p.add_argument("--queries", help="held-out dataset; default is leave-one-out on the bank")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--weighted", action="store_true", help="similarity-weighted k-NN votes")
    p.add_argument("--size", type=int, default=None, help="centre-crop size (default: global view size)")
    p.add_argument("--params", choices=["teacher", "student"], default="teacher")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON report here")

    p = sub.add_parser("viz", help="SVG overlay of token matchings between two views")
    p.add_argument("image", help=".ppm image, or a dataset directory with --index")
    p.add_argument("out", help="output .svg path")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=["geometric", "similarity"], default="geometric")
    p.add_argument("--checkpoint", help="needed for similarity overlays")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--crop-a", help="x0,y0,x1,y1[,flip] in original pixels")
    p.add_argument("--crop-b", help="x0,y0,x1,y1[,flip] in original pixels")
    p.add_argument("--scale", type=float, default=4.0)
    return parser


# ---------------------------------------------------------------------------
# commands


def load_config(args) -> TrainConfig:
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        text = path.read_text()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    try:
        return TrainConfig.from_text(text, **overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _dataset(path: str):
    if not path:
        raise UsageError("no dataset path given (set dataset=... or --dataset)")
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None


def cmd_synth(args) -> int:
    try:
        ds = synth_dataset(args.n_images, args.n_classes, args.seed, args.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(args.out_dir, ds)
    counts = np.bincount(ds.labels, minlength=args.n_classes)
    print(f"wrote {len(ds)} images ({args.size}x{args.size}) to {args.out_dir}; "
          f"per class: {counts.tolist()}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    ds = _dataset(config.dataset)
    spe = steps_per_epoch(len(ds), config.batch_size)
    if args.dry_run:
        print(json.dumps({"images": len(ds), "steps_per_epoch": spe,
                          "total_steps": spe * config.epochs, "peak_lr": config.peak_lr(),
                          "config_hash": config.digest()}))
        return 0

    def progress(rec):
        log.info("%s", metrics_line(rec))

    res = train(config, ds, progress=progress)
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics_path),
                      "steps": len(res.metrics), "final_loss": last.get("loss_total")}))
    return 0


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None


def cmd_eval(args) -> int:
    state, doc = _load_ckpt(args.checkpoint)
    ds = _dataset(args.dataset)
    qs = _dataset(args.queries) if args.queries else None
    size = args.size or doc.get("meta", {}).get("train_config", {}).get("global_size", 64)
    params = state.teacher if args.params == "teacher" else state.student
    try:
        report = evaluate(params, state.config, ds.images, ds.labels,
                          None if qs is None else qs.images, None if qs is None else qs.labels,
                          which=args.which, k=args.k, size=size, seed=args.seed,
                          weighted=args.weighted)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = report_json(report)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _parse_crop(text: str, size: int) -> GeoParams:
    parts = text.split(",")
    if len(parts) not in (4, 5):
        raise UsageError(f"crop must be x0,y0,x1,y1[,flip], got {text!r}")
    try:
        x0, y0, x1, y1 = (float(v) for v in parts[:4])
        flip = len(parts) == 5 and _bool(parts[4])
        return GeoParams(x0, y0, x1, y1, size, size, flip)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_viz(args) -> int:
    src = Path(args.image)
    if src.is_dir():
        ds = _dataset(str(src))
        if not 0 <= args.index < len(ds):
            raise UsageError(f"index {args.index} outside dataset of {len(ds)}")
        image = ds.images[args.index]
    else:
        try:
            image = load_image(src)
        except FileNotFoundError:
            raise UsageError(f"image not found: {src}") from None
    params = cfg = None
    patch = args.patch
    if args.checkpoint:
        state, _ = _load_ckpt(args.checkpoint)
        params, cfg, patch = state.teacher, state.config, state.config.patch
    elif args.mode == "similarity":
        raise UsageError("similarity overlays need --checkpoint")
    if args.crop_a or args.crop_b:
        if not (args.crop_a and args.crop_b):
            raise UsageError("give both --crop-a and --crop-b")
        geo_a, geo_b = _parse_crop(args.crop_a, args.size), _parse_crop(args.crop_b, args.size)
    else:
        mc = MultiCropConfig(global_size=args.size, local_size=patch, n_local=0, patch=patch)
        vs = make_views(image, mc, args.seed)
        geo_a, geo_b = vs[0].geo, vs[1].geo
    try:
        va, vb, m = match_views(image, geo_a, geo_b, args.mode, patch, params, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    svg = render_svg(va, vb, geo_a, geo_b, m, patch, scale=args.scale, title=f"{args.mode} matching")
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}: {len(m)} segments, {int((~m.mask).sum())} masked")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"glsd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        log.debug("internal error", exc_info=True)
        print(f"glsd {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
