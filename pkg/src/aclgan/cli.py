"""Command-line entry points: train, translate, evaluate, make-toy, report-params.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, load_config
from .data import AugmentOptions, DatasetError, ToySpec, augment, generate_toy, list_images, load_root, read_image, save_png
from .metrics import EXTRACTORS, NumericalError, evaluate_dirs
from .networks import build_models, count_parameters
from .training import CheckpointError, NonFiniteLossError, read_checkpoint_meta, train, translate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("aclgan")


class UsageError(Exception):
    pass


def _write_run_record(out: Path, command: str, args: argparse.Namespace) -> None:
    record = {k: v for k, v in vars(args).items() if k not in ("func", "dry_run")}
    record["command"] = command
    (out / f"{command}_run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _plan(command: str, args: argparse.Namespace, **resolved) -> int:
    plan = {"command": command, **{k: v for k, v in vars(args).items() if k not in ("func",)}, **resolved}
    print(json.dumps(plan, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def cmd_train(args) -> int:
    h = load_config(args.config)
    root = Path(args.data_root)
    for domain in ("domain_S", "domain_T"):
        if not (root / domain).is_dir():
            raise UsageError(f"{root} lacks a {domain}/ folder")
    if args.resume is not None:
        read_checkpoint_meta(args.resume)
    if args.dry_run:
        return _plan("train", args, hparams=h.to_dict())
    dataset = load_root(root, crop_size=h.image_size, load_size=h.load_size, flip_prob=h.flip_prob)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_record(out, "train", args)
    final = train(h, dataset, out, seed=args.seed, resume=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_translate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise UsageError(f"missing checkpoint: {ckpt}")
    _, h = read_checkpoint_meta(ckpt)
    src = Path(args.input)
    inputs = list_images(src) if src.is_dir() else [src]
    if not inputs or not all(p.is_file() for p in inputs):
        raise UsageError(f"no input images at {src}")
    if args.n_styles < 1:
        raise UsageError("--n-styles must be >= 1")
    if args.dry_run:
        return _plan("translate", args, inputs=[str(p) for p in inputs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_record(out, "translate", args)
    g_T = build_models(h).g_T
    g_T.load_state_dict(torch.load(ckpt / "g_T.pt", weights_only=True))
    opts = AugmentOptions(h.load_size, h.image_size, 0.0, train=False)
    written = 0
    for path in inputs:
        image = augment(read_image(path), np.random.default_rng(0), opts)
        results = translate(ckpt, image, args.n_styles, args.seed, generator=g_T)
        for k, (styled, _) in enumerate(results):
            save_png(styled, out / f"{path.stem}_style{k}.png")
            written += 1
        mask = results[0][1]
        if mask is not None:
            (out / "masks").mkdir(exist_ok=True)
            save_png(mask * 2 - 1, out / "masks" / f"{path.stem}_mask.png")
    print(f"wrote {written} images to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.extractor not in EXTRACTORS:
        raise UsageError(f"unknown extractor {args.extractor!r}; available: {', '.join(sorted(EXTRACTORS))}")
    for d in (args.real_dir, args.fake_dir):
        if not Path(d).is_dir() or not list_images(d):
            raise UsageError(f"{d} is missing or holds no images")
    if args.dry_run:
        return _plan("evaluate", args)
    result = evaluate_dirs(args.real_dir, args.fake_dir, args.extractor, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2) + "\n")
    print(f"fid {result['fid']:.6f}")
    print(f"kid_mean {result['kid_mean']:.6f}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.size < 8:
        raise UsageError("--size must be >= 8")
    spec = ToySpec(n_per_domain=args.n, image_size=args.size)
    if args.dry_run:
        return _plan("make-toy", args, n_files=2 * args.n)
    try:
        manifest = generate_toy(spec, args.out, args.seed)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from None
    print(manifest)
    return EXIT_OK


def cmd_report_params(args) -> int:
    h = load_config(args.config)
    if args.dry_run:
        return _plan("report-params", args, hparams=h.to_dict())
    models = build_models(h)
    for name, module in models.items():
        print(f"{name:6s} {count_parameters(module):>12,d}")
    total = count_parameters(models)
    print(f"{'total':6s} {total:>12,d}  ({total / 1e6:.1f}M)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aclgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan; touch nothing")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a translation model")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None)

    p = add("translate", cmd_translate, "translate images with a trained G_T")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-styles", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = add("evaluate", cmd_evaluate, "FID and KID between two image folders")
    p.add_argument("--real-dir", required=True)
    p.add_argument("--fake-dir", required=True)
    p.add_argument("--extractor", default="desk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)

    p = add("make-toy", cmd_make_toy, "write the procedural bar/disc domains")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = add("report-params", cmd_report_params, "print trainable parameter counts")
    p.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc}; last checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
