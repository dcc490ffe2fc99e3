"""``sdgan`` command line: dataset-gen, train, complete, metrics, report.

Exit codes: 0 success, 2 usage or configuration error, 3 data or format
error, 4 numeric failure.
"""

import argparse
import json
import logging
import math
import os
import sys

from . import data as D
from . import losses as L
from . import report as R
from .errors import BoundsError, ConfigError, ContractError, DimensionError, FormatError, NumericError
from .networks import load_checkpoint
from .trainer import G1_OBJECTIVES, TrainConfig, resume_training, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sdgan")


def _load_config(args):
    """TrainConfig from defaults, then the --config file, then explicit flags."""
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{args.config}: expected a JSON object of settings")
    for flag, key in (("seed", "seed"), ("batch_size", "batch_size"), ("gate_threshold", "gate_threshold"), ("max_epochs", "max_epochs")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    return values


def cmd_dataset_gen(args):
    out = args.out or "data"
    if args.from_dir:
        faces = D.load_image_directory(args.from_dir)
    else:
        faces = D.gen_procedural_faces(args.count, args.seed or 0, (args.channels, args.size, args.size), args.samples_per_subject)
    dataset = D.build_dataset(faces, args.seed or 0, tuple(args.mask), args.fill)
    splits = D.split_dataset(dataset, seed=args.seed or 0)
    path = D.write_dataset(out, splits)
    print(f"wrote {len(dataset)} items ({', '.join(f'{s.split}={len(s)}' for s in splits)}) to {path}")
    return EXIT_OK


def cmd_train(args):
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    overrides = _load_config(args)
    if args.objective:
        overrides["g1_objective"] = args.objective
    if args.no_mode2:
        overrides["mode2"] = False
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    overrides.setdefault("log_path", os.path.join(out, "train.jsonl"))
    overrides.setdefault("checkpoint_dir", out)

    models = state = None
    if args.resume:
        models, state, saved = resume_training(args.resume)
        config = TrainConfig.from_dict(dict(saved.to_dict(), **overrides))
    else:
        config = TrainConfig.from_dict(overrides)

    splits = D.load_manifest(args.manifest)
    if args.split not in splits:
        raise ContractError(f"manifest has no {args.split!r} split (found {sorted(splits)})")
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    result = train(splits[args.split], config, models, state)
    last = result.records[-1] if result.records else None
    if last:
        print(f"epoch {last.epoch}: loss_d1={last.loss_d1:.4f} loss_g1={last.loss_g1:.4f} pool={last.nice_pool_size}")
    print(f"final checkpoint: {os.path.join(config.checkpoint_dir, 'final.sdg')}")
    return EXIT_OK


def _output_path(out, src, stage, ext):
    stem = os.path.splitext(os.path.basename(src))[0]
    return os.path.join(out, f"{stem}_{stage}{ext}")


def cmd_complete(args):
    out = args.out or "completed"
    os.makedirs(out, exist_ok=True)
    models = load_checkpoint(args.checkpoint).models
    missing = {"g1"} | ({"g2"} if args.stage == "full" else set())
    if not missing <= set(models):
        raise ContractError(f"{args.checkpoint} lacks {sorted(missing - set(models))}")
    images = [D.read_image(p) for p in args.images]
    for src, img in zip(args.images, images):
        result = R.complete(models, img[None], args.stage)[0]
        path = _output_path(out, src, args.stage, ".pgm" if img.shape[0] == 1 else ".ppm")
        D.write_image(result, path)
        print(path)
    return EXIT_OK


def cmd_metrics(args):
    a, b = D.read_image(args.image_a), D.read_image(args.image_b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    p = L.psnr(a, b)
    s = L.ssim_value(a, b)
    if args.format == "json":
        print(json.dumps({"psnr_db": R.fmt_float(p) if p == math.inf else p, "ssim": s}))
    else:
        print(f"psnr_db\t{R.fmt_float(p)}\nssim\t{R.fmt_float(s)}")
    return EXIT_OK


def _parse_variant(text):
    label, _, ckpt = text.partition("=")
    R.variant_stage(label)
    if label != "occluded-input" and not ckpt:
        raise ConfigError(f"variant {label!r} needs a checkpoint: {label}=PATH")
    return label, ckpt or None


def cmd_report(args):
    out = args.out or "report"
    os.makedirs(out, exist_ok=True)
    variants = [_parse_variant(v) for v in (args.variant or ["occluded-input"])]
    splits = D.load_manifest(args.manifest)
    if args.split not in splits:
        raise ContractError(f"manifest has no {args.split!r} split (found {sorted(splits)})")
    test = splits[args.split]
    summary = []
    for label, ckpt in variants:
        models = load_checkpoint(ckpt).models if ckpt else None
        rep = R.evaluate_variant(label, test, models, args.workers)
        rep.to_csv(os.path.join(out, f"{label}.csv"))
        summary.append((label, rep.mean_psnr, rep.mean_ssim))
    with open(os.path.join(out, "summary.csv"), "w") as fh:
        fh.write("variant,mean_psnr_db,mean_ssim\n")
        for label, p, s in summary:
            fh.write(f"{label},{R.fmt_float(p)},{R.fmt_float(s)}\n")
    if args.log:
        R.write_loss_curve(args.log, os.path.join(out, "loss_curve.csv"))
    for label, p, s in summary:
        print(f"{label:16s} psnr {p:8.3f} dB  ssim {s:.4f}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="JSON file with training settings")
    common.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default 20)")
    common.add_argument("--gate-threshold", type=float, default=None, help="nice-pool admission bound (default 0.01)")
    common.add_argument("--max-epochs", type=int, default=None, help="training epochs (default 1000)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sdgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", parents=[common], help="write a procedural (or folder-based) face dataset")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--mask", type=int, nargs=2, default=(16, 16), metavar=("H", "W"))
    p.add_argument("--fill", type=float, default=0.0, help="mask fill value in [0, 1]")
    p.add_argument("--samples-per-subject", type=int, default=8)
    p.add_argument("--from-dir", default=None, help="read ROOT/<subject>/*.pgm|ppm instead of generating")
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("train", parents=[common], help="run two-mode adversarial training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--objective", choices=G1_OBJECTIVES, default=None, help="G1 loss preset")
    p.add_argument("--no-mode2", action="store_true", help="train D1/G1 only")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", parents=[common], help="complete occluded images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", choices=("mode1", "full"), default="full")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("metrics", parents=[common], help="PSNR and SSIM between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", parents=[common], help="per-variant metric tables and loss curves")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--variant", action="append", help="LABEL or LABEL=CHECKPOINT; repeatable")
    p.add_argument("--log", default=None, help="training log to export as loss_curve.csv")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sdgan: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"sdgan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, BoundsError, DimensionError, ContractError) as exc:
        print(f"sdgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"sdgan: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
