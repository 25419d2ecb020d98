"""Command-line entry point: preprocess, train, evaluate, predict, gradcheck, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import sys
import zlib
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, load_config
from .errors import DataError, Nodule3DError
from .inference import (denoise, mask_to_world, project_2d, sliding_window_predict, threshold_map,
                        write_detections, write_grid_csv, write_map, write_pgm)
from .network import build_network, canonical_spec, format_summary
from .optim import OptimizerState
from .preprocess import MANIFEST_NAME, normalize, preprocess_scan, read_cube_cache, resample, \
    write_cube_cache
from .seeding import substream
from .training import CubeDataset, evaluate, fit, split_by_scan
from .volume_io import parse_annotations, read_mhd

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    if args.seed is not None:
        cfg = replace(cfg, sampler=replace(cfg.sampler, seed=args.seed),
                      train=replace(cfg.train, seed=args.seed))
    return cfg


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    scans = sorted(Path(args.scans).glob("*.mhd"))
    if not scans:
        print(f"no scans found in {args.scans}", file=sys.stderr)
        return EXIT_DATA
    annotations = parse_annotations(Path(args.annotations).read_text())
    cubes, failures = [], []
    for path in scans:
        series = path.stem
        rng = substream(cfg.sampler.seed, "sampler", zlib.crc32(series.encode("utf-8")))
        try:
            found = preprocess_scan(read_mhd(path), annotations, cfg.sampler, rng)
        except DataError as exc:
            failures.append((path, exc))
            print(f"{path.name}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        positives = sum(c.label for c in found)
        print(f"{series}: {positives} positive, {len(found) - positives} negative cubes")
        cubes += found
    write_cube_cache(cubes, args.out)
    print(f"wrote {len(cubes)} cubes to {args.out}")
    if failures:
        print(f"{len(failures)} of {len(scans)} scans failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _load_data(path) -> CubeDataset:
    if not (Path(path) / MANIFEST_NAME).exists():
        raise DataError(f"no {MANIFEST_NAME} in {path}")
    return CubeDataset.from_samples(read_cube_cache(path))


def _splits(data: CubeDataset, cfg: PipelineConfig):
    t = cfg.train
    ids = split_by_scan(list(data.series), (t.train_scans, t.val_scans, t.test_scans), t.seed)
    return [data.subset(i) for i in ids]


def cmd_train(args) -> int:
    cfg = _config(args)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.small:
        overrides["network"] = "small"
    if args.batchnorm:
        overrides["batchnorm"] = True
    train_cfg = replace(cfg.train, **overrides)

    data = _load_data(args.data)
    train, val, test = _splits(data, cfg)
    edge = data.x.shape[1]
    width = 0.25 if train_cfg.network == "small" else 1.0
    spec = canonical_spec(width, batchnorm=train_cfg.batchnorm, input_edge=edge)
    model = build_network(spec, train_cfg.seed)
    state = OptimizerState.for_params(model.params, train_cfg.lr, train_cfg.momentum)
    print(f"{len(train)} train / {len(val)} val / {len(test)} test cubes, "
          f"{spec.n_params:,} parameters")
    history = fit(model, state, train, val, train_cfg, args.out)
    for h in history:
        va = h["val"]
        val_txt = f" val_loss={va.loss:.4f} val_acc={va.accuracy:.4f}" if va else ""
        print(f"epoch {h['epoch']}: loss={h['train'].loss:.4f} acc={h['train'].accuracy:.4f}{val_txt}")
    if history and history[-1]["val"]:
        va = history[-1]["val"]
        print(f"final val_loss={va.loss:.6f} val_acc={va.accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    if args.split != "all":
        data = dict(zip(("train", "val", "test"), _splits(data, cfg)))[args.split]
    metrics = evaluate(model, data, cfg.train.batch_size)
    print(f"loss={metrics.loss:.6f} accuracy={metrics.accuracy:.4f} n={len(data)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    stride = args.stride if args.stride is not None else cfg.stride
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    model, _, _ = load_checkpoint(args.checkpoint)
    volume = normalize(resample(read_mhd(args.scan), cfg.sampler.target_spacing),
                       cfg.sampler.hu_window)
    pmap = sliding_window_predict(volume, model, stride)
    mask = denoise(threshold_map(pmap, threshold))
    detections = mask_to_world(mask, pmap)

    out = Path(args.out)
    write_map(pmap, out)
    write_detections(out / "detections.csv", detections)
    projection = project_2d(pmap.grid, args.axis)
    write_pgm(out / "projection.pgm", projection)
    write_grid_csv(out / "projection.csv", projection)
    write_pgm(out / "mask_projection.pgm", project_2d(mask.mask, args.axis))
    print(f"{pmap.grid.size} windows, max probability {pmap.grid.max():.4f}, "
          f"{len(detections)} detections")
    for d in detections:
        x, y, z = d.center_world
        print(f"  ({x:.1f}, {y:.1f}, {z:.1f}) mm  p={d.probability:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gc.run_gradcheck(args.seed or 0, corrupt=args.corrupt)
    for name, err in errors.items():
        status = "ok" if err < gc.THRESHOLDS[name] else "FAIL"
        print(f"{name:<12} max_rel_error={err:.3e} threshold={gc.THRESHOLDS[name]:.0e} {status}")
    return EXIT_OK if gc.passed(errors) else EXIT_VERIFY


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model, _, epoch = load_checkpoint(args.checkpoint)
        spec = model.spec
        if model.n_params != spec.n_params:
            print("parameter arrays disagree with the layer table", file=sys.stderr)
            return EXIT_VERIFY
    else:
        spec = canonical_spec(0.25 if args.network == "small" else 1.0)
    sys.stdout.write(format_summary(spec, csv=args.csv))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed for every substream")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS worker threads (1 = bit-exact reference)")

    parser = _Parser(prog="nodule3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="scans + annotations -> cube cache")
    p.add_argument("--scans", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train on a cube cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--small", action="store_true", help="quarter-width network")
    p.add_argument("--batchnorm", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="loss and accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="sliding-window inference on one scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--corrupt", choices=sorted(gc.CHECKS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", parents=[common], help="print the layer table")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--network", choices=("canonical", "small"))
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except (Nodule3DError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
