"""``rehit`` command line: train / infer / eval / synth / inspect / gradcheck.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 checkpoint error,
5 data mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import CheckpointError, load_into, load_model
from .config import ConfigError, load_config
from .data import (DataMismatchError, DatasetManifest, ImageFormatError, ShadowConfig, list_images,
                   load_image, save_image, synth_dataset, write_synthetic)
from .metrics import evaluate_dir, write_csv
from .model import build_model, count_params, estimate_flops, measured_flops, param_breakdown
from .training import NumericError, predict, train_loop
from .verification import SCOPES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_DATA = 0, 2, 3, 4, 5
REFERENCE_PARAMS = 17.5e6

log = logging.getLogger("rehit")


def _thread_limit():
    n = os.environ.get("REHIT_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def pad_to_multiple(img: np.ndarray, multiple: int = 4, minimum: int = 16) -> tuple[np.ndarray, int, int]:
    """Reflect-pad bottom/right so both dims are multiples of ``multiple`` and >= ``minimum``."""
    h, w = img.shape[-2:]
    th = max(minimum, -(-h // multiple) * multiple)
    tw = max(minimum, -(-w // multiple) * multiple)
    mode = "reflect" if min(h, w) > 1 else "edge"
    padded = np.pad(img, ((0, 0), (0, 0), (0, th - h), (0, tw - w)), mode=mode)
    return padded, h, w


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    nn.set_mode(cfg.mode)
    if cfg.paths.manifest is None:
        raise ConfigError("[paths] manifest is required for training")
    pairs = DatasetManifest.read(cfg.paths.manifest).load_pairs()
    small = [p.id for p in pairs if min(p.i_sh.shape[-2:]) < cfg.train.crop]
    if small:
        raise DataMismatchError(f"images smaller than crop {cfg.train.crop}", small)
    model = build_model(cfg.model, cfg.train.seed)
    if cfg.paths.checkpoint is not None:
        load_into(model, cfg.paths.checkpoint)
    result = train_loop(model, pairs, cfg.train, cfg.paths.out_dir, log_fn=print)
    print(f"done: {len(result.checkpoints)} checkpoint(s) in {cfg.paths.out_dir}")
    return EXIT_OK


def cmd_infer(args) -> int:
    nn.set_mode(args.mode)
    model = load_model(args.checkpoint)
    images = list_images(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        log.warning("no PNG/PPM images in %s", args.input)
        return EXIT_OK
    for stem, path in images.items():
        padded, h, w = pad_to_multiple(load_image(path))
        save_image(predict(model, padded)[..., :h, :w], out / path.name)
        print(f"{path.name}: {h}x{w}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_dir(args.pred, args.gt)
    print(report.table())
    if args.csv:
        write_csv(report, args.csv)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    try:
        shadow = ShadowConfig(args.count, args.softness, args.attenuation)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = write_synthetic(synth_dataset(args.n, args.size, args.seed, shadow), args.out)
    print(f"wrote {len(manifest.entries)} pairs to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = load_config(args.config, args.set)
    with nn.numeric_mode(cfg.mode):
        model = build_model(cfg.model, 0)
        total = count_params(model)
        print("config:", json.dumps(cfg.model.to_dict(), sort_keys=True))
        print(f"params: {total:,} ({total / 1e6:.3f} M); ratio to 17.5 M reference: "
              f"{total / REFERENCE_PARAMS:.3f}")
        for name, n in param_breakdown(model, args.depth).items():
            print(f"  {name:<28} {n:>12,}")
        flops = estimate_flops(model, args.height, args.width)
        print(f"flops @ {args.height}x{args.width}: {flops:,} ({flops / 1e9:.2f} G)")
        if args.measure:
            print(f"measured flops: {measured_flops(model, args.height, args.width):,}")
    return EXIT_OK


def _broken_rule(op: str):
    original = nn.tensor.grad_rule(op)

    def rule(ctx, g):
        return tuple(None if x is None else 1.01 * x for x in original(ctx, g))
    return rule


def cmd_gradcheck(args) -> int:
    if args.fault and args.fault not in nn.tensor._RULES:
        raise ConfigError(f"--fault: no gradient rule named {args.fault!r}")
    failed = []

    def report(r):
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.case.scope:<6} {r.case.name:<24} max_rel_err={r.error:.3e} "
              f"tol={r.case.tol:.0e} ({r.seconds:.1f}s)", flush=True)
        if not r.passed:
            failed.append(r.case.name)

    ctx = nn.override_rule(args.fault, _broken_rule(args.fault)) if args.fault else nullcontext()
    with ctx:
        run_suite(args.scope, report)
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rehit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a TOML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("fast", "verify"), default="fast")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against targets")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write synthetic shadow pairs and a manifest")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=ShadowConfig.count)
    p.add_argument("--softness", type=float, default=ShadowConfig.softness)
    p.add_argument("--attenuation", type=float, default=ShadowConfig.attenuation)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="parameter count, breakdown and FLOPs")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--measure", action="store_true", help="also count FLOPs in a real forward pass")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="central-difference gradient suite (float64)")
    p.add_argument("--scope", choices=("all",) + SCOPES, default="all")
    p.add_argument("--fault", metavar="OP", help="perturb OP's gradient rule by 1%% (self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataMismatchError, ImageFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
