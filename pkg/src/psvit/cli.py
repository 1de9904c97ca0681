"""``psvit`` command line: summary, gradcheck, train, eval, viz.

Exit codes: 0 success, 1 validation failure (bad config, bad inputs, an
expectation bound violated), 2 runtime or audit failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import audits
from .backbone import BackboneConfigError
from .checkpoint import CheckpointError, load_model, save_model
from .data import Dataset, DatasetError, IdxFormatError, center_crop, load_idx, synthetic_blobs
from .model import ConfigError, PRESETS, PsVit, PsVitConfig, StateDictError, cost_report, preset
from .sampling import GridConfigError, write_trajectory_svg
from .train import WARMUP_EPOCHS, LrSchedule, evaluate, train, write_metrics_csv

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".psvit.lock"
SUFFIXES = {"k": 1e3, "m": 1e6, "b": 1e9, "g": 1e9}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


VALIDATION_ERRORS = (
    ConfigError, GridConfigError, BackboneConfigError, DatasetError, IdxFormatError,
    CheckpointError, StateDictError, FileNotFoundError,
)


def parse_count(text: str) -> float:
    """'4.7M' -> 4.7e6, '1.6B' -> 1.6e9, plain numbers pass through."""
    t = text.strip().lower()
    scale = SUFFIXES.get(t[-1:], None)
    try:
        return float(t[:-1]) * scale if scale else float(t)
    except ValueError:
        raise CliError(f"cannot parse count {text!r}") from None


# --- config resolution ------------------------------------------------------

OVERRIDES = {
    "n": "n", "iters": "iterations", "depth": "depth", "dim": "dim", "heads": "heads",
    "classes": "num_classes", "input_size": "input_size", "dropout": "dropout",
}


def resolve_config(args) -> PsVitConfig:
    """Preset or JSON file, then command-line overrides, validated up front."""
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}: invalid JSON ({exc})") from None
        cfg = PsVitConfig.from_dict(raw)
    else:
        cfg = preset(args.preset)
    changes = {field: getattr(args, flag) for flag, field in OVERRIDES.items() if getattr(args, flag) is not None}
    if args.share:
        changes["share_weights"] = True
    return cfg.replace(**changes) if changes else cfg


@contextmanager
def output_dir(path: Path | None):
    """Create ``path`` and hold an exclusive lockfile in it for the run."""
    if path is None:
        yield None
        return
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{path} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def write_config(out: Path | None, cfg: PsVitConfig) -> None:
    if out is not None:
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_dataset(args, cfg: PsVitConfig) -> Dataset:
    if args.synthetic:
        ds = synthetic_blobs(args.synthetic, cfg.input_size, cfg.num_classes, seed=args.seed)
    elif args.images and args.labels:
        ds = load_idx(args.images, args.labels, cfg.num_classes)
    else:
        raise CliError("a dataset is required: --images and --labels, or --synthetic COUNT")
    if ds.image_size != (cfg.input_size, cfg.input_size):
        ds = Dataset(center_crop(ds.images, cfg.input_size), ds.labels, ds.num_classes)
    return ds


# --- commands ---------------------------------------------------------------

def cmd_summary(args) -> int:
    cfg = resolve_config(args)
    report = cost_report(cfg)
    print(f"{'module':<10s} {'params':>14s} {'flops':>16s}")
    for name, params, flops in report.rows():
        print(f"{name:<10s} {params:>14,d} {flops:>16,d}")
    print(f"{'total':<10s} {report.total_params:>14,d} {report.total_flops:>16,d}")
    print(f"params {report.total_params / 1e6:.2f}M  flops {report.total_flops / 1e9:.2f}B")
    with output_dir(args.out) as out:
        write_config(out, cfg)
        if out is not None:
            with open(out / "summary.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["module", "params", "flops"])
                w.writerows(report.rows())
                w.writerow(["total", report.total_params, report.total_flops])
    code = EXIT_OK
    for label, expected, actual in (
        ("params", args.expect_params, report.total_params),
        ("flops", args.expect_flops, report.total_flops),
    ):
        if expected is None:
            continue
        target = parse_count(expected)
        dev = 100.0 * abs(actual - target) / target
        ok = dev <= args.tol_pct
        print(f"{'OK' if ok else 'VIOLATED'}  {label} {actual:,d} vs expected {target:,.0f} "
              f"({dev:.1f}% off, tol {args.tol_pct}%)")
        if not ok:
            code = EXIT_INVALID
    return code


def cmd_gradcheck(args) -> int:
    if args.scope != "all" and args.scope not in audits.AUDITS:
        raise CliError(f"unknown gradcheck scope {args.scope!r}; choose from all, {', '.join(audits.AUDITS)}")
    seeds = range(args.seed, args.seed + args.seeds)
    reports = audits.run(args.scope, seeds=seeds, tol=args.tol)
    for rep in reports:
        print(rep.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} audits passed")
    with output_dir(args.out) as out:
        if out is not None:
            with open(out / "gradcheck.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["audit", "max_rel_error", "tol", "passed", "shrunk", "skipped"])
                for r in reports:
                    w.writerow([r.name, repr(r.max_rel_error), r.tol, int(r.passed), r.shrunk, r.skipped])
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args, cfg)
    if ds.num_classes != cfg.num_classes:
        raise CliError(f"dataset has {ds.num_classes} classes, model head has {cfg.num_classes}")
    if args.epochs < 1 or args.batch < 1:
        raise CliError("--epochs and --batch must be positive")
    warmup = args.warmup if args.warmup is not None else min(WARMUP_EPOCHS, args.epochs // 2)
    try:
        schedule = LrSchedule(args.lr, warmup, args.epochs, -(-len(ds) // args.batch))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    model = PsVit(cfg, seed=args.seed)
    with output_dir(args.out) as out:
        write_config(out, cfg)
        best = {"acc": -1.0}

        def on_epoch(m):
            print(f"epoch {m.epoch:4d}  loss {m.loss:.4f}  acc {m.accuracy:.4f}  lr {m.lr:.3e}")
            if m.accuracy > best["acc"]:
                best["acc"] = m.accuracy
                save_model(model, out / "best.psvt")
            return args.stop_at is not None and m.accuracy >= args.stop_at

        history = train(model, ds, schedule, args.epochs, seed=args.seed, batch_size=args.batch,
                        flip=args.flip, on_epoch=on_epoch)
        write_metrics_csv(out / "metrics.csv", history)
        save_model(model, out / "final.psvt")
    print(f"final accuracy {history[-1].accuracy:.4f}  best {best['acc']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    model = load_model(args.checkpoint, strict=True)
    cfg = model.config
    ds = load_dataset(args, cfg)
    result = evaluate(model, ds)
    print(f"top1 {result['top1']:.4f}  top5 {result['top5']:.4f}  count {result['count']}")
    with output_dir(args.out) as out:
        write_config(out, cfg)
        if out is not None:
            with open(out / "eval.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["top1", "top5", "count"])
                w.writerow([repr(result["top1"]), repr(result["top5"]), result["count"]])
    return EXIT_OK


def cmd_viz(args) -> int:
    if args.checkpoint:
        model = load_model(args.checkpoint, strict=True)
    else:
        model = PsVit(resolve_config(args), seed=args.seed)
    cfg = model.config
    if args.synthetic or args.labels:
        images = load_dataset(args, cfg).images
    elif args.images:
        from .data import preprocess, read_idx_images
        images = preprocess(read_idx_images(args.images))
        if images.shape[-2:] != (cfg.input_size, cfg.input_size):
            images = center_crop(images, cfg.input_size)
    else:
        raise CliError("viz needs --images (IDX) or --synthetic COUNT")
    images = images[: args.limit]
    _, log = model.forward(images, return_log=True)
    with output_dir(args.out) as out:
        write_config(out, cfg)
        for b in range(len(images)):
            one = log.for_image(b)
            one.to_csv(out / f"trajectory_{b:03d}.csv")
            arrows = write_trajectory_svg(out / f"trajectory_{b:03d}.svg", one, images[b].mean(axis=0))
            print(f"image {b}: {arrows} arrows -> trajectory_{b:03d}.svg")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring PsVitConfig")
    p.add_argument("--preset", choices=sorted(PRESETS), default="ps-vit-ti")
    p.add_argument("--share", action="store_true", help="share sampler weights across iterations")
    p.add_argument("--n", type=int, help="samples per axis")
    p.add_argument("--iters", type=int, help="sampling iterations N")
    p.add_argument("--depth", type=int, help="encoder layers after sampling")
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--dropout", type=float)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--synthetic", type=int, metavar="COUNT", help="use COUNT synthetic blob images instead")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, model=True, data=False, out_required=False):
        p = sub.add_parser(name, help=help_text)
        if model:
            _model_flags(p)
        if data:
            _data_flags(p)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = command("summary", cmd_summary, "parameter and FLOP counts")
    p.add_argument("--expect-params")
    p.add_argument("--expect-flops")
    p.add_argument("--tol-pct", type=float, default=10.0)

    p = command("gradcheck", cmd_gradcheck, "finite-difference gradient audits", model=False)
    p.add_argument("--scope", default="all")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--tol", type=float)

    p = command("train", cmd_train, "train on an IDX or synthetic dataset", data=True, out_required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--warmup", type=float)
    p.add_argument("--flip", action="store_true", help="random horizontal flips")
    p.add_argument("--stop-at", type=float, metavar="ACC", help="stop once train accuracy reaches ACC")

    p = command("eval", cmd_eval, "top-1/top-5 accuracy of a checkpoint", model=False, data=True)
    p.add_argument("--checkpoint")

    p = command("viz", cmd_viz, "export sampling trajectories as CSV and SVG", data=True, out_required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--limit", type=int, default=4, help="number of images to render")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - CI contract: anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
