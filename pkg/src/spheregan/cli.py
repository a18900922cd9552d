"""Command-line entry point: ``spheregan <subcommand> ...``.

Failures print one line ``error code=<name> message=<text>`` to stderr and
exit with a code specific to the failure class.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DataError, SynthConfig, load_dataset, synth_generate
from .evaluation import EmptyReportError, evaluate, evaluate_feedback, feedback_sweep, run_ablation
from .geometry import GeometryError, build_conv_grid, build_pool_grid, grid_rows
from .losses import DegenerateInputError
from .metrics import evaluate_frames
from .model import ConfigError, Discriminator, Generator
from .training import TrainConfig, TrainingDivergedError, load_checkpoint, load_config, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PATH = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_DIVERGED = 6
EXIT_INTERNAL = 1


class CliError(Exception):
    def __init__(self, code, name, message):
        super().__init__(message)
        self.code, self.name = code, name


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _write_report(report, out, label):
    text = report.to_json()
    table = report.table(label)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n")
        (out / "report.txt").write_text(table + "\n")
    print(table)


def _label(cfg):
    return "Sphere-GAN" if cfg.conv_mode == "spherical" else "Standard-GAN"


def _dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise CliError(EXIT_PATH, "unreadable_path", f"{what} {p} is not a readable directory")
    return p


def cmd_synth(args):
    cfg = SynthConfig(num_videos=args.videos, frames_per_video=args.frames, height=args.height, seed=args.seed)
    if cfg.height % 8 or cfg.height < 8:
        raise CliError(EXIT_CONFIG, "config", f"--height must be a positive multiple of 8, got {cfg.height}")
    seqs = synth_generate(cfg, args.out)
    print(json.dumps({"out": str(args.out), "videos": len(seqs), "frames": args.frames,
                      "height": cfg.height, "width": 2 * cfg.height, "seed": cfg.seed}))


def _train_config(args):
    if args.config:
        if not Path(args.config).is_file():
            raise CliError(EXIT_PATH, "unreadable_path", f"config file {args.config} not found")
        return load_config(args.config, args.override)
    cfg = TrainConfig().with_overrides(args.override)
    cfg.validate()
    return cfg


def cmd_train(args):
    cfg = _train_config(args)
    data_dir = args.data or cfg.data
    out = args.out or cfg.out or "run"
    if not data_dir:
        raise CliError(EXIT_CONFIG, "config", "no dataset: pass --data or set train.data")
    state = None
    if args.resume:
        state = load_checkpoint(_dir(args.resume, "checkpoint"))
        cfg = state.config
    seqs = load_dataset(_dir(data_dir, "dataset"), cfg.height, cfg.width)
    state = train(cfg, seqs, out_dir=out, state=state)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"steps": state.step, "checkpoint": str(Path(out) / "checkpoints" / "last"), "last": last}))


def cmd_eval(args):
    state = load_checkpoint(_dir(args.checkpoint, "checkpoint"))
    cfg = state.config
    seqs = load_dataset(_dir(args.data, "dataset"), cfg.height, cfg.width)
    report = evaluate(state.generator, seqs, k=cfg.k, dump_maps=args.dump_maps)
    _write_report(report, args.out, _label(cfg))


def _parse_ns(text):
    if ".." in text:
        lo, hi = text.split("..", 1)
        ns = list(range(int(lo), int(hi) + 1))
    else:
        ns = [int(v) for v in text.split(",")]
    if not ns or min(ns) < 1:
        raise CliError(EXIT_CONFIG, "config", f"--n needs intervals >= 1, got {text!r}")
    return ns


def cmd_eval_feedback(args):
    state = load_checkpoint(_dir(args.checkpoint, "checkpoint"))
    cfg = state.config
    seqs = load_dataset(_dir(args.data, "dataset"), cfg.height, cfg.width)
    ns = _parse_ns(args.n)
    if len(ns) == 1:
        report = evaluate_feedback(state.generator, seqs, ns[0], k=cfg.k)
        _write_report(report, args.out, _label(cfg))
        return
    reports, table = feedback_sweep(state.generator, seqs, ns, k=cfg.k)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps({str(n): r.to_dict() for n, r in reports.items()}, indent=2) + "\n")
        (out / "report.txt").write_text(table + "\n")
    print(table)


def cmd_metrics(args):
    pred_files = data_mod.list_frame_files(_dir(args.pred, "prediction"), ".png")
    gt_dir, fix_dir = _dir(args.gt, "ground-truth"), _dir(args.fixations, "fixation")
    if not pred_files:
        raise CliError(EXIT_DATA, "data", f"no PNG maps in {args.pred}")
    preds, gts, fixes, ids = [], [], [], []
    for p in pred_files:
        g, f = gt_dir / p.name, fix_dir / f"{p.stem}.csv"
        missing = [str(x) for x in (g, f) if not x.exists()]
        if missing:
            raise DataError("missing files: " + ", ".join(missing))
        preds.append(data_mod.read_map_png(p))
        gts.append(data_mod.read_map_png(g))
        fixes.append(data_mod.read_fixations(f))
        ids.append(p.stem)
    _write_report(evaluate_frames(preds, gts, fixes, ids), args.out, "predictions")


def cmd_describe(args):
    cfg = _train_config(args)
    rng = np.random.default_rng(0)
    nets = (("generator", Generator(cfg.generator_config(), rng)),
            ("discriminator", Discriminator(cfg.discriminator_config(), rng)))
    for title, net in nets:
        rows = net.describe()
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        print(f"{title} ({cfg.conv_mode if title == 'generator' else 'planar'}, {cfg.height}x{cfg.width})")
        for layer, shapes, count in rows:
            print(f"  {layer.ljust(w0)}  {shapes.ljust(w1)}  {count:>9,d}")
        print(f"  {'total'.ljust(w0)}  {''.ljust(w1)}  {net.num_parameters():>9,d}")


def cmd_grid(args):
    build = build_pool_grid if args.pool else build_conv_grid
    grid = build(args.height, 2 * args.height)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["out_row", "out_col", "tap_index", "src_row", "src_col"])
        for i, j, t, r, c in grid_rows(grid):
            w.writerow([i, j, t, repr(r), repr(c)])
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_ablation(args):
    base = _train_config(args)
    train_seqs = load_dataset(_dir(args.data, "dataset"), base.height, base.width)
    test_seqs = load_dataset(_dir(args.test, "dataset"), base.height, base.width)
    results, table = run_ablation(base, train_seqs, test_seqs, out_dir=args.out)
    if args.out:
        out = Path(args.out)
        (out / "ablation.json").write_text(json.dumps({k: r.to_dict() for k, r in results.items()}, indent=2) + "\n")
        (out / "ablation.txt").write_text(table + "\n")
    print(table)


def build_parser():
    p = _Parser(prog="spheregan", description="Spherical-convolution GAN for 360° video saliency.")
    p.add_argument("--threads", type=int, default=None, help="BLAS worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=4)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def config_args(sp):
        sp.add_argument("--config", help="JSON config with dotted keys (e.g. 'train.lr_gen')")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    s = sub.add_parser("train", help="train a generator/discriminator pair")
    config_args(s)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--resume", metavar="CHECKPOINT")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate with ground truth at t-k")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--dump-maps")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eval-feedback", help="autoregressive evaluation, ground truth every N frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", required=True, help="interval, list '1,5,10' or range '1..10'")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_feedback)

    s = sub.add_parser("metrics", help="score externally produced maps")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--fixations", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("describe", help="print layer and parameter tables")
    config_args(s)
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("grid", help="dump a sampling grid as CSV")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--pool", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("ablation", help="train and compare the five generator-loss combinations")
    config_args(s)
    s.add_argument("--data", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablation)
    return p


def _run(args):
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args)
    else:
        args.func(args)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        _run(args)
        return EXIT_OK
    except CliError as e:
        code, name, msg = e.code, e.name, str(e)
    except (ConfigError, GeometryError) as e:
        code, name, msg = EXIT_CONFIG, "config", str(e)
    except (DataError, EmptyReportError, DegenerateInputError) as e:
        code, name, msg = EXIT_DATA, "data", str(e)
    except FileNotFoundError as e:
        code, name, msg = EXIT_PATH, "unreadable_path", str(e)
    except TrainingDivergedError as e:
        code, name, msg = EXIT_DIVERGED, "diverged", str(e)
    except Exception as e:  # noqa: BLE001 - top-level guard
        code, name, msg = EXIT_INTERNAL, "internal", f"{type(e).__name__}: {e}"
    print(f"error code={name} message={json.dumps(' '.join(msg.split()))}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
