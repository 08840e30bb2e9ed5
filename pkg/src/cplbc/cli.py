"""Command line: gen | train | eval | compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .autograd import ShapeError
from .curriculum import ScheduleSpec
from .experiment import load_weights, run_matrix, run_one, worker_count
from .metrics import evaluate
from .report import (markdown_table, per_seed_csv, plot_pr_svg, plot_schedule_svg, write_json)
from .scenes import PRESETS, generate_dataset, load_dataset, preset_config, save_datasets
from .strategies import STRATEGIES, Hyper, TrainingDiverged

log = logging.getLogger("cplbc")

HYPER_FLAGS = {
    # flag: (field, type, help)
    "--T0": ("T0", int, "prior-stage epochs"),
    "--T1": ("T1", int, "strategy-stage epochs"),
    "--lr": ("lr", float, "initial Adam learning rate"),
    "--lr-decay": ("lr_decay", float, "learning-rate factor per epoch"),
    "--batch-size": ("batch_size", int, "scenes per batch"),
    "--alpha": ("alpha", float, "weight of the CIoU term"),
    "--n-fixed": ("n_fixed", float, "loss normaliser for images without objects"),
    "--xi0": ("xi0", float, "initial confidence threshold"),
    "--e1": ("e1", float, "progress where the threshold starts to fall"),
    "--e2": ("e2", float, "progress where the threshold reaches 0"),
    "--m": ("m", int, "root of the confidence minimizer"),
    "--es-threshold": ("es_threshold", float, "difficulty cutoff for easy samples"),
    "--conf-agg": ("conf_agg", str, "per-object confidence aggregation (max|mean)"),
    "--q-start": ("q_start", float, "initial loss quantile for loss-based SPL"),
    "--q-end": ("q_end", float, "final loss quantile for loss-based SPL"),
    "--poly-t": ("poly_t", float, "order of the polynomial regularizer"),
    "--init-std": ("init_std", float, "stddev of the Gaussian weight init"),
    "--conf-threshold": ("conf_threshold", float, "decode confidence threshold"),
    "--nms-iou": ("nms_iou", float, "NMS IoU threshold"),
}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _add_hyper(p: argparse.ArgumentParser) -> None:
    d = Hyper()
    g = p.add_argument_group("training hyperparameters")
    for flag, (name, typ, help_) in HYPER_FLAGS.items():
        g.add_argument(flag, dest=name, type=typ, default=getattr(d, name), help=help_)


def _hyper(args) -> Hyper:
    return Hyper(**{name: getattr(args, name) for name, *_ in HYPER_FLAGS.values()})


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cplbc", allow_abbrev=False,
                                description="Curriculum strategies for a tiny one-category detector.")
    p.add_argument("--quiet", action="store_true", help="do not print the resolved settings")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset", allow_abbrev=False)
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--scenes", type=int, default=800, help="training scenes")
    g.add_argument("--test-scenes", type=int, default=200, help="test scenes (0 for none)")
    g.add_argument("--seed", type=int, default=0, help="base seed shared by both splits")
    g.add_argument("--preset", default="hard-mix", help=f"one of {sorted(PRESETS)}")
    g.add_argument("--stack-frames", action="store_true", help="stack 3 shifted frames as channels")

    t = sub.add_parser("train", help="train one strategy", allow_abbrev=False)
    t.add_argument("--data", required=True, help="dataset directory from gen")
    t.add_argument("--strategy", default="cpl-bc", choices=STRATEGIES)
    t.add_argument("--prior", default="esp", choices=("esp", "asp"), help="ignored by as/es")
    t.add_argument("--weight-source", default="fresh", choices=("fresh", "cached"))
    t.add_argument("--seed", type=int, default=0, help="run seed (derives init and order seeds)")
    t.add_argument("--out", required=True, help="run directory")
    _add_hyper(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint", allow_abbrev=False)
    e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    e.add_argument("--model", default="f", choices=("f", "g"), help="model of a run directory")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test")
    e.add_argument("--conf-threshold", type=float, default=Hyper.conf_threshold)
    e.add_argument("--nms-iou", type=float, default=Hyper.nms_iou)
    e.add_argument("--out", help="write the EvalResult JSON here (default: stdout only)")
    e.add_argument("--curves", action="store_true", help="include PR curves in the JSON")
    e.add_argument("--plot", help="write PR curves as SVG to this path")

    c = sub.add_parser("compare", help="run a strategy x seed matrix", allow_abbrev=False)
    c.add_argument("--data", required=True, help="dataset directory with train and test splits")
    c.add_argument("--strategies", default="as,es,cpl-bc/esp,cpl-bc/asp",
                   help="comma list; curriculum strategies take /esp or /asp")
    c.add_argument("--seeds", type=_int_list, default=[0, 1], help="comma list of run seeds")
    c.add_argument("--weight-source", default="fresh", choices=("fresh", "cached"))
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--plot", action="store_true", help="write the threshold schedule as SVG")
    _add_hyper(c)
    return p


def _print_settings(args) -> None:
    settings = {k: v for k, v in vars(args).items() if k != "quiet"}
    if args.command == "compare":
        settings["CPL_THREADS"] = worker_count()
    print("settings: " + json.dumps(settings, sort_keys=True, default=str), file=sys.stderr)


def cmd_gen(args) -> int:
    cfg = preset_config(args.preset, seed=args.seed, stack_frames=args.stack_frames)
    if args.scenes <= 0:
        raise CliError("bad-flag", "--scenes must be > 0")
    splits = [generate_dataset(cfg, args.scenes, args.seed, "train")]
    if args.test_scenes > 0:
        splits.append(generate_dataset(cfg, args.test_scenes, args.seed, "test"))
    try:
        manifest = save_datasets(args.out, splits, cfg)
    except OSError as exc:
        raise CliError("unwritable", f"cannot write dataset to {args.out}: {exc}") from exc
    print(json.dumps({"manifest": str(manifest), "checksum": ckpt.file_checksum(manifest)}))
    return 0


def _load(data: str, split: str):
    try:
        return load_dataset(data, split)
    except (FileNotFoundError, KeyError) as exc:
        raise CliError("missing-data", str(exc)) from exc


def cmd_train(args) -> int:
    hyper = _hyper(args)
    train = _load(args.data, "train")
    test = load_dataset(args.data, "test") if (Path(args.data) / "test").exists() else None
    label = args.strategy if args.strategy in ("as", "es") else f"{args.strategy}/{args.prior}"
    try:
        res = run_one(label, args.seed, train, test, hyper, args.out, args.weight_source)
    except TrainingDiverged as exc:
        diag = {"error": "diverged", **exc.diagnostic}
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(diag, Path(args.out) / "diagnostic.json")
        print(json.dumps(diag), file=sys.stderr)
        return 3
    print(json.dumps({"out": args.out, "metrics": res.metrics, "checkpoints": res.checkpoints}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / f"model_{args.model}.ckpt"
    if not path.exists():
        raise CliError("missing-checkpoint", f"no checkpoint at {path}")
    ds = _load(args.data, args.split)
    c_in = ds.scenes[0].image.shape[0]
    try:
        weights, meta = load_weights(path, c_in)
    except ckpt.CheckpointError as exc:
        raise CliError(exc.kind.replace(" ", "-"), str(exc)) from exc
    except (ShapeError, ValueError) as exc:
        raise CliError("architecture-mismatch", str(exc)) from exc
    ev = evaluate(weights, ds, args.conf_threshold, args.nms_iou)
    body = ev.to_dict(curves=args.curves)
    body["checkpoint"] = str(path)
    body["split"] = args.split
    text = json.dumps(body, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    if args.plot:
        plot_pr_svg({f"IoU {k:.2f}": v for k, v in ev.curves.items() if k in (0.5, 0.75)}, args.plot)
    print(text)
    return 0


def cmd_compare(args) -> int:
    hyper = _hyper(args)
    train = _load(args.data, "train")
    test = _load(args.data, "test")
    labels = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for label in labels:
        if label.partition("/")[0] not in STRATEGIES:
            raise CliError("bad-flag", f"unknown strategy {label!r}")
    out = Path(args.out)
    reports = run_matrix(labels, args.seeds, train, test, hyper, out, args.weight_source)
    write_json({"reports": [r.to_dict() for r in reports]}, out / "comparison.json")
    (out / "per_seed.csv").write_text(per_seed_csv(reports))
    table = markdown_table(reports)
    (out / "table.md").write_text(table)
    if args.plot:
        plot_schedule_svg(ScheduleSpec(hyper.xi0, hyper.e1, hyper.e2), out / "schedule.svg")
    print(table)
    failed = [(r.strategy, r.prior, s.seed) for r in reports for s in r.seeds if not s.ok]
    if failed:
        print(json.dumps({"failed_runs": failed}), file=sys.stderr)
        return 1
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.quiet:
        _print_settings(args)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(json.dumps({"error": "invalid", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
