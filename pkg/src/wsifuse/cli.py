"""Command-line entry point: ``wsifuse <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import IoError, IoFailure, ValidationError
from .experts import ExpertHyper, load_expert, save_expert
from .fusion import BranchSpec, WeigherHyper, load_weight_model, save_weight_model, train_weigher
from .pyramid import Quality, QualityThresholds, assess_pyramid, build_tpyramid
from .slide_io import read_annotation, read_slide, write_annotation, write_slide
from .synth import SynthSpec, format_synth_spec, make_synthetic_slide, read_synth_spec, write_labels

log = logging.getLogger("wsifuse")


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else (args.config_obj.out or "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"{out}: {exc}") from exc
    return out


def _sources(args, config: pl.PipelineConfig) -> list:
    if len(args.slide) != len(args.annotation):
        raise ValidationError(f"{len(args.slide)} --slide but {len(args.annotation)} --annotation arguments")
    return [
        pl.labeled_source(read_slide(s), read_annotation(a), config.depth, config.thresholds)
        for s, a in zip(args.slide, args.annotation)
    ]


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    spec = read_synth_spec(args.spec) if args.spec else SynthSpec()
    overrides = {k: v for k, v in (("size", args.size), ("levels", args.levels), ("tile", args.tile)) if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = replace(spec, **overrides)
    result = make_synthetic_slide(spec)
    out = _out_dir(args)
    write_slide(result.slide, out / "slide")
    write_annotation(result.annotation, out / "annotation.txt")
    write_labels(result.labels, out / "labels.txt")
    (out / "spec.txt").write_text(format_synth_spec(spec), encoding="ascii")
    print(f"wrote {out / 'slide'} ({spec.size}x{spec.size}, {spec.levels} levels, {len(result.annotation.regions)} regions)")


def cmd_pyramid(args) -> None:
    config = args.config_obj
    slide = read_slide(args.slide_dir)
    pyramid = build_tpyramid(slide, config.depth)
    assess_pyramid(slide, pyramid, config.thresholds)
    lines = ["depth\tgx\tgy\tx\ty\tw\th\tquality\ttissue"]
    for quad in pyramid:
        x, y, w, h = quad.rect
        lines.append(f"{quad.depth}\t{quad.grid_x}\t{quad.grid_y}\t{x!r}\t{y!r}\t{w!r}\t{h!r}\t{quad.quality.value}\t{quad.tissue_fraction!r}")
    out = _out_dir(args) / "pyramid.tsv"
    out.write_text("\n".join(lines) + "\n", encoding="ascii")
    tissue = sum(q.quality == Quality.TISSUE for q in pyramid.leaves)
    print(f"{len(pyramid)} quads, {tissue}/{len(pyramid.leaves)} tissue leaves -> {out}")


def cmd_train_expert(args) -> None:
    config = args.config_obj
    sources = _sources(args, config)
    hyper = ExpertHyper(args.lr, args.batch_size, args.epochs, args.steps, config.seed)
    if args.kind == "binary":
        expert = pl.train_binary_expert(sources, hyper, args.bins)
    else:
        expert = pl.train_multiclass_expert(sources, hyper, args.depths, args.bins)
    path = _out_dir(args) / f"{args.kind}_expert.txt"
    save_expert(expert, path)
    print(f"final training loss {expert.loss_history[-1]:.6f} -> {path}" if expert.loss_history else f"-> {path}")


def cmd_train_weigher(args) -> None:
    config = args.config_obj
    if not config.multiclass_expert:
        raise ValidationError("train-weigher needs multiclass_expert in the config")
    multi = load_expert(config.multiclass_expert)
    spec = BranchSpec(tuple(args.widths), 3, args.input_size)
    spec.validate()
    data = pl.weigher_dataset(_sources(args, config), multi, spec.input_size)
    hyper = WeigherHyper(args.lr, args.batch_size, args.epochs, args.patience, args.val_fraction, config.seed, args.optimizer)
    model, record = train_weigher(data, hyper, spec)
    path = _out_dir(args) / "weigher.txt"
    save_weight_model(model, path)
    lines = ["epoch\ttrain_loss\tval_loss"]
    for i, t in enumerate(record.train_loss):
        v = record.val_loss[i] if i < len(record.val_loss) else float("nan")
        lines.append(f"{i}\t{t!r}\t{v!r}")
    (path.parent / "weigher_history.tsv").write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"{len(data)} samples, best epoch {record.best_epoch} -> {path}")


def _experts(config: pl.PipelineConfig) -> pl.ExpertSet:
    missing = [k for k in config.required_checkpoints() if not getattr(config, k)]
    if missing:
        raise ValidationError(f"strategy {config.strategy} needs {', '.join(missing)} in the config")
    return pl.ExpertSet(
        load_expert(config.multiclass_expert),
        load_expert(config.binary_expert) if config.gated else None,
        load_weight_model(config.weigher) if config.strategy == "weighing_pipeline" else None,
    )


def cmd_analyze(args) -> None:
    config = args.config_obj
    if args.strategy:
        config = replace(config, strategy=args.strategy)
        config.validate()
    result = pl.analyze_slide(read_slide(args.slide_dir), config, _experts(config))
    out = _out_dir(args)
    log_path = out / f"{config.strategy}.log"
    pl.write_log(result.log, log_path)
    pl.write_maps(result.log, out / config.strategy)
    analyzed = sum(r.analyzed for r in result.log.records)
    print(f"{analyzed} leaves analyzed -> {log_path}")


def cmd_evaluate(args) -> None:
    logs = [pl.read_log(p) for p in args.logs]
    report = pl.evaluate_slide(logs, read_annotation(args.annotation))
    path = _out_dir(args) / "report.tsv"
    pl.write_report(report, path)
    sys.stdout.write(pl.format_report(report))


def cmd_render(args) -> None:
    bpath, mpath = pl.write_maps(pl.read_log(args.log), _out_dir(args))
    print(f"-> {bpath}, {mpath}")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--config", default=None, help="pipeline config file (key value lines)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wsifuse", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic slide and annotation")
    p.add_argument("--spec", help="synthetic spec file")
    p.add_argument("--size", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--tile", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pyramid", parents=[common], help="build a T-pyramid and tabulate quads")
    p.add_argument("slide_dir")
    p.set_defaults(func=cmd_pyramid)

    def training_inputs(p):
        p.add_argument("--slide", action="append", default=[], required=True, help="slide directory (repeatable)")
        p.add_argument("--annotation", action="append", default=[], required=True, help="annotation file, paired with --slide")

    p = sub.add_parser("train-expert", parents=[common], help="train a binary or multi-class feature expert")
    training_inputs(p)
    p.add_argument("--kind", choices=("binary", "multiclass"), required=True)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=30)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps", type=int, default=50, help="batches per epoch")
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--depths", type=int, nargs="+", help="quad depths for the multi-class expert")
    p.set_defaults(func=cmd_train_expert)

    p = sub.add_parser("train-weigher", parents=[common], help="train the level-weight model")
    training_inputs(p)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--widths", type=int, nargs="+", default=list(BranchSpec().widths))
    p.add_argument("--input-size", type=int, default=BranchSpec().input_size)
    p.set_defaults(func=cmd_train_weigher)

    p = sub.add_parser("analyze", parents=[common], help="run the analysis pipeline on a slide")
    p.add_argument("slide_dir")
    p.add_argument("--strategy", choices=pl.STRATEGIES)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("evaluate", parents=[common], help="score analysis logs against an annotation")
    p.add_argument("annotation")
    p.add_argument("logs", nargs="+")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common], help="render maps from an analysis log")
    p.add_argument("log")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = pl.read_config(args.config) if args.config else pl.PipelineConfig()
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        args.config_obj = config
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IoError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
