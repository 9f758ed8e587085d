"""
Command line for the benchmark harness.

    python -m app.cli train --model sm-rnn --dataset spatial --runs 3 --train-size 8000 --test-size 2000
    python -m app.cli params --model lstm --dataset temporal
    python -m app.cli gradcheck --model sm-rnn --dataset spatial
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from app.core.config import get_settings
from app.schemas.models import (
    DatasetKind,
    ExperimentConfig,
    IntervalMethod,
    ModelKind,
    TrainConfig,
)
from app.services.baselines import TOPOLOGIES
from app.services.bench import (
    ExperimentError,
    default_train_size,
    gradient_report,
    report_params,
    run_experiment,
)
from app.services.data import (
    DatasetError,
    adapt_stroke_corpus,
    generate_synthetic_images,
    generate_synthetic_strokes,
    write_idx_images,
    write_idx_labels,
    write_strokes,
)
from app.services.nn import ModelConfigError

logger = logging.getLogger(__name__)

PAIRINGS = [(ModelKind.SM_RNN, DatasetKind.SPATIAL), (ModelKind.SM_RNN, DatasetKind.TEMPORAL), *TOPOLOGIES]


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="stigmark", description="Stigmergic memory RNN benchmarks")
    parser.add_argument("--log-level", default=settings.log_level, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Run a multi-run experiment and write its report")
    train.add_argument("--model", type=ModelKind, default=ModelKind.SM_RNN)
    train.add_argument("--dataset", type=DatasetKind, default=DatasetKind.SPATIAL)
    train.add_argument("--epochs", type=int, default=settings.default_epochs)
    train.add_argument("--batch", type=int, default=settings.default_batch_size)
    train.add_argument("--full-batch", action="store_true", help="One batch per length bucket")
    train.add_argument("--runs", type=int, default=settings.default_runs)
    train.add_argument("--seed", type=int, default=settings.default_seed)
    train.add_argument("--train-size", type=int, default=None)
    train.add_argument("--test-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=settings.default_lr)
    train.add_argument("--clip-norm", type=float, default=None)
    train.add_argument("--eval-every", type=int, default=10)
    train.add_argument("--interval", type=IntervalMethod, default=IntervalMethod.STUDENT_T)
    train.add_argument("--workers", type=int, default=settings.max_workers)
    train.add_argument("--synthetic", type=int, default=None, help="Use a generated corpus of this size")
    train.add_argument("--out", type=Path, default=None, help="Report JSON path (curves are written next to it)")

    params = commands.add_parser("params", help="Itemized parameter count")
    params.add_argument("--model", type=ModelKind, default=None)
    params.add_argument("--dataset", type=DatasetKind, default=None)

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference check of a full unrolled loss")
    gradcheck.add_argument("--model", type=ModelKind, default=ModelKind.SM_RNN)
    gradcheck.add_argument("--dataset", type=DatasetKind, default=DatasetKind.SPATIAL)
    gradcheck.add_argument("--seed", type=int, default=settings.default_seed)
    gradcheck.add_argument("--tolerance", type=float, default=settings.gradcheck_tolerance)

    synth = commands.add_parser("synth", help="Write a synthetic corpus to disk")
    synth.add_argument("--dataset", type=DatasetKind, default=DatasetKind.SPATIAL)
    synth.add_argument("--count", type=int, default=1000)
    synth.add_argument("--seed", type=int, default=settings.default_seed)
    synth.add_argument("--out", type=Path, default=None,
                       help="Target directory (defaults to the configured mnist/strokes directory)")

    convert = commands.add_parser("convert-strokes", help="Adapt the published stroke corpus layout")
    convert.add_argument("--source", type=Path, required=True)
    convert.add_argument("--out", type=Path, default=settings.strokes_dir)

    serve = commands.add_parser("serve", help="Start the HTTP surface")
    serve.add_argument("--host", default=settings.host)
    serve.add_argument("--port", type=int, default=settings.port)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig(
        model=args.model,
        dataset=args.dataset,
        runs=args.runs,
        train=TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch,
            full_batch=args.full_batch,
            lr=args.lr,
            clip_norm=args.clip_norm,
            seed=args.seed,
            eval_every=args.eval_every,
        ),
        train_size=args.train_size,
        test_size=args.test_size,
        synthetic=args.synthetic,
        interval=args.interval,
        workers=args.workers,
        out=args.out,
    )
    report = run_experiment(cfg)
    if report.mean is None:
        print(f"{report.model.value} / {report.dataset.value}: every run failed")
        return 1
    interval = f" ± {report.half_width:.4f}" if report.half_width is not None else ""
    print(f"{report.model.value} / {report.dataset.value}: "
          f"{report.parameter_count:,} parameters, rate {report.mean:.4f}{interval} "
          f"over {len(report.rates)} runs")
    if report.failed_runs:
        print(f"failed runs: {report.failed_runs}")
    for row in report.literature:
        print(f"  [{row.source}] {row.model:<9} {row.complexity:>7,}  {row.rate:.4f} ± {row.half_width:.4f}")
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    pairings = [
        (kind, dataset) for kind, dataset in PAIRINGS
        if (args.model is None or kind == args.model) and (args.dataset is None or dataset == args.dataset)
    ]
    if not pairings:
        raise ModelConfigError(f"{args.model.value} does not pair with the {args.dataset.value} dataset")
    for kind, dataset in pairings:
        report = report_params(kind, dataset)
        print(f"{kind.value} / {dataset.value}")
        for term in report.terms:
            print(f"  {term.label:<24} {term.render()}")
        print(f"  {report.expression}")
        if report.published_total is not None:
            print(f"  published complexity: {report.published_total:,}")
        if report.note:
            print(f"  note: {report.note}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradient_report(args.model, args.dataset, seed=args.seed)
    print(f"{args.model.value} / {args.dataset.value}: max relative error {report.max_rel_error:.3e} "
          f"({report.checked} coordinates, {report.skipped_kinks} kinks skipped, worst {report.worst})")
    if report.checked == 0:
        logger.error("No coordinate was checked")
        return 1
    if report.max_rel_error > args.tolerance:
        logger.error(f"Gradient check failed: {report.max_rel_error:.3e} > {args.tolerance:.1e}")
        return 1
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    settings = get_settings()
    if args.dataset == DatasetKind.SPATIAL:
        out = args.out or settings.mnist_dir
        out.mkdir(parents=True, exist_ok=True)
        images, labels = generate_synthetic_images(args.count, seed=args.seed)
        n_train = default_train_size(args.count)
        write_idx_images(out / "train-images-idx3-ubyte", images[:n_train])
        write_idx_labels(out / "train-labels-idx1-ubyte", labels[:n_train])
        write_idx_images(out / "t10k-images-idx3-ubyte", images[n_train:])
        write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[n_train:])
    else:
        out = args.out or settings.strokes_dir
        digits, labels = generate_synthetic_strokes(args.count, seed=args.seed)
        write_strokes(out / "samples", digits, labels, labels_path=out / "labels.txt")
    print(f"wrote {args.count} synthetic {args.dataset.value} samples to {out}")
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    count = adapt_stroke_corpus(args.source, args.out)
    print(f"converted {count} stroke sequences into {args.out}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "train": cmd_train,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "convert-strokes": cmd_convert,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except (ExperimentError, DatasetError, ModelConfigError, ValidationError, FileNotFoundError) as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
