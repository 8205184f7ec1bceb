"""CLI commands for simtrain."""

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from app.config import get_settings, load_grid, load_run_config, resolve_config
from app.models import get_session_factory
from app.services.architectures import MODEL_KINDS
from app.services.comparison import run_comparison
from app.services.dataset import (
    Dataset,
    load_csv,
    load_schema,
    read_dataset,
    read_manifest,
    resample_dataset,
    write_dataset,
)
from app.services.grid_search import grid_search
from app.services.manifest import MANIFEST_FILE, RunManifest
from app.services.plants import make_synthetic_benchmark, registered_plants
from app.services.simulation import (
    EVALUATION_MODES,
    SimulationModel,
    evaluate,
    write_report,
)
from app.services.training import STRATEGIES, TrainingDivergedError, train
from pydantic import ValidationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def strategy_name(value: str) -> str:
    """Accept both ``series-parallel`` and ``series_parallel``."""
    normalized = value.replace("-", "_")
    if normalized not in STRATEGIES:
        raise argparse.ArgumentTypeError(
            f"invalid strategy '{value}' (choose from series-parallel, parallel)"
        )
    return normalized


def arch_list(value: str) -> List[str]:
    archs = [arch.strip() for arch in value.split(",") if arch.strip()]
    invalid = [arch for arch in archs if arch not in MODEL_KINDS]
    if not archs or invalid:
        raise argparse.ArgumentTypeError(
            f"invalid architectures {invalid or value!r} "
            f"(choose from {', '.join(MODEL_KINDS)})"
        )
    return archs


def _output_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    return get_settings().output_root / args.command


def _safe_name(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", value)


def cmd_generate(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Generate a synthetic benchmark dataset from a registered plant."""
    out = _output_dir(args)
    train_data, test_data = make_synthetic_benchmark(
        args.plant,
        n_train_traj=args.n_train,
        train_len=args.train_len,
        n_test_traj=args.n_test,
        test_len=args.test_len,
        seed=args.seed,
    )
    path = write_dataset(
        out,
        [train_data, test_data],
        name=args.plant,
        extra={"plant": args.plant, "seed": args.seed},
    )
    manifest.seed = args.seed
    manifest.artifacts["dataset"] = str(path)
    return EXIT_OK


def cmd_import(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Convert external CSV files into a dataset directory."""
    schema = load_schema(args.schema)
    datasets = []
    for role, files in (("train", args.train), ("test", args.test)):
        if not files:
            continue
        role_schema = schema.model_copy(update={"role": role})
        trajectories = []
        for file in files:
            trajectories.extend(load_csv(file, role_schema))
        dataset = Dataset(
            trajectories=tuple(trajectories),
            role=role,
            input_names=tuple(schema.input_names),
            output_names=tuple(schema.output_names),
            units=dict(schema.units),
        )
        if args.resample:
            dataset = resample_dataset(dataset, args.resample)
        datasets.append(dataset)
    if not datasets:
        logger.error("Nothing to import: pass --train and/or --test files")
        return EXIT_CONFIG
    path = write_dataset(
        _output_dir(args),
        datasets,
        name=args.name or Path(args.schema).stem,
        extra={"resampled_to": args.resample} if args.resample else None,
    )
    manifest.config = {"schema": schema.model_dump(), "resample": args.resample}
    manifest.artifacts["dataset"] = str(path)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Train one architecture with one strategy."""
    dataset = read_dataset(args.data, "train")
    try:
        spec, config = resolve_config(
            dataset.input_dim,
            dataset.output_dim,
            load_run_config(args.config) if args.config else None,
            model_flags={
                "kind": args.arch,
                "hidden_sizes": args.hidden,
                "window_length": args.window,
                "dropout_p": args.dropout,
            },
            training_flags={
                "strategy": args.strategy,
                "unroll_length": args.unroll,
                "warmup_steps": args.warmup,
                "max_epochs": args.epochs,
                "learning_rate": args.lr,
                "batch_size": args.batch_size,
                "patience": args.patience,
                "seed": args.seed,
            },
        )
    except (ValidationError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    out = _output_dir(args)
    manifest.config = {"model": spec.model_dump(), "training": config.model_dump(mode="json")}
    manifest.seed = config.seed
    try:
        result = train(spec, dataset, config)
    except TrainingDivergedError as e:
        logger.error(f"Training failed: {e}")
        manifest.artifacts["record"] = str(e.record.write_csv(out / "record.csv"))
        return EXIT_FAILED

    dataset_name = read_manifest(args.data).get("name", Path(args.data).name)
    checkpoint = result.model.save(
        out / "checkpoint.npz",
        {"strategy": config.strategy, "dataset": dataset_name, "seed": config.seed},
    )
    manifest.artifacts["checkpoint"] = str(checkpoint)
    manifest.artifacts["record"] = str(result.record.write_csv(out / "record.csv"))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Free-run a checkpoint on a dataset and report NRMSE."""
    model = SimulationModel.load(args.checkpoint)
    dataset = read_dataset(args.data, args.role)
    summary = evaluate(model, dataset, args.mode, args.workers)

    out = _output_dir(args)
    label = args.label or read_manifest(args.data).get("name", Path(args.data).name)
    report = write_report(
        [
            {
                "dataset": label,
                "arch": model.spec.kind,
                "strategy": model.metadata.get("strategy", "unknown"),
                "nrmse": summary.nrmse,
                "mode": summary.mode,
                "horizon": summary.horizon,
            }
        ],
        out / "report.csv",
    )
    for result in summary.results:
        result.write_csv(
            out / "series" / f"{_safe_name(result.trajectory_id)}.csv",
            dataset.input_names,
            dataset.output_names,
        )
    manifest.artifacts["report"] = str(report)
    manifest.artifacts["series"] = str(out / "series")
    logger.info(f"{model.spec.kind} {summary.mode} NRMSE: {summary.nrmse:.4f}")
    return EXIT_OK


def cmd_gridsearch(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Run every combination of a grid file and write the ranked table."""
    try:
        grid = load_grid(args.grid_file)
    except (ValidationError, ValueError) as e:
        logger.error(f"Invalid grid file: {e}")
        return EXIT_CONFIG
    dataset = read_dataset(args.data, "train")
    out = _output_dir(args)
    settings = get_settings()
    manifest.config = grid.model_dump()
    manifest.seed = grid.seed

    result = grid_search(
        grid.spec_grid,
        grid.training,
        dataset,
        grid.budget,
        base_seed=grid.seed,
        base_model=grid.base_model,
        base_training=grid.base_training,
        jobs=args.jobs,
        output_dir=out / "jobs",
        session_factory=get_session_factory(settings.database_url),
        name=grid.name,
        dataset_label=str(args.data),
    )
    manifest.artifacts["ranked"] = str(result.write_csv(out / "ranked.csv"))
    manifest.artifacts["jobs"] = str(out / "jobs")

    if result.failures:
        logger.warning(f"{len(result.failures)} of {len(result.ranked)} grid jobs failed")
        return EXIT_OK if args.allow_partial else EXIT_FAILED
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Train each architecture under both strategies and compare free-run NRMSE."""
    train_data = read_dataset(args.data, "train")
    test_data = read_dataset(args.data, "test")
    label = args.label or read_manifest(args.data).get("name", Path(args.data).name)
    report = run_comparison(
        train_data,
        test_data,
        args.archs,
        seeds=args.seeds,
        budget=args.budget,
        mode=args.mode,
        dataset_label=label,
    )
    paths = report.write(_output_dir(args))
    wins = report.parallel_wins()
    manifest.config = {"archs": args.archs, "budget": args.budget, "mode": args.mode}
    manifest.seed = args.seeds[0]
    manifest.artifacts.update({name: str(path) for name, path in paths.items()})
    logger.info(
        f"Parallel strategy won {wins['parallel_wins']} of {wins['comparisons']} comparisons"
    )
    logger.info(f"\n{report.matrix().to_string(index=False)}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, manifest: Optional[RunManifest] = None) -> int:
    """Re-run the command recorded in a manifest, optionally into a new --out."""
    recorded = RunManifest.load(args.manifest)
    argv = list(recorded.argv)
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv.extend(["--out", args.out])
    logger.info(f"Replaying: {' '.join(argv)}")
    return main(argv)


COMMANDS = {
    "generate": cmd_generate,
    "import": cmd_import,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.cli",
        description="Train and compare series-parallel and parallel system-identification models.",
    )
    parser.add_argument("--log-level", default=None, help="Overrides SIMTRAIN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="Generate a synthetic benchmark dataset")
    generate.add_argument("--plant", default="valve", help=f"One of {registered_plants()}")
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out")
    generate.add_argument("--n-train", type=int, default=60)
    generate.add_argument("--train-len", type=int, default=200)
    generate.add_argument("--n-test", type=int, default=10)
    generate.add_argument("--test-len", type=int, default=1000)

    importer = sub.add_parser("import", help="Convert CSV files into a dataset directory")
    importer.add_argument("--schema", required=True, help="Schema YAML describing the columns")
    importer.add_argument("--train", nargs="*", default=[], help="Training CSV files")
    importer.add_argument("--test", nargs="*", default=[], help="Test CSV files")
    importer.add_argument("--resample", type=float, default=None, help="New sampling time")
    importer.add_argument("--name", default=None)
    importer.add_argument("--out")

    trainer = sub.add_parser("train", help="Train one model")
    trainer.add_argument("--data", required=True)
    trainer.add_argument("--arch", required=True, choices=MODEL_KINDS)
    trainer.add_argument("--strategy", required=True, type=strategy_name)
    trainer.add_argument("--config", default=None, help="YAML with model/training sections")
    trainer.add_argument("--out")
    trainer.add_argument("--epochs", type=int, default=None)
    trainer.add_argument("--unroll", type=int, default=None)
    trainer.add_argument("--warmup", type=int, default=None)
    trainer.add_argument("--lr", type=float, default=None)
    trainer.add_argument("--batch-size", type=int, default=None)
    trainer.add_argument("--patience", type=int, default=None)
    trainer.add_argument("--hidden", type=int, nargs="+", default=None)
    trainer.add_argument("--window", type=int, default=None)
    trainer.add_argument("--dropout", type=float, default=None)
    trainer.add_argument("--seed", type=int, default=None)

    evaluator = sub.add_parser("evaluate", help="Free-run a checkpoint and report NRMSE")
    evaluator.add_argument("--checkpoint", required=True)
    evaluator.add_argument("--data", required=True)
    evaluator.add_argument("--mode", choices=EVALUATION_MODES, default="per-trajectory")
    evaluator.add_argument("--role", choices=("train", "test"), default="test")
    evaluator.add_argument("--label", default=None, help="Dataset label in the report")
    evaluator.add_argument("--workers", type=int, default=1, help="Threads for per-trajectory runs")
    evaluator.add_argument("--out")

    grid = sub.add_parser("gridsearch", help="Run a hyperparameter grid")
    grid.add_argument("--grid-file", required=True)
    grid.add_argument("--data", required=True)
    grid.add_argument("--jobs", type=int, default=1)
    grid.add_argument("--allow-partial", action="store_true")
    grid.add_argument("--out")

    compare = sub.add_parser("compare", help="Compare both strategies per architecture")
    compare.add_argument("--data", required=True)
    compare.add_argument("--archs", type=arch_list, default=list(MODEL_KINDS))
    compare.add_argument("--seeds", type=int, nargs="+", default=[0])
    compare.add_argument("--budget", type=int, default=30, help="Epochs per run")
    compare.add_argument("--mode", choices=EVALUATION_MODES, default="per-trajectory")
    compare.add_argument("--label", default=None)
    compare.add_argument("--out")

    replay = sub.add_parser("replay", help="Re-run the command recorded in a manifest")
    replay.add_argument("manifest")
    replay.add_argument("--out", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    if args.command == "replay":
        return cmd_replay(args)
    if getattr(args, "jobs", 1) < 1:
        logger.error("--jobs must be at least 1")
        return EXIT_CONFIG
    if getattr(args, "workers", 1) < 1:
        logger.error("--workers must be at least 1")
        return EXIT_CONFIG

    manifest = RunManifest(command=args.command, argv=argv)
    out = _output_dir(args)
    try:
        exit_code = COMMANDS[args.command](args, manifest)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        exit_code = EXIT_FAILED
    manifest.finish("ok" if exit_code == EXIT_OK else "failed")
    if exit_code != EXIT_CONFIG:
        manifest.write(out, MANIFEST_FILE)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
