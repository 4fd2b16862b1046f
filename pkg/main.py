import argparse
import json
import logging
import signal
import sys
from typing import List, Optional, Sequence

from config import TOOL_VERSION, ExperimentConfig, load_experiment_config, settings
from database import get_db_manager
from datagen import generate_from_spec
from datasets import Dataset, ingest_csv
from errors import ConfigError, DataError, LocalICLError
from experiment_runner import METHODS, ExperimentRunner
from run_registry import RunRegistry

logger = logging.getLogger(__name__)


def _csv_list(text: Optional[str]) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()] if text else []


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in _csv_list(text)]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localicl",
        description="Retrieval-augmented in-context learning for tabular classification",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--output-dir", help="overrides io.output_dir")
        return p

    def data_args(p: argparse.ArgumentParser, many: bool) -> None:
        action = "append" if many else "store"
        p.add_argument("--data", action=action, default=[] if many else None, help="dataset CSV with a header row")
        p.add_argument("--generator", action=action, default=[] if many else None,
                       help="generator spec, e.g. circles:n=1000,pairs=3 or prior:n=4000,seed=1")
        p.add_argument("--label-col", default="label", help="label column name")
        p.add_argument("--cat-cols", default="", help="comma-separated categorical columns")

    command("priorfit", "prior-fit a model from scratch on synthetic tasks")

    p = command("evaluate", "evaluate a checkpoint on datasets over seeded folds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--methods", default=",".join(METHODS), help=f"subset of {','.join(METHODS)}")
    data_args(p, many=True)

    p = command("finetune", "fine-tune a checkpoint on one dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["finetune_local", "finetune_random", "finetune_exact"],
                   help="overrides train.mode")
    data_args(p, many=False)

    p = command("circles", "sweep context size against ring count on concentric circles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", default="1,2,3,4")
    p.add_argument("--ks", default="10,30,100,300,1000")
    p.add_argument("--seeds", type=int, default=25)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.01)

    p = command("report", "aggregate a records CSV and bin datasets by complexity and size")
    p.add_argument("--records", required=True)
    p.add_argument("--datasets", help="dataset summary CSV written by evaluate")
    p.add_argument("--methods", help="restrict the bin analyses to these methods")

    p = command("generate", "write a synthetic dataset as CSV")
    p.add_argument("spec", help="generator spec, e.g. circles:n=1000,pairs=3,noise=0.01,seed=0")
    p.add_argument("--out", help="output CSV path")

    p = command("runs", "list registered runs")
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--filter", dest="only", help="only runs of this command")

    command("config", "print the fully materialized config")
    return parser


def load_datasets(args, config: ExperimentConfig, skip_bad: bool) -> List[Dataset]:
    """Ingest --data files and build --generator datasets; unreadable files are skipped when skip_bad."""
    paths = args.data if isinstance(args.data, list) else [args.data] if args.data else []
    specs = args.generator if isinstance(args.generator, list) else [args.generator] if args.generator else []
    cat_cols = _csv_list(args.cat_cols)
    datasets = []
    for path in paths:
        try:
            datasets.append(ingest_csv(path, args.label_col, cat_cols, c_max=config.model.c_max))
        except DataError as e:
            if not skip_bad:
                raise
            logger.warning(f"Skipping dataset {path}: {e}")
    for spec in specs:
        datasets.append(generate_from_spec(spec, config.prior, config.seed))
    if not datasets and not skip_bad:
        raise ConfigError("no dataset given (use --data or --generator)")
    return datasets


def list_runs(limit: int, only: Optional[str]) -> None:
    manager = get_db_manager()
    session = manager.get_session()
    try:
        runs = RunRegistry(session).get_recent_runs(limit, only)
        if not runs:
            print("No runs registered")
        for run in runs:
            print(f"{run.created_at:%Y-%m-%d %H:%M:%S}  {run.id}  {run.command:<9} {run.status:<9} "
                  f"{run.total_ms / 1000.0:8.1f}s  {run.output_dir}")
            for artifact in run.artifacts:
                print(f"    {artifact.kind:<11} {artifact.sha256[:12]}  {artifact.path}")
    finally:
        manager.close_session(session)


def run_command(args) -> None:
    config = load_experiment_config(args.config)
    runner = ExperimentRunner(config, args.output_dir)

    if args.command == "priorfit":
        runner.priorfit()
    elif args.command == "evaluate":
        datasets = load_datasets(args, config, skip_bad=True)
        runner.evaluate(args.checkpoint, datasets, _csv_list(args.methods))
    elif args.command == "finetune":
        datasets = load_datasets(args, config, skip_bad=False)
        if len(datasets) != 1:
            raise ConfigError("finetune takes exactly one dataset")
        runner.finetune(args.checkpoint, datasets[0], args.mode)
    elif args.command == "circles":
        runner.circles_sweep(args.checkpoint, _int_list(args.pairs), _int_list(args.ks), args.seeds, args.n, args.noise)
    elif args.command == "report":
        runner.report(args.records, args.datasets, _csv_list(args.methods) or None)
    elif args.command == "generate":
        runner.generate(args.spec, args.out)
    elif args.command == "runs":
        list_runs(args.limit, args.only)
    elif args.command == "config":
        print(json.dumps(config.snapshot(), indent=2, sort_keys=True))


def signal_handler(signum, frame):
    """Handle termination like an interrupt so partial runs are reported"""
    logger.info(f"Received signal {signum}, shutting down...")
    raise KeyboardInterrupt


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    )
    args = build_parser().parse_args(argv)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        run_command(args)
    except LocalICLError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
