"""Command-line entry point for the sparse soup service.

Subcommands:
- `pretrain`  train the dense model and store its checkpoint
- `run`       execute the configured method, writing results.csv, run records and checkpoints
- `eval`      evaluate a checkpoint and print its metrics as JSON
- `sweep`     run the sparsity / epochs / hyperparameter grids
- `report`    aggregate result CSVs into report.csv (mean ± std over seeds)

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import ExperimentConfig, config_hash, load_config, parse_config, settings
from .errors import ConfigError, SparseSoupError, exit_code_for
from .merging import recompute_bn
from .nn_core import count_flops, evaluate
from .orchestrator import prepare_data, pretrain, run_experiment
from .pruning import Mask
from .services.checkpoint_store import CheckpointMeta, load_checkpoint, save_checkpoint
from .services.metrics import ood_accuracy, subgroup_recall
from .services.reporting import (
    REPORT_COLUMNS,
    aggregate,
    format_report,
    make_run_id,
    read_rows,
    rows_for_record,
    write_rows,
)
from .services.sweeps import run_sweep

logger = logging.getLogger(__name__)


def _load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Read `--config` and apply the command-line overrides."""
    if args.config is None:
        raise ConfigError("--config is required for this command")
    config = load_config(args.config)
    overrides = {}
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "parallel", None) is not None:
        overrides["parallel"] = args.parallel
    if not overrides:
        return config
    return parse_config({**config.model_dump(), **overrides}, source=str(args.config))


def _out_dir(args: argparse.Namespace, config: Optional[ExperimentConfig] = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    if config is not None and config.out_dir is not None:
        return Path(config.out_dir)
    return Path(settings.default_out_dir)


# ---------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------
def cmd_pretrain(args: argparse.Namespace) -> None:
    config = _load_experiment(args)
    out_dir = _out_dir(args, config)
    data = prepare_data(config.dataset)
    for seed in config.seeds:
        model = pretrain(config, data, seed)
        meta = CheckpointMeta(config_hash=config_hash(config), method="pretrain", seed=seed)
        path = out_dir / "checkpoints" / f"pretrained_seed{seed}.ckpt"
        print(save_checkpoint(model, None, meta, path))


def cmd_run(args: argparse.Namespace) -> None:
    config = _load_experiment(args)
    out_dir = _out_dir(args, config)
    data = prepare_data(config.dataset)
    digest = config_hash(config)
    pretrained = load_checkpoint(args.pretrained)[0] if args.pretrained else None

    rows: List[dict] = []
    for seed in config.seeds:
        model, record = run_experiment(
            config,
            seed,
            out_dir=out_dir,
            parallel=config.parallel,
            data=data,
            pretrained=pretrained,
        )
        rows.extend(rows_for_record(record, make_run_id(record.method, digest, seed)))
        record_path = out_dir / f"run_record_{config.method}_seed{seed}.json"
        record_path.parent.mkdir(parents=True, exist_ok=True)
        record_path.write_text(record.model_dump_json(indent=2), encoding="utf-8")
        if config.save_checkpoints:
            meta = CheckpointMeta(
                config_hash=digest, method=record.method, phase=len(record.phases), seed=seed
            )
            save_checkpoint(
                model,
                Mask.from_zeros(model),
                meta,
                out_dir / "checkpoints" / f"{config.method}_seed{seed}_final.ckpt",
            )
        logger.info("seed %d done: final sparsity %.4f", seed, record.final_sparsity)

    print(write_rows(out_dir / "results.csv", rows))


def cmd_eval(args: argparse.Namespace) -> None:
    config = _load_experiment(args)
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required for eval")
    model, mask, meta = load_checkpoint(args.checkpoint)
    data = prepare_data(config.dataset)
    model = recompute_bn(model, data.train, config.bn_batch_size)

    result = evaluate(model, data.test)
    summary = {
        "checkpoint": str(args.checkpoint),
        "method": meta.method,
        "phase": meta.phase,
        "accuracy": result.accuracy,
        "loss": result.loss,
        "sparsity": mask.sparsity,
        "speedup": float(count_flops(model, mask).speedup),
    }
    if config.dataset.corruption_kinds:
        summary["ood_accuracy"] = ood_accuracy(
            model,
            data.test,
            config.dataset.corruption_kinds,
            config.dataset.severities,
            config.dataset.corruption_scale,
        )
    if data.test.subgroup is not None:
        groups = subgroup_recall(model, data.test)
        summary["subgroup_recalls"] = {
            str(group): recall for group, recall in groups.subgroup_recalls.items()
        }
        summary["balanced_accuracy"] = groups.balanced_accuracy
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_sweep(args: argparse.Namespace) -> None:
    config = _load_experiment(args)
    if args.kind is not None:
        config = parse_config(
            {**config.model_dump(), "sweep": {**config.sweep.model_dump(), "kind": args.kind}}
        )
    out_dir = _out_dir(args, config)
    for seed in config.seeds:
        print(run_sweep(config, seed, out_dir, parallel=config.parallel))


def cmd_report(args: argparse.Namespace) -> None:
    out_dir = _out_dir(args)
    inputs = args.inputs or [out_dir / "results.csv"]
    summary = aggregate(read_rows(inputs))
    path = write_rows(out_dir / "report.csv", summary, REPORT_COLUMNS)
    print(format_report(summary))
    print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsesoup", description="Sparse model soups: prune, retrain, merge."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def _common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, default=None, help="Experiment TOML file.")
        sub.add_argument("--seed", type=int, default=None, help="Run only this seed.")
        sub.add_argument("--out", type=Path, default=None, help="Output directory.")
        sub.add_argument("--parallel", type=int, default=None, help="Replica worker threads.")
        sub.add_argument("--method", type=str, default=None, help="Override the configured method.")

    pretrain_parser = subparsers.add_parser("pretrain", help="Train and store the dense model.")
    _common(pretrain_parser)
    pretrain_parser.set_defaults(handler=cmd_pretrain)

    run_parser = subparsers.add_parser("run", help="Run the configured method.")
    _common(run_parser)
    run_parser.add_argument(
        "--pretrained", type=Path, default=None, help="Dense checkpoint to start from."
    )
    run_parser.set_defaults(handler=cmd_run)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint.")
    _common(eval_parser)
    eval_parser.add_argument("--checkpoint", type=Path, default=None)
    eval_parser.set_defaults(handler=cmd_eval)

    sweep_parser = subparsers.add_parser("sweep", help="Run a comparison grid.")
    _common(sweep_parser)
    sweep_parser.add_argument("--kind", choices=["sparsity", "epochs", "hparams"], default=None)
    sweep_parser.set_defaults(handler=cmd_sweep)

    report_parser = subparsers.add_parser("report", help="Aggregate result CSVs.")
    _common(report_parser)
    report_parser.add_argument("inputs", nargs="*", type=Path, help="Result CSV files.")
    report_parser.set_defaults(handler=cmd_report)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse `argv`, run the subcommand and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except SparseSoupError as exc:
        logger.error("%s", exc)
        return exit_code_for(exc)
    except Exception as exc:  # pylint: disable=broad-exception-caught
        logger.exception("unexpected failure")
        return exit_code_for(exc)
    return exit_code_for(None)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
