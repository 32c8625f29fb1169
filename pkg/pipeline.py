import asyncio
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Tuple

import pandas as pd
from dotenv import load_dotenv

from src import checkpoint
from src.backbones import count_forward_flops
from src.config import ExperimentConfig, parse_config, run_id, validate_config, write_resolved_config
from src.datagen import PeriodDataset, generate_all, ground_truth, load_all, save_ground_truth, write_all
from src.errors import CheckpointError, ConfigError, DiitError
from src.evaluation import (
    REPR_STAGES,
    compare_backbones,
    export_representations,
    inference_reads,
    plug_study,
    probe_domain_accuracy,
    reset_reads,
    run_ablation,
    summarize,
    sweep,
    write_metrics_csv,
    write_representations,
)
from src.metrics import MetricsRecord, evaluate_model
from src.trainer import SourceTrack, mixed_for_period, period_dir, run_incremental, train_source_track

load_dotenv()

# Configure logging
logging.basicConfig(
    level=os.getenv("DIIT_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

Datasets = Dict[Tuple[int, int], PeriodDataset]


def resolve_config(args) -> ExperimentConfig:
    """Config file plus command-line overrides, validated again as a whole."""
    config = parse_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        data = config.model_dump(by_alias=True)
        data.update(updates)
        config = validate_config(data)
    return config


def run_dir_for(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / run_id(config)


def load_or_generate(config: ExperimentConfig, run_dir: Path, jobs: int) -> Datasets:
    data_dir = run_dir / "data"
    if data_dir.exists():
        return load_all(config.gen, config.feature_schema, data_dir)
    logger.info(f"No generated data under {data_dir}; generating it in memory")
    return generate_all(config.gen, config.feature_schema, jobs)


def source_path(run_dir: Path, seed: int, domain_id: int, period: int) -> Path:
    return run_dir / "sources" / f"seed{seed}" / f"domain{domain_id}_period{period}.npz"


def load_source_track(config: ExperimentConfig, run_dir: Path, seed: int, last: int) -> SourceTrack:
    return {
        t: [checkpoint.load_backbone(source_path(run_dir, seed, n, t)) for n in range(config.gen.num_sources)]
        for t in range(last + 1)
    }


def last_period(config: ExperimentConfig, args) -> int:
    return config.last_train_period if args.period is None else args.period


def diit_dir(run_dir: Path, seed: int) -> Path:
    return run_dir / "diit" / f"seed{seed}" / "checkpoints"


# --- Subcommands ---

def cmd_generate_data(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = generate_all(config.gen, config.feature_schema, args.jobs)
    data_dir = run_dir / "data"
    write_all(datasets, data_dir)
    save_ground_truth(ground_truth(config.gen, config.feature_schema), data_dir / "ground_truth.npz")


def cmd_train_sources(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    last = last_period(config, args)
    for seed in config.seeds:
        track = train_source_track(config, seed, datasets, last, args.jobs)
        for t, models in track.items():
            for n, model in enumerate(models):
                checkpoint.save_backbone(model, source_path(run_dir, seed, n, t))
        logger.info(f"Saved source checkpoints for seed {seed} under {run_dir / 'sources'}")


def cmd_train_diit(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    last = last_period(config, args)
    records: List[MetricsRecord] = []
    for seed in config.seeds:
        track = None
        if source_path(run_dir, seed, 0, last).exists():
            track = load_source_track(config, run_dir, seed, last)
        result = run_incremental(config, seed=seed, variant="full", datasets=datasets, source_track=track,
                                 checkpoint_dir=diit_dir(run_dir, seed), resume=not args.no_resume,
                                 last_period=last, jobs=args.jobs)
        records.extend(result.records)
    write_metrics_csv(records, run_dir / "diit" / "metrics.csv")
    logger.info(f"Training metrics written to {run_dir / 'diit' / 'metrics.csv'}")


def cmd_evaluate(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    t = last_period(config, args)
    test = datasets[(config.gen.target_domain, t + 1)]
    records = []
    for seed in config.seeds:
        directory = period_dir(diit_dir(run_dir, seed), t)
        if not checkpoint.state_exists(directory):
            raise CheckpointError(f"no trained state at {directory / checkpoint.STATE_FILE} (run train-diit first)")
        state = checkpoint.load_state(directory)
        reset_reads(state)
        auc_value, logloss_value = evaluate_model(state.target, test)
        reads = inference_reads(state)
        if any(reads.values()):
            logger.warning(f"Inference touched transfer or source parameters: {reads}")
        logger.info(f"Seed {seed} period {t}: auc={auc_value:.6f} logloss={logloss_value:.6f} "
                    f"flops={state.target.flops} (bare backbone {count_forward_flops(state.target, len(test))})")
        records.append(MetricsRecord(t, "full", auc_value, logloss_value, seed))
    (run_dir / "eval").mkdir(parents=True, exist_ok=True)
    write_metrics_csv(records, run_dir / "eval" / "metrics.csv")


def _write_experiment(records: List[MetricsRecord], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(records, out_dir / "metrics.csv")
    summarize(records).to_csv(out_dir / "summary.csv", index=False, float_format="%.6f")
    logger.info(f"Wrote {len(records)} metric rows to {out_dir}")


def cmd_ablate(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    _write_experiment(run_ablation(config, datasets=datasets, jobs=args.jobs), run_dir / "ablation")


def cmd_sweep(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    _write_experiment(sweep(config, datasets=datasets, jobs=args.jobs), run_dir / "sweep")


def cmd_plug_study(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    _write_experiment(plug_study(config, datasets=datasets, jobs=args.jobs), run_dir / "plug_study")


def cmd_compat(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    _write_experiment(compare_backbones(config, datasets=datasets, jobs=args.jobs), run_dir / "compat")


def cmd_export_reprs(config: ExperimentConfig, args, run_dir: Path) -> None:
    datasets = load_or_generate(config, run_dir, args.jobs)
    t = last_period(config, args)
    out_dir = run_dir / "reprs"
    out_dir.mkdir(parents=True, exist_ok=True)
    probes = []
    for seed in config.seeds:
        directory = period_dir(diit_dir(run_dir, seed), t)
        if not checkpoint.state_exists(directory):
            raise CheckpointError(f"no trained state at {directory / checkpoint.STATE_FILE} (run train-diit first)")
        state = checkpoint.load_state(directory)
        mixed = mixed_for_period(state, config, datasets)
        for stage in REPR_STAGES:
            frame = export_representations(state, mixed, stage, config.hyper)
            write_representations(frame, out_dir / f"seed{seed}_period{t}_{stage}.csv")
            accuracy = probe_domain_accuracy(frame.drop(columns="d").to_numpy(), frame["d"].to_numpy(), seed=seed)
            probes.append({"seed": seed, "period": t, "stage": stage, "accuracy": accuracy})
    pd.DataFrame(probes).to_csv(out_dir / "probe.csv", index=False, float_format="%.6f")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train-sources": cmd_train_sources,
    "train-diit": cmd_train_diit,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "plug-study": cmd_plug_study,
    "compat": cmd_compat,
    "export-reprs": cmd_export_reprs,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Cross-domain transfer lab for incremental CTR models")
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("--config", default="configs/default.json", help="Path to the JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="Run a single seed instead of the config's list")
    parser.add_argument("--out", default=None, help="Output directory (overrides the config)")
    parser.add_argument("--period", type=int, default=None, help="Last period to train, or the period to evaluate/export")
    parser.add_argument("--jobs", type=int, default=1, help="Independent units to run concurrently")
    parser.add_argument("--no-resume", action="store_true", help="Ignore existing period checkpoints")
    return parser


async def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        if args.period is not None and not 0 <= args.period <= config.last_train_period:
            raise ConfigError(f"--period {args.period} outside 0..{config.last_train_period}")
        run_dir = run_dir_for(config)
        write_resolved_config(config, run_dir)
        logger.info(f"{args.command}: run directory {run_dir}")
        await asyncio.to_thread(COMMANDS[args.command], config, args, run_dir)
    except DiitError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
