"""
Experiment runners on top of run_incremental: ablation variants,
hyper-parameter sweeps, the plug-at-period study and the backbone
compatibility comparison, plus representation export and the domain probe.

Every runner takes a defensive copy of the config it is given and merges
per-run results in (variant, seed) submission order, whatever ``jobs`` is.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.backbones import Backbone
from src.config import ONLY_SOURCE, ExperimentConfig, HyperParams, SweepParam
from src.datagen import PeriodDataset, generate_all
from src.errors import ConfigError, DataError
from src.extractors import (
    adversarial_forward,
    discriminate,
    discriminate_cached,
    discriminator_backward,
    new_discriminator,
)
from src.metrics import (  # noqa: F401  (re-exported)
    METRICS_COLUMNS,
    MetricsRecord,
    auc,
    logloss,
    read_metrics_csv,
    records_frame,
    write_metrics_csv,
)
from src.nn import adam_state_for, adam_step, binary_cross_entropy_grad
from src.parallel import run_ordered
from src.state import TrainerState
from src.trainer import SourceTrack, run_incremental, train_source_track

logger = logging.getLogger(__name__)

Datasets = Dict[Tuple[int, int], PeriodDataset]
REPR_STAGES = ("pre-mapper", "post-mapper")


# --- Variants ---

def _with_hyper(config: ExperimentConfig, **changes) -> ExperimentConfig:
    hyper = config.hyper.model_copy(update=changes)
    return config.model_copy(update={"hyper": hyper}, deep=True)


def apply_variant(config: ExperimentConfig, name: str) -> ExperimentConfig:
    """A copy of ``config`` with the overrides one ablation variant stands for."""
    if name == "full":
        return config.model_copy(deep=True)
    if name == "base":
        return config.model_copy(update={"plug_period": config.gen.num_periods}, deep=True)
    if name == "no-gating":
        return _with_hyper(config, use_gating=False)
    if name == "no-adversarial":
        return _with_hyper(config, use_adversarial=False, alpha=0.0)
    if name == "no-middle":
        return _with_hyper(config, beta1=0.0)
    if name == "no-logit":
        return _with_hyper(config, beta2=0.0)
    match = ONLY_SOURCE.match(name)
    if match:
        k = int(match.group(1))
        if not 1 <= k <= config.gen.num_sources:
            raise ConfigError(f"variants: '{name}' names a source outside 1..{config.gen.num_sources}")
        return _with_hyper(config, sources=[k - 1])
    raise ConfigError(f"variants: unknown variant '{name}'")


def _datasets(config: ExperimentConfig, datasets: Optional[Datasets], jobs: int) -> Datasets:
    return datasets if datasets is not None else generate_all(config.gen, config.feature_schema, jobs)


def run_variants(runs: Sequence[Tuple[str, ExperimentConfig]], seeds: Sequence[int], datasets: Datasets,
                 jobs: int = 1) -> List[MetricsRecord]:
    """
    One run_incremental per (label, seed). Runs whose source models are
    trained identically share one source track per seed.
    """
    def track_key(cfg: ExperimentConfig) -> str:
        return cfg.backbone.model_dump_json() + cfg.gen.model_dump_json() + str(
            (cfg.hyper.lr, cfg.hyper.batch_size, cfg.hyper.epochs_per_period))

    needed: Dict[Tuple[str, int], ExperimentConfig] = {}
    for _, cfg in runs:
        for seed in seeds:
            needed.setdefault((track_key(cfg), seed), cfg)
    keys = list(needed)
    tracks: List[SourceTrack] = run_ordered(
        [lambda k=k: train_source_track(needed[k], k[1], datasets) for k in keys], jobs
    )
    track_by_key = dict(zip(keys, tracks))

    jobs_list = [(label, cfg, seed) for label, cfg in runs for seed in seeds]
    results = run_ordered(
        [lambda label=label, cfg=cfg, seed=seed: run_incremental(
            cfg, seed=seed, variant=label, datasets=datasets,
            source_track=track_by_key[(track_key(cfg), seed)]).records
         for label, cfg, seed in jobs_list],
        jobs,
    )
    return [record for records in results for record in records]


def run_ablation(config: ExperimentConfig, variants: Optional[Sequence[str]] = None,
                 seeds: Optional[Sequence[int]] = None, datasets: Optional[Datasets] = None,
                 jobs: int = 1) -> List[MetricsRecord]:
    config = config.model_copy(deep=True)
    variants = list(config.variants if variants is None else variants)
    seeds = list(config.seeds if seeds is None else seeds)
    runs = [(name, apply_variant(config, name)) for name in variants]
    logger.info(f"Ablation over {variants} x seeds {seeds}")
    return run_variants(runs, seeds, _datasets(config, datasets, jobs), jobs)


def sweep(config: ExperimentConfig, param: Optional[SweepParam] = None, grid: Optional[Sequence[float]] = None,
          seeds: Optional[Sequence[int]] = None, datasets: Optional[Datasets] = None,
          jobs: int = 1) -> List[MetricsRecord]:
    """One full run per (grid value, seed); the variant column reads ``<param>=<value>``."""
    config = config.model_copy(deep=True)
    param = config.sweep.param if param is None else param
    grid = list(config.sweep.grid if grid is None else grid)
    seeds = list(config.seeds if seeds is None else seeds)
    if param not in ("tau", "alpha", "beta1", "beta2"):
        raise ConfigError(f"sweep.param: unknown parameter '{param}' (expected tau, alpha, beta1 or beta2)")

    runs = []
    for value in grid:
        try:
            HyperParams.model_validate({**config.hyper.model_dump(), param: value})
        except ValueError as e:
            raise ConfigError(f"sweep.grid: {param}={value} is not a valid value ({e})") from e
        runs.append((f"{param}={value:g}", _with_hyper(config, **{param: float(value)})))
    logger.info(f"Sweeping {param} over {grid} x seeds {seeds}")
    return run_variants(runs, seeds, _datasets(config, datasets, jobs), jobs)


def plug_study(config: ExperimentConfig, periods: Optional[Sequence[int]] = None,
               seeds: Optional[Sequence[int]] = None, datasets: Optional[Datasets] = None,
               jobs: int = 1) -> List[MetricsRecord]:
    """A ``base`` curve plus one ``plug-<P>`` curve per plug period."""
    config = config.model_copy(deep=True)
    periods = list(config.plug_study.periods if periods is None else periods)
    seeds = list(config.seeds if seeds is None else seeds)
    for p in periods:
        if not 0 <= p <= config.last_train_period:
            raise ConfigError(f"plug_study.periods: {p} outside the training horizon 0..{config.last_train_period}")
    runs = [("base", apply_variant(config, "base"))]
    runs += [(f"plug-{p}", config.model_copy(update={"plug_period": p}, deep=True)) for p in periods]
    return run_variants(runs, seeds, _datasets(config, datasets, jobs), jobs)


def compare_backbones(config: ExperimentConfig, kinds: Optional[Sequence[str]] = None,
                      seeds: Optional[Sequence[int]] = None, datasets: Optional[Datasets] = None,
                      jobs: int = 1) -> List[MetricsRecord]:
    """Base against transfer for each backbone kind; every model of a run shares the kind."""
    config = config.model_copy(deep=True)
    kinds = list(config.compat_kinds if kinds is None else kinds)
    seeds = list(config.seeds if seeds is None else seeds)
    runs = []
    for kind in kinds:
        backbone = config.backbone.model_copy(update={"kind": kind, "source_kinds": None})
        kind_config = config.model_copy(update={"backbone": backbone}, deep=True)
        runs.append((f"{kind}-base", apply_variant(kind_config, "base")))
        runs.append((f"{kind}-diit", apply_variant(kind_config, "full")))
    return run_variants(runs, seeds, _datasets(config, datasets, jobs), jobs)


# --- Aggregation ---

def summarize(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    """
    Per variant: each seed's metrics are averaged over periods, then the mean
    and sample standard deviation are taken across seeds. ``auc_delta`` is the
    absolute AUC difference to the ``base`` variant when one is present.
    """
    frame = records_frame(records)
    if frame.empty:
        raise DataError("no metrics records to summarize")
    per_seed = frame.groupby(["variant", "seed"], sort=False)[["auc", "logloss"]].mean().reset_index()
    summary = per_seed.groupby("variant", sort=False).agg(
        auc_mean=("auc", "mean"), auc_std=("auc", "std"),
        logloss_mean=("logloss", "mean"), logloss_std=("logloss", "std"),
        seeds=("seed", "count"),
    ).reset_index()
    summary[["auc_std", "logloss_std"]] = summary[["auc_std", "logloss_std"]].fillna(0.0)
    if "base" in set(summary["variant"]):
        base_auc = float(summary.loc[summary["variant"] == "base", "auc_mean"].iloc[0])
        summary["auc_delta"] = summary["auc_mean"] - base_auc
    return summary


# --- Representations ---

def export_representations(state: TrainerState, mixed_batch: PeriodDataset, stage: str,
                           hyper: Optional[HyperParams] = None) -> pd.DataFrame:
    """
    Aggregated source representations of a mixed batch, before or after the
    mapper, one row per sample: ``d, dim0..dimK``.
    """
    if stage not in REPR_STAGES:
        raise ConfigError(f"stage: expected one of {REPR_STAGES} (got '{stage}')")
    if not state.plugged:
        raise ConfigError(f"period {state.period}: no transfer modules to export representations from")
    use_gating = hyper.use_gating if hyper is not None else True
    adv = adversarial_forward(state.active_sources, state.target, state.gating if use_gating else None,
                              state.mapper, mixed_batch)
    vectors = adv.pre_mapper if stage == "pre-mapper" else adv.mapped
    frame = pd.DataFrame(vectors, columns=[f"dim{k}" for k in range(vectors.shape[1])])
    frame.insert(0, "d", adv.d.astype(np.int64))
    return frame


def write_representations(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


def probe_domain_accuracy(representations: np.ndarray, d: np.ndarray, seed: int = 0, epochs: int = 30,
                          hidden: int = 16, lr: float = 0.01, batch_size: int = 256) -> float:
    """
    Held-out accuracy of a freshly trained domain classifier (same shape as
    the discriminator) on a seeded 70/30 split. Near 0.5 means the two
    domains are inseparable.
    """
    x = np.asarray(representations, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != d.shape[0]:
        raise DataError(f"{x.shape} representations do not pair with {d.shape[0]} labels")
    if x.shape[0] < 4:
        raise DataError(f"need at least 4 samples for a probe split (got {x.shape[0]})")

    rng = np.random.default_rng([seed, 31])
    order = rng.permutation(x.shape[0])
    cut = int(round(0.7 * x.shape[0]))
    train, held_out = order[:cut], order[cut:]

    probe = new_discriminator(rng, x.shape[1], hidden)
    adam = adam_state_for(probe.parameters(), lr=lr)
    for _ in range(epochs):
        shuffled = train[rng.permutation(train.size)]
        for i in range(0, shuffled.size, batch_size):
            index = shuffled[i:i + batch_size]
            d_hat, caches = discriminate_cached(probe, x[index])
            _, grads = discriminator_backward(probe, caches, binary_cross_entropy_grad(d_hat, d[index]))
            adam_step(probe.parameters(), grads, adam)

    predicted = discriminate(probe, x[held_out]) >= 0.5
    accuracy = float(np.mean(predicted == (d[held_out] == 1.0)))
    logger.info(f"Domain probe: held-out accuracy {accuracy:.4f} on {held_out.size} samples")
    return accuracy


def inference_reads(state: TrainerState) -> Dict[str, int]:
    """Parameter-read counters of everything except the target model."""
    reads = {f"source.{n}": s.reads for n, s in enumerate(state.sources)}
    for name, module in (("gate", state.gating), ("mapper", state.mapper), ("dis", state.discriminator)):
        if module is not None:
            reads[name] = module.reads
    return reads


def reset_reads(state: TrainerState) -> None:
    modules: List = list(state.sources) + [state.target]
    modules += [m for m in (state.gating, state.mapper, state.discriminator) if m is not None]
    for module in modules:
        if isinstance(module, Backbone):
            module.reset_counters()
        else:
            module.reads = 0
