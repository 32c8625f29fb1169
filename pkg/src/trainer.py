"""
Incremental training in a simulated industrial setting.

Each period, every source model is trained on its own newest data, the
target model is warm-started from the previous period and then either
fine-tuned on cross-entropy alone (before the plug period) or trained with
the two-step transfer objective:

- step 1 updates the discriminator only, on the mixed set;
- step 2 updates target, gate, mapper and KD projections on
  lam * CE + alpha * confusion + beta1 * sum(MSE) + beta2 * KL,
  with the discriminator and every source model frozen.

After each period the target model is evaluated on the next period's
target data.
"""
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src import checkpoint
from src.backbones import Backbone, backward, build_backbone, forward_features
from src.config import ExperimentConfig, HyperParams
from src.datagen import PeriodDataset, build_mixed, generate_all
from src.errors import CheckpointError, ConfigError, DataError, NonFiniteError
from src.extractors import (
    AdversarialPass,
    adversarial_forward,
    aggregate_backward,
    aggregate_sources,
    confusion_loss,
    discriminate_cached,
    discriminator_backward,
    discriminator_loss,
    gate_backward,
    gate_weights_cached,
    map_representation,
    mapper_backward,
    new_discriminator,
    new_gating,
    new_mapper,
    uniform_gate,
)
from src.metrics import MetricsRecord, evaluate_model, read_metrics_csv, write_metrics_csv
from src.migrator import (
    KDConfig,
    kd_total,
    logit_distill_grads,
    logit_distill_loss,
    middle_distill_grads,
    middle_distill_loss,
    new_projection,
)
from src.nn import (
    AdamState,
    Params,
    adam_state_for,
    adam_step,
    binary_cross_entropy,
    binary_cross_entropy_grad,
    softmax,
)
from src.parallel import run_ordered
from src.state import FreezeGuard, StepLosses, TrainerState, copy_optimizers

logger = logging.getLogger(__name__)

# Independent RNG streams, keyed together with the run seed.
_SOURCE_STREAM = 11
_TARGET_STREAM = 13
_TRANSFER_STREAM = 17
_BATCH_STREAM = 19
_MIX_BATCH_STREAM = 23
_MIX_SET_STREAM = 29

SourceTrack = Dict[int, List[Backbone]]  # period -> every source model after that period


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --- Cross-entropy ---

def ce_loss(predictions, labels) -> float:
    """Mean binary cross-entropy with the 1e-12 log clamp."""
    return binary_cross_entropy(predictions, labels)


def ce_logit_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d ce_loss / d Z, through y_hat = softmax(Z)[1]."""
    p = softmax(logits)
    g = binary_cross_entropy_grad(p[:, 1], labels) * p[:, 0] * p[:, 1]
    return np.stack([-g, g], axis=1)


def _require_finite(value: float, component: str) -> float:
    if not np.isfinite(value):
        logger.error(f"Non-finite {component}: {value}")
        raise NonFiniteError(f"non-finite {component} loss ({value})")
    return value


# --- Plain incremental training ---

def batch_order(n: int, batch_size: int, seed: int, domain_id: int, period: int, epoch: int,
                stream: int = _BATCH_STREAM) -> List[np.ndarray]:
    rng = np.random.default_rng([seed, stream, domain_id, period, epoch])
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def fine_tune_period(model: Backbone, dataset: PeriodDataset, hyper: HyperParams, adam: AdamState,
                     seed: int, period: Optional[int] = None) -> List[float]:
    """CE-only training for ``hyper.epochs_per_period`` epochs; returns the per-batch losses."""
    if len(dataset) == 0:
        raise DataError(f"domain {dataset.domain_id} period {dataset.period}: empty dataset")
    period = dataset.period if period is None else period
    losses = []
    for epoch in range(hyper.epochs_per_period):
        for index in batch_order(len(dataset), hyper.batch_size, seed, dataset.domain_id, period, epoch):
            batch = dataset.subset(index)
            out, cache = forward_features(model, batch.cat, batch.dense)
            losses.append(_require_finite(ce_loss(out.prediction, batch.y), "L_CE"))
            grads = backward(model, cache, ce_logit_grad(out.logits, batch.y))
            adam_step(model.parameters(), grads, adam)
    return losses


def train_source_period(model: Backbone, dataset: PeriodDataset, hyper: HyperParams,
                        adam: Optional[AdamState] = None, seed: int = 0) -> Backbone:
    """One period of independent training for a source model; no other domain is involved."""
    adam = adam if adam is not None else adam_state_for(model.parameters(), lr=hyper.lr)
    losses = fine_tune_period(model, dataset, hyper, adam, seed)
    logger.debug(f"Source {dataset.domain_id} period {dataset.period}: last CE {losses[-1]:.5f}")
    return model


def train_source_track(config: ExperimentConfig, seed: int, datasets: Dict[Tuple[int, int], PeriodDataset],
                       last_period: Optional[int] = None, jobs: int = 1) -> SourceTrack:
    """
    Trains every source model incrementally over the horizon and keeps a
    snapshot after each period. Sources share nothing, so they may train on
    separate threads.
    """
    last = config.last_train_period if last_period is None else last_period
    schema = config.feature_schema
    widths = config.backbone.resolved_source_widths

    def train_one(n: int) -> List[Backbone]:
        model = build_backbone(config.backbone.source_kind(n), schema, widths, derive_seed(seed, _SOURCE_STREAM, n))
        adam = adam_state_for(model.parameters(), lr=config.hyper.lr)
        snapshots = []
        for t in range(last + 1):
            train_source_period(model, datasets[(n, t)], config.hyper, adam, seed)
            snapshots.append(model.clone())
        return snapshots

    per_source = run_ordered([lambda n=n: train_one(n) for n in range(config.gen.num_sources)], jobs)
    logger.info(f"Trained {len(per_source)} source models over periods 0..{last} (seed {seed})")
    return {t: [snapshots[t] for snapshots in per_source] for t in range(last + 1)}


# --- State lifecycle ---

def initial_state(config: ExperimentConfig, seed: int) -> TrainerState:
    target = build_backbone(config.backbone.kind, config.feature_schema, config.backbone.widths,
                            derive_seed(seed, _TARGET_STREAM))
    state = TrainerState(sources=[], target=target, period=0, plug_period=config.plug_period,
                         seed=seed, active=config.active_sources)
    state.optimizers["target"] = adam_state_for(target.parameters(), lr=config.hyper.lr)
    return state


def attach_transfer(state: TrainerState, config: ExperimentConfig) -> None:
    """Fresh gate, identity mapper, discriminator and KD projections for the first plugged period."""
    hyper = config.hyper
    source_widths = config.backbone.resolved_source_widths
    rng = np.random.default_rng([state.seed, _TRANSFER_STREAM, state.period])
    state.gating = new_gating(rng, state.target.representation_width, hyper.gate_hidden, len(state.active))
    state.mapper = new_mapper(source_widths[-1])
    state.discriminator = new_discriminator(rng, source_widths[-1], hyper.dis_hidden)
    state.projection = new_projection(rng, source_widths, config.backbone.widths, hyper.num_spots)
    state.optimizers["gate"] = adam_state_for(state.gating.parameters(), lr=hyper.lr)
    state.optimizers["mapper"] = adam_state_for(state.mapper.parameters(), lr=hyper.lr)
    state.optimizers["dis"] = adam_state_for(state.discriminator.parameters(), lr=hyper.lr)
    if state.projection.parameters():
        state.optimizers["kd"] = adam_state_for(state.projection.parameters(), lr=hyper.lr)
    logger.info(f"Attached transfer modules at period {state.period} "
                f"({len(state.active)} sources, {state.projection.num_spots} distillation spots)")


def warm_start(previous: Optional[TrainerState], period: int, config: ExperimentConfig, seed: int,
               first_plug: bool) -> TrainerState:
    """
    Period ``period`` starts from an exact copy of the previous target model,
    its optimizer moments and, once plugged, its transfer modules. With
    ``first_plug`` the transfer modules are created fresh instead.
    """
    if previous is None:
        if period != 0:
            raise CheckpointError(f"no period {period - 1} state to warm start period {period} from")
        state = initial_state(config, seed)
    else:
        state = TrainerState(
            sources=[s.clone() for s in previous.sources],
            target=previous.target.clone(),
            period=period,
            plug_period=previous.plug_period,
            seed=previous.seed,
            active=list(previous.active),
            gating=copy.deepcopy(previous.gating),
            mapper=copy.deepcopy(previous.mapper),
            discriminator=copy.deepcopy(previous.discriminator),
            projection=copy.deepcopy(previous.projection),
            optimizers=copy_optimizers(previous.optimizers),
        )
    if first_plug:
        attach_transfer(state, config)
    return state


# --- The two-step update ---

def _transfer_view(state: TrainerState, hyper: HyperParams):
    gating = state.gating if hyper.use_gating else None
    mapper = state.mapper if hyper.use_adversarial else None
    return gating, mapper


def _adversarial_pass(state: TrainerState, mixed: PeriodDataset, hyper: HyperParams) -> AdversarialPass:
    gating, mapper = _transfer_view(state, hyper)
    return adversarial_forward(state.active_sources, state.target, gating, mapper, mixed,
                               hyper.adv_target_from_target)


def step1_loss_and_grads(state: TrainerState, mixed: PeriodDataset, hyper: HyperParams,
                         adv: Optional[AdversarialPass] = None) -> Tuple[float, Params, AdversarialPass]:
    """L_adv1 on the mixed batch and its gradient wrt the discriminator."""
    adv = adv if adv is not None else _adversarial_pass(state, mixed, hyper)
    d_hat, caches = discriminate_cached(state.discriminator, adv.mapped)
    loss = discriminator_loss(d_hat, adv.d)
    _, grads = discriminator_backward(state.discriminator, caches, binary_cross_entropy_grad(d_hat, adv.d))
    return loss, grads, adv


def _zeros(params: Params) -> Params:
    return {name: np.zeros_like(p) for name, p in params.items()}


def _add_into(acc: Params, grads: Params) -> None:
    for name, g in grads.items():
        acc[name] = acc[name] + g


def _add_hidden(grad_hidden: Dict[int, np.ndarray], layer: int, g: np.ndarray) -> None:
    grad_hidden[layer] = grad_hidden[layer] + g if layer in grad_hidden else g


def step2_loss_and_grads(state: TrainerState, target_batch: PeriodDataset, mixed: PeriodDataset,
                         hyper: HyperParams,
                         adv: Optional[AdversarialPass] = None) -> Tuple[StepLosses, Dict[str, Params]]:
    """
    The step-2 objective and its gradients for each group step 2 updates:
    ``target`` always, ``gate`` when gating is on, ``mapper`` when the
    adversarial extractor is on and ``kd`` when a projection is learned.
    Zero-weighted components are evaluated but contribute no gradient.
    """
    gating, mapper = _transfer_view(state, hyper)
    kd = KDConfig.from_hyper(hyper, state.projection)
    sources = state.active_sources
    last = len(state.target.trunk) - 1

    t_out, t_cache = forward_features(state.target, target_batch.cat, target_batch.dense)
    s_outs = [forward_features(s, target_batch.cat, target_batch.dense)[0] for s in sources]
    s_reps = [o.representation for o in s_outs]
    s_logits = [o.logits for o in s_outs]
    if gating is not None:
        g, gate_caches = gate_weights_cached(gating, t_out.representation)
    else:
        g, gate_caches = uniform_gate(len(target_batch), len(sources)), None
    e_s, z_s = aggregate_sources(s_reps, s_logits, g)
    e_mapped = map_representation(mapper, e_s) if mapper is not None else e_s

    # spot 0 is the representation; spot i pairs trunk layer -(i+1), unmapped
    spots = []
    for i, w_kd in enumerate(kd.projection.weights):
        if i == 0:
            spots.append((e_mapped, t_out.representation, w_kd, None))
        else:
            layer_reps = [o.hidden[-(i + 1)] for o in s_outs]
            mixed_layer, _ = aggregate_sources(layer_reps, layer_reps, g)
            spots.append((mixed_layer, t_out.hidden[-(i + 1)], w_kd, layer_reps))
    mse_terms = [_require_finite(middle_distill_loss(src, tgt, w), f"L_MSE spot {i}")
                 for i, (src, tgt, w, _) in enumerate(spots)]
    ce = _require_finite(ce_loss(t_out.prediction, target_batch.y), "L_CE")
    kl = _require_finite(logit_distill_loss(z_s, t_out.logits, kd.tau), "L_KL")

    adv2 = 0.0
    if hyper.use_adversarial:
        adv = adv if adv is not None else _adversarial_pass(state, mixed, hyper)
        d_hat, d_caches = discriminate_cached(state.discriminator, adv.mapped)
        adv2 = _require_finite(confusion_loss(d_hat, adv.d), "L_adv2")
    total = hyper.lam * ce + hyper.alpha * adv2 + kd_total(mse_terms, kl, kd.beta1, kd.beta2)
    losses = StepLosses(ce=ce, adv2=adv2, mse=float(sum(mse_terms)), kl=kl, total=_require_finite(total, "total"))

    gate_grads = _zeros(gating.parameters()) if gating is not None else None
    mapper_grads = _zeros(mapper.parameters()) if mapper is not None else None
    kd_grads = _zeros(kd.projection.parameters())

    grad_z_t = hyper.lam * ce_logit_grad(t_out.logits, target_batch.y)
    grad_hidden: Dict[int, np.ndarray] = {}
    grad_g = np.zeros_like(g)

    if kd.beta2 > 0:
        grad_z_s, grad_z_t_kl = logit_distill_grads(z_s, t_out.logits, kd.tau)
        grad_z_t = grad_z_t + kd.beta2 * grad_z_t_kl
        grad_g += aggregate_backward(s_reps, s_logits, None, kd.beta2 * grad_z_s)

    if kd.beta1 > 0:
        for i, (src, tgt, w_kd, layer_reps) in enumerate(spots):
            grad_src, grad_tgt, grad_w = middle_distill_grads(src, tgt, w_kd)
            _add_hidden(grad_hidden, last - i, kd.beta1 * grad_tgt)
            if grad_w is not None:
                kd_grads[f"kd.{i}.weight"] = kd_grads[f"kd.{i}.weight"] + kd.beta1 * grad_w
            grad_src = kd.beta1 * grad_src
            if i == 0:
                if mapper is not None:
                    grad_src, m_grads = mapper_backward(mapper, e_s, grad_src)
                    _add_into(mapper_grads, m_grads)
                grad_g += aggregate_backward(s_reps, s_logits, grad_src, None)
            else:
                grad_g += aggregate_backward(layer_reps, layer_reps, grad_src, None)

    if gating is not None and (kd.beta1 > 0 or kd.beta2 > 0):
        grad_e_t, g_grads = gate_backward(gating, gate_caches, grad_g)
        _add_hidden(grad_hidden, last, grad_e_t)
        _add_into(gate_grads, g_grads)

    target_grads = backward(state.target, t_cache, grad_z_t, grad_hidden)

    if hyper.use_adversarial and hyper.alpha > 0:
        grad_d_hat = hyper.alpha * binary_cross_entropy_grad(d_hat, 1.0 - adv.d)
        grad_mapped, _ = discriminator_backward(state.discriminator, d_caches, grad_d_hat)
        mixed_hidden = None
        if hyper.adv_target_from_target:
            is_target = adv.d[:, None] == 1.0
            mixed_hidden = np.where(is_target, grad_mapped, 0.0)
            grad_mapped = np.where(is_target, 0.0, grad_mapped)
        grad_pre, m_grads = mapper_backward(mapper, adv.pre_mapper, grad_mapped)
        _add_into(mapper_grads, m_grads)
        if gating is not None:
            grad_g_mix = aggregate_backward(adv.source_reps, adv.source_logits, grad_pre, None)
            grad_e_mix, g_grads = gate_backward(gating, adv.gate_caches, grad_g_mix)
            _add_into(gate_grads, g_grads)
            mixed_hidden = grad_e_mix if mixed_hidden is None else mixed_hidden + grad_e_mix
        if mixed_hidden is not None:
            _add_into(target_grads, backward(state.target, adv.target_cache, None, {last: mixed_hidden}))

    grads = {"target": target_grads}
    if gate_grads is not None:
        grads["gate"] = gate_grads
    if mapper_grads is not None:
        grads["mapper"] = mapper_grads
    if kd_grads:
        grads["kd"] = kd_grads
    return losses, grads


def diit_step(state: TrainerState, target_batch: PeriodDataset, mixed_batch: PeriodDataset,
              hyper: HyperParams) -> StepLosses:
    """
    One paired mini-batch update. Step 1 may touch only the discriminator;
    step 2 must leave the discriminator alone. Source models are frozen
    throughout.
    """
    if not state.plugged:
        raise ConfigError(f"period {state.period}: transfer modules are not attached "
                          f"(plug_period={state.plug_period})")
    if len(target_batch) == 0 or len(mixed_batch) == 0:
        raise DataError(f"empty batch (target {len(target_batch)}, mixed {len(mixed_batch)})")

    groups = state.groups()
    adv1, adv = 0.0, None
    if hyper.use_adversarial:
        frozen = {name: params for name, params in groups.items() if name != "dis"}
        with FreezeGuard(frozen, hyper.check_freeze):
            # the mapped batch does not depend on the discriminator, so one pass serves every update
            for _ in range(hyper.dis_steps):
                adv1, dis_grads, adv = step1_loss_and_grads(state, mixed_batch, hyper, adv)
                _require_finite(adv1, "L_adv1")
                adam_step(groups["dis"], dis_grads, state.optimizers["dis"])

    frozen = {name: params for name, params in groups.items() if name == "dis" or name.startswith("source.")}
    with FreezeGuard(frozen, hyper.check_freeze):
        losses, grads = step2_loss_and_grads(state, target_batch, mixed_batch, hyper, adv)
        for name, group_grads in grads.items():
            adam_step(groups[name], group_grads, state.optimizers[name])
    losses.adv1 = adv1
    return losses


def mixed_for_period(state: TrainerState, config: ExperimentConfig,
                     datasets: Dict[Tuple[int, int], PeriodDataset]) -> PeriodDataset:
    """The period's mixed set: the active sources' data against the target's."""
    t = state.period
    return build_mixed([datasets[(n, t)] for n in state.active], datasets[(config.gen.target_domain, t)],
                       derive_seed(state.seed, _MIX_SET_STREAM))


def train_diit_period(state: TrainerState, config: ExperimentConfig,
                      datasets: Dict[Tuple[int, int], PeriodDataset]) -> Optional[StepLosses]:
    """Every paired (target, mixed) batch of the period; returns the last step's losses."""
    hyper = config.hyper
    t = state.period
    target_id = config.gen.target_domain
    target_data = datasets[(target_id, t)]
    if len(target_data) == 0:
        raise DataError(f"target domain {target_id} period {t}: empty dataset")
    mixed = mixed_for_period(state, config, datasets)

    losses = None
    for epoch in range(hyper.epochs_per_period):
        target_batches = batch_order(len(target_data), hyper.batch_size, state.seed, target_id, t, epoch)
        mixed_batches = batch_order(len(mixed), hyper.batch_size, state.seed, target_id, t, epoch,
                                    stream=_MIX_BATCH_STREAM)
        for target_index, mixed_index in zip(target_batches, mixed_batches):
            losses = diit_step(state, target_data.subset(target_index), mixed.subset(mixed_index), hyper)
    return losses


# --- Orchestration ---

@dataclass
class RunResult:
    records: List[MetricsRecord]
    state: TrainerState
    losses: Dict[int, StepLosses] = field(default_factory=dict)  # last step of each plugged period


def period_dir(checkpoint_dir: Path, period: int) -> Path:
    return Path(checkpoint_dir) / f"period_{period}"


def _latest_boundary(checkpoint_dir: Path, last: int) -> Optional[int]:
    for t in range(last, -1, -1):
        directory = period_dir(checkpoint_dir, t)
        if checkpoint.state_exists(directory) and (directory / "metrics.csv").exists():
            return t
    return None


def run_incremental(config: ExperimentConfig, seed: Optional[int] = None, variant: str = "full",
                    datasets: Optional[Dict[Tuple[int, int], PeriodDataset]] = None,
                    source_track: Optional[SourceTrack] = None, checkpoint_dir: Optional[Path] = None,
                    resume: bool = False, last_period: Optional[int] = None, jobs: int = 1) -> RunResult:
    """
    Trains periods 0..last_period (default: every period that has a
    successor), evaluating each on the next period's target data.
    """
    seed = config.seeds[0] if seed is None else seed
    last = config.last_train_period if last_period is None else last_period
    if not 0 <= last <= config.last_train_period:
        raise ConfigError(f"period: {last} outside the training horizon 0..{config.last_train_period}")
    if datasets is None:
        datasets = generate_all(config.gen, config.feature_schema, jobs)
    if source_track is None:
        source_track = train_source_track(config, seed, datasets, last, jobs)

    hyper = config.hyper
    target_id = config.gen.target_domain
    records: List[MetricsRecord] = []
    state: Optional[TrainerState] = None
    start = 0
    if resume and checkpoint_dir is not None:
        boundary = _latest_boundary(checkpoint_dir, last)
        if boundary is not None:
            state = checkpoint.load_state(period_dir(checkpoint_dir, boundary))
            records = read_metrics_csv(period_dir(checkpoint_dir, boundary) / "metrics.csv")
            start = boundary + 1
            logger.info(f"Resuming {variant} (seed {seed}) after period {boundary}")

    result = RunResult(records, state)
    for t in range(start, last + 1):
        plugged = t >= config.plug_period
        first_plug = plugged and (state is None or not state.plugged)
        state = warm_start(state, t, config, seed, first_plug)
        state.sources = [s.clone() for s in source_track[t]]

        if plugged:
            losses = train_diit_period(state, config, datasets)
            result.losses[t] = losses
            logger.info(f"[{variant} seed {seed}] period {t} transfer: {losses}")
        else:
            ce = fine_tune_period(state.target, datasets[(target_id, t)], hyper, state.optimizers["target"], seed)
            logger.info(f"[{variant} seed {seed}] period {t} fine-tune: ce={ce[-1]:.5f}")

        auc_value, logloss_value = evaluate_model(state.target, datasets[(target_id, t + 1)])
        records.append(MetricsRecord(t, variant, auc_value, logloss_value, seed))
        logger.info(f"[{variant} seed {seed}] period {t} -> auc={auc_value:.6f} logloss={logloss_value:.6f}")

        if checkpoint_dir is not None:
            directory = period_dir(checkpoint_dir, t)
            checkpoint.save_state(state, directory)
            write_metrics_csv(records, directory / "metrics.csv")

    result.records = records
    result.state = state
    return result
