"""
Synthetic multi-domain, multi-period click logs.

Labels follow a planted logistic model over a fixed seeded ground-truth
embedding phi(x) of the sampled features:

    logit = base + s_inv * w_inv.phi
                 + s_spec * (w_d.phi + b_d)
                 + drift * t * w_t.phi

Domain-specific structure also tilts the feature marginals (categorical
popularity and dense means) in proportion to s_spec, so domains differ both
in what they click and in what they see. Every (domain, period) cell draws
from its own RNG stream derived from (seed, domain, period), so cells can be
generated in any order or in parallel with identical results.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config import FeatureSchema, GenConfig
from src.errors import DataError
from src.nn import sigmoid, softmax
from src.parallel import run_ordered

logger = logging.getLogger(__name__)

MIXED_DOMAIN = -1
GROUND_TRUTH_DIM = 4
_GROUND_TRUTH_STREAM = 7_919
_MIX_STREAM = 104_729


@dataclass(frozen=True)
class Sample:
    cat: Tuple[int, ...]
    dense: Tuple[float, ...]
    y: int
    d: int
    domain: int
    period: int


@dataclass
class PeriodDataset:
    """
    Column-oriented set of samples from one (domain, period) cell.
    The mixed set is the one exception on domain: its ``domain_id`` is
    MIXED_DOMAIN and ``domain`` holds each sample's origin.
    """
    schema: FeatureSchema
    cat: np.ndarray  # n x fields, int64
    dense: np.ndarray  # n x dense, float64
    y: np.ndarray  # n, float64 in {0, 1}
    d: np.ndarray  # n, float64, 1 = target domain
    domain: np.ndarray  # n, int64
    domain_id: int
    period: int

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, index: np.ndarray) -> "PeriodDataset":
        return PeriodDataset(self.schema, self.cat[index], self.dense[index], self.y[index],
                             self.d[index], self.domain[index], self.domain_id, self.period)

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(tuple(int(v) for v in self.cat[i]), tuple(float(v) for v in self.dense[i]),
                         int(self.y[i]), int(self.d[i]), int(self.domain[i]), self.period)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.cat, columns=self.schema.categorical_names)
        for j, name in enumerate(self.schema.dense):
            frame[name] = self.dense[:, j]
        frame["y"] = self.y.astype(np.int64)
        frame["d"] = self.d.astype(np.int64)
        frame["domain"] = self.domain
        frame["period"] = self.period
        return frame


def concat_datasets(datasets: Sequence[PeriodDataset], domain_id: int) -> PeriodDataset:
    first = datasets[0]
    return PeriodDataset(
        first.schema,
        np.concatenate([ds.cat for ds in datasets]),
        np.concatenate([ds.dense for ds in datasets]),
        np.concatenate([ds.y for ds in datasets]),
        np.concatenate([ds.d for ds in datasets]),
        np.concatenate([ds.domain for ds in datasets]),
        domain_id,
        first.period,
    )


@dataclass
class GroundTruth:
    tables: List[np.ndarray]  # per field: cardinality x GROUND_TRUTH_DIM
    popularity: List[np.ndarray]  # per field: shared log-popularity
    domain_shift: List[np.ndarray]  # per field: num_domains x cardinality
    dense_shift: np.ndarray  # num_domains x dense
    w_inv: np.ndarray
    w_domain: np.ndarray  # num_domains x phi width
    b_domain: np.ndarray  # num_domains
    w_drift: np.ndarray

    def as_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {
            "dense_shift": self.dense_shift, "w_inv": self.w_inv, "w_domain": self.w_domain,
            "b_domain": self.b_domain, "w_drift": self.w_drift,
        }
        for j, (table, pop, shift) in enumerate(zip(self.tables, self.popularity, self.domain_shift)):
            arrays[f"table_{j}"] = table
            arrays[f"popularity_{j}"] = pop
            arrays[f"domain_shift_{j}"] = shift
        return arrays


def ground_truth(config: GenConfig, schema: FeatureSchema) -> GroundTruth:
    """The planted generative weights, drawn once from the config seed."""
    rng = np.random.default_rng([config.seed, _GROUND_TRUTH_STREAM])
    tables = [rng.normal(0.0, 1.0, size=(card, GROUND_TRUTH_DIM)) for card in schema.cardinalities]
    popularity = [rng.normal(0.0, 1.0, size=card) for card in schema.cardinalities]
    domain_shift = [rng.normal(0.0, 1.0, size=(config.num_domains, card)) for card in schema.cardinalities]
    n_dense = len(schema.dense)
    dense_shift = rng.normal(0.0, 1.0, size=(config.num_domains, n_dense))
    phi_width = len(schema.categorical) * GROUND_TRUTH_DIM + n_dense
    scale = 1.0 / np.sqrt(max(phi_width, 1))
    w_inv = rng.normal(0.0, scale, size=phi_width)
    w_domain = rng.normal(0.0, scale, size=(config.num_domains, phi_width))
    b_domain = rng.normal(0.0, 1.0, size=config.num_domains)
    w_drift = rng.normal(0.0, scale, size=phi_width)
    return GroundTruth(tables, popularity, domain_shift, dense_shift, w_inv, w_domain, b_domain, w_drift)


def save_ground_truth(truth: GroundTruth, path: Path) -> None:
    np.savez(path, **truth.as_arrays())


def generate_period(config: GenConfig, domain_id: int, period: int,
                    schema: Optional[FeatureSchema] = None,
                    truth: Optional[GroundTruth] = None) -> PeriodDataset:
    schema = schema or FeatureSchema()
    if not 0 <= domain_id < config.num_domains:
        raise DataError(f"domain id {domain_id} outside [0, {config.num_domains})")
    if not 0 <= period < config.num_periods:
        raise DataError(f"period {period} outside [0, {config.num_periods})")
    truth = truth or ground_truth(config, schema)

    rng = np.random.default_rng([config.seed, domain_id, period])
    n = config.domain_size(domain_id)
    s_spec = config.specific_strength

    # 1. Features, with domain-tilted marginals
    columns = []
    for j, card in enumerate(schema.cardinalities):
        probs = softmax(truth.popularity[j] + s_spec * truth.domain_shift[j][domain_id])
        columns.append(rng.choice(card, size=n, p=probs))
    cat = np.stack(columns, axis=1).astype(np.int64) if columns else np.zeros((n, 0), dtype=np.int64)
    dense = rng.normal(0.0, 1.0, size=(n, len(schema.dense))) + s_spec * truth.dense_shift[domain_id]

    # 2. Ground-truth embedding
    phi_parts = [table[cat[:, j]] for j, table in enumerate(truth.tables)]
    phi_parts.append(dense)
    phi = np.concatenate(phi_parts, axis=1)

    # 3. Labels
    logit = (config.base_logit
             + config.invariant_strength * (phi @ truth.w_inv)
             + s_spec * (phi @ truth.w_domain[domain_id] + truth.b_domain[domain_id])
             + config.drift_magnitude * period * (phi @ truth.w_drift))
    y = (rng.random(n) < sigmoid(logit)).astype(np.float64)

    is_target = 1.0 if domain_id == config.target_domain else 0.0
    return PeriodDataset(schema, cat, dense, y, np.full(n, is_target),
                         np.full(n, domain_id, dtype=np.int64), domain_id, period)


def generate_all(config: GenConfig, schema: FeatureSchema, jobs: int = 1) -> Dict[Tuple[int, int], PeriodDataset]:
    """Every (domain, period) cell; parallel and serial runs agree bit-exactly."""
    truth = ground_truth(config, schema)
    cells = [(d, t) for t in range(config.num_periods) for d in range(config.num_domains)]
    datasets = run_ordered(
        [lambda d=d, t=t: generate_period(config, d, t, schema, truth) for d, t in cells], jobs
    )
    logger.info(f"Generated {len(cells)} cells ({config.num_domains} domains x {config.num_periods} periods)")
    return dict(zip(cells, datasets))


def build_mixed(sources: Sequence[PeriodDataset], target: PeriodDataset, seed: int) -> PeriodDataset:
    """
    Mixed set for the adversarial extractor, the size of the target set:
    ceil(n/2) source samples (d=0), the source for each slot chosen uniformly
    among the non-empty source sets, and floor(n/2) target samples (d=1),
    deterministically shuffled.
    """
    n = len(target)
    if n == 0:
        raise DataError("cannot build a mixed set from an empty target dataset")
    pool = [ds for ds in sources if len(ds) > 0]
    if len(pool) < len(sources):
        logger.warning(f"Skipping {len(sources) - len(pool)} empty source dataset(s) in the mixed set")
    if not pool:
        raise DataError("cannot build a mixed set: every source dataset is empty")

    rng = np.random.default_rng([seed, target.period, _MIX_STREAM])
    n_source = (n + 1) // 2
    n_target = n // 2
    counts = rng.multinomial(n_source, [1.0 / len(pool)] * len(pool))

    parts = []
    for ds, count in zip(pool, counts):
        if count == 0:
            continue
        index = rng.choice(len(ds), size=count, replace=bool(count > len(ds)))
        part = ds.subset(index)
        part.d = np.zeros(count)
        parts.append(part)
    target_part = target.subset(rng.choice(n, size=n_target, replace=False))
    target_part.d = np.ones(n_target)
    parts.append(target_part)

    mixed = concat_datasets(parts, MIXED_DOMAIN)
    mixed.period = target.period
    return mixed.subset(rng.permutation(n))


# --- CSV exchange ---

def write_csv(dataset: PeriodDataset, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g")


def _bad_line(mask: np.ndarray) -> int:
    # header is line 1
    return int(np.argmax(mask)) + 2


def load_csv(path: Path, schema: FeatureSchema, target_domain: Optional[int] = None) -> PeriodDataset:
    """
    Parses a click log. Required columns: every schema field, y, domain and
    period. An optional d column carries the domain indicator; without it d
    is derived from ``target_domain``.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        logger.error(f"Dataset file not found: {path}")
        raise DataError(f"dataset file not found: {path}")

    required = schema.field_names + ["y", "domain", "period"]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")

    def integer_column(name: str) -> np.ndarray:
        text = frame[name].str.strip()
        bad = ~text.str.fullmatch(r"[+-]?\d+").to_numpy(dtype=bool)
        if bad.any():
            raise DataError(f"{path}: line {_bad_line(bad)}: column '{name}' is not an integer "
                            f"({frame[name].iloc[int(np.argmax(bad))]!r})")
        return text.astype(np.int64).to_numpy()

    cat_columns = [integer_column(name) for name in schema.categorical_names]
    for name, card, column in zip(schema.categorical_names, schema.cardinalities, cat_columns):
        bad = (column < 0) | (column >= card)
        if bad.any():
            raise DataError(f"{path}: line {_bad_line(bad)}: field '{name}' index "
                            f"{int(column[np.argmax(bad)])} outside [0, {card})")

    dense_columns = []
    # %.17g text reads back bit-exactly only through the round-trip parser
    dense_frame = pd.read_csv(path, usecols=list(schema.dense), float_precision="round_trip",
                              keep_default_na=False) if schema.dense else None
    for name in schema.dense:
        values = pd.to_numeric(dense_frame[name], errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
        if bad.any():
            raise DataError(f"{path}: line {_bad_line(bad)}: column '{name}' is not a finite number")
        dense_columns.append(values)

    y = integer_column("y")
    bad = (y != 0) & (y != 1)
    if bad.any():
        raise DataError(f"{path}: line {_bad_line(bad)}: label y={int(y[np.argmax(bad)])} outside {{0, 1}}")

    domain = integer_column("domain")
    periods = integer_column("period")
    n = len(frame)
    if n and np.any(periods != periods[0]):
        raise DataError(f"{path}: line {_bad_line(periods != periods[0])}: all rows must share one period")

    if "d" in frame.columns:
        d = integer_column("d")
        bad = (d != 0) & (d != 1)
        if bad.any():
            raise DataError(f"{path}: line {_bad_line(bad)}: domain indicator outside {{0, 1}}")
    elif target_domain is not None:
        d = (domain == target_domain).astype(np.int64)
    else:
        d = np.zeros(n, dtype=np.int64)

    cat = np.stack(cat_columns, axis=1) if cat_columns else np.zeros((n, 0), dtype=np.int64)
    dense = np.stack(dense_columns, axis=1) if dense_columns else np.zeros((n, 0))
    domain_id = int(domain[0]) if n and np.all(domain == domain[0]) else MIXED_DOMAIN
    period = int(periods[0]) if n else 0
    return PeriodDataset(schema, cat, dense, y.astype(np.float64), d.astype(np.float64),
                         domain, domain_id, period)


def cell_path(data_dir: Path, domain_id: int, period: int) -> Path:
    return Path(data_dir) / f"domain{domain_id}_period{period}.csv"


def write_all(datasets: Dict[Tuple[int, int], PeriodDataset], data_dir: Path) -> None:
    for (domain_id, period), ds in datasets.items():
        write_csv(ds, cell_path(data_dir, domain_id, period))
    logger.info(f"Wrote {len(datasets)} dataset files to {data_dir}")


def load_all(config: GenConfig, schema: FeatureSchema, data_dir: Path) -> Dict[Tuple[int, int], PeriodDataset]:
    datasets = {}
    for period in range(config.num_periods):
        for domain_id in range(config.num_domains):
            path = cell_path(data_dir, domain_id, period)
            if not path.exists():
                raise DataError(f"missing dataset file {path} (run generate-data first)")
            datasets[(domain_id, period)] = load_csv(path, schema, target_domain=config.target_domain)
    return datasets
