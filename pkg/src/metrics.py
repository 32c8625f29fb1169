from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from src.backbones import Backbone, predict
from src.errors import DataError
from src.nn import binary_cross_entropy


METRICS_COLUMNS = ["period", "variant", "seed", "auc", "logloss"]


@dataclass
class MetricsRecord:
    period: int
    variant: str
    auc: float
    logloss: float
    seed: int


def auc(scores, labels) -> float:
    """
    Mann-Whitney rank statistic; tied scores share their average rank, so a
    tie between a positive and a negative counts one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    positive = labels == 1.0
    n_pos = int(np.sum(positive))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"AUC is undefined with {n_pos} positive and {n_neg} negative labels")
    ranks = pd.Series(scores).rank(method="average").to_numpy()
    rank_sum = float(np.sum(ranks[positive]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(predictions, labels) -> float:
    """Mean binary cross-entropy; the same function the trainer minimises."""
    return binary_cross_entropy(predictions, labels)


def evaluate_model(model: Backbone, dataset) -> Tuple[float, float]:
    """(AUC, LogLoss) of the inference path on a dataset."""
    predictions = predict(model, dataset)
    return auc(predictions, dataset.y), logloss(predictions, dataset.y)


def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
    return frame[METRICS_COLUMNS]


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    """Fixed column order and 6-decimal fixed point, for byte-stable diffs."""
    records_frame(records).to_csv(path, index=False, float_format="%.6f")


def read_metrics_csv(path) -> List[MetricsRecord]:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in METRICS_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing metrics column(s) {missing}")
    return [
        MetricsRecord(int(row.period), str(row.variant), float(row.auc), float(row.logloss), int(row.seed))
        for row in frame.itertuples(index=False)
    ]
