"""
Desk-scale experiments on the shipped configuration. They take minutes, so
they only run with ``pytest -m slow``.
"""
from pathlib import Path

import pytest

from src.config import parse_config
from src.datagen import generate_all
from src.evaluation import export_representations, probe_domain_accuracy, run_ablation, summarize
from src.trainer import mixed_for_period, run_incremental

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="module")
def default_config():
    return parse_config(str(ROOT / "configs" / "default.json"))


@pytest.fixture(scope="module")
def default_datasets(default_config):
    return generate_all(default_config.gen, default_config.feature_schema, jobs=4)


@pytest.fixture(scope="module")
def ablation_summary(default_config, default_datasets):
    records = run_ablation(default_config, datasets=default_datasets, jobs=4)
    return summarize(records).set_index("variant")


def test_transfer_beats_fine_tuning(ablation_summary):
    assert ablation_summary.loc["full", "auc_delta"] >= 0.005


def test_ablation_ordering(ablation_summary):
    full = ablation_summary.loc["full", "auc_mean"]
    others = ["no-gating", "no-adversarial", "no-middle", "no-logit", "only-src-1", "only-src-2"]
    assert sum(full >= ablation_summary.loc[name, "auc_mean"] for name in others) >= 4
    base = ablation_summary.loc["base", "auc_mean"]
    assert all(ablation_summary.loc[name, "auc_mean"] >= base for name in others + ["full"])


def test_mapper_aligns_domains(default_config, default_datasets):
    # a discriminator kept near its optimum is what lets the confusion loss pull the domains together
    hyper = default_config.hyper.model_copy(update={"alpha": 1.0, "dis_steps": 5, "epochs_per_period": 3})
    config = default_config.model_copy(update={"hyper": hyper}, deep=True)
    datasets = default_datasets
    state = run_incremental(config, seed=0, datasets=datasets, jobs=4).state
    mixed = mixed_for_period(state, config, datasets)

    accuracy = {}
    for stage in ("pre-mapper", "post-mapper"):
        frame = export_representations(state, mixed, stage, config.hyper)
        accuracy[stage] = probe_domain_accuracy(frame.drop(columns="d").to_numpy(), frame["d"].to_numpy())
    assert accuracy["pre-mapper"] > 0.55
    assert 0.45 <= accuracy["post-mapper"] <= 0.55
