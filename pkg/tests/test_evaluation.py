import itertools

import numpy as np
import pandas as pd
import pytest

from conftest import tiny_config_dict
from src.backbones import count_forward_flops, forward, predict
from src.config import validate_config
from src.errors import ConfigError, DataError
from src.evaluation import (
    MetricsRecord,
    apply_variant,
    auc,
    compare_backbones,
    export_representations,
    inference_reads,
    logloss,
    plug_study,
    probe_domain_accuracy,
    read_metrics_csv,
    reset_reads,
    run_ablation,
    summarize,
    sweep,
    write_metrics_csv,
    write_representations,
)
from src.extractors import aggregate_sources, gate_weights, map_representation
from src.trainer import ce_loss, diit_step, mixed_for_period


class TestAuc:
    def test_known_values(self):
        assert auc([0.1, 0.9], [0, 1]) == 1.0
        assert auc([0.9, 0.1], [0, 1]) == 0.0
        assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_matches_pairwise_oracle(self, rng):
        scores = np.round(rng.random(200), 2)  # forces ties
        labels = (rng.random(200) < 0.3).astype(float)
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
        assert abs(auc(scores, labels) - wins / (pos.size * neg.size)) < 1e-12

    def test_matches_pairwise_oracle_on_many_small_instances(self, rng):
        checked = 0
        while checked < 200:
            n = int(rng.integers(2, 51))
            scores = rng.integers(0, 5, size=n) / 4.0
            labels = (rng.random(n) < 0.5).astype(float)
            pos, neg = scores[labels == 1], scores[labels == 0]
            if pos.size == 0 or neg.size == 0:
                continue
            wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
            assert auc(scores, labels) == wins / (pos.size * neg.size)
            checked += 1

    def test_invariant_to_monotone_transforms(self, rng):
        scores = rng.random(50)
        labels = (rng.random(50) < 0.5).astype(float)
        assert auc(scores, labels) == pytest.approx(auc(np.exp(3 * scores), labels), abs=1e-12)

    def test_reversed_scores(self, rng):
        scores = rng.random(40)
        labels = (rng.random(40) < 0.5).astype(float)
        assert auc(1.0 - scores, labels) == pytest.approx(1.0 - auc(scores, labels), abs=1e-12)

    def test_single_class(self):
        with pytest.raises(DataError):
            auc([0.2, 0.7], [1, 1])

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            auc([0.2, 0.7, 0.1], [1, 0])


def test_logloss_is_the_training_loss(rng):
    p = rng.uniform(0.01, 0.99, size=30)
    y = (rng.random(30) < 0.5).astype(float)
    assert logloss(p, y) == ce_loss(p, y)


def test_metrics_csv_layout(tmp_path):
    records = [MetricsRecord(0, "full", 0.7, 0.5, 0), MetricsRecord(1, "full", 0.71234567, 0.49, 0)]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "period,variant,seed,auc,logloss"
    assert lines[2] == "1,full,0,0.712346,0.490000"
    assert read_metrics_csv(path)[0] == records[0]


class TestVariants:
    def test_overrides(self, tiny_config):
        assert apply_variant(tiny_config, "base").plug_period == tiny_config.gen.num_periods
        assert apply_variant(tiny_config, "no-gating").hyper.use_gating is False
        no_adv = apply_variant(tiny_config, "no-adversarial").hyper
        assert no_adv.use_adversarial is False and no_adv.alpha == 0.0
        assert apply_variant(tiny_config, "no-middle").hyper.beta1 == 0.0
        assert apply_variant(tiny_config, "no-logit").hyper.beta2 == 0.0
        assert apply_variant(tiny_config, "only-src-2").active_sources == [1]

    def test_config_is_not_mutated(self, tiny_config):
        before = tiny_config.model_dump()
        for name in ("base", "no-gating", "no-adversarial", "no-middle", "no-logit", "only-src-1"):
            apply_variant(tiny_config, name)
        assert tiny_config.model_dump() == before

    @pytest.mark.parametrize("name", ["no-such-variant", "only-src-3", "only-src-0"])
    def test_unknown_variant(self, tiny_config, name):
        with pytest.raises(ConfigError):
            apply_variant(tiny_config, name)


class TestRunners:
    def test_ablation_rows(self, tiny_config, tiny_datasets):
        records = run_ablation(tiny_config, variants=["full", "base"], datasets=tiny_datasets)
        assert [(r.variant, r.period) for r in records] == [
            ("full", 0), ("full", 1), ("full", 2), ("base", 0), ("base", 1), ("base", 2)]

    def test_ablation_parallel_matches_serial(self, tiny_config, tiny_datasets):
        serial = run_ablation(tiny_config, variants=["full", "no-gating"], datasets=tiny_datasets, jobs=1)
        parallel = run_ablation(tiny_config, variants=["full", "no-gating"], datasets=tiny_datasets, jobs=3)
        assert serial == parallel

    def test_sweep_rows(self, tiny_config, tiny_datasets):
        records = sweep(tiny_config, param="tau", grid=[1.0, 10.0], datasets=tiny_datasets)
        assert len(records) == 2 * 3
        assert sorted({r.variant for r in records}) == ["tau=1", "tau=10"]

    def test_sweep_rejects_bad_values(self, tiny_config, tiny_datasets):
        with pytest.raises(ConfigError, match="tau"):
            sweep(tiny_config, param="tau", grid=[0.0], datasets=tiny_datasets)
        with pytest.raises(ConfigError):
            sweep(tiny_config, param="gamma", grid=[1.0], datasets=tiny_datasets)

    def test_plug_study_curves(self, tiny_config, tiny_datasets):
        records = plug_study(tiny_config, periods=[1], datasets=tiny_datasets)
        curves = {}
        for r in records:
            curves.setdefault(r.variant, []).append(r)
        assert sorted(curves) == ["base", "plug-1"]
        # identical until the plug period
        assert curves["plug-1"][0].auc == curves["base"][0].auc

    def test_plug_study_outside_horizon(self, tiny_config, tiny_datasets):
        with pytest.raises(ConfigError):
            plug_study(tiny_config, periods=[3], datasets=tiny_datasets)


    def test_compare_backbones_labels(self, tiny_config, tiny_datasets):
        records = compare_backbones(tiny_config, kinds=["dnn", "wd"], datasets=tiny_datasets)
        labels = list(dict.fromkeys(r.variant for r in records))
        assert labels == ["dnn-base", "dnn-diit", "wd-base", "wd-diit"]
        assert len(records) == 4 * 3


class TestSummarize:
    def test_means_and_stds(self):
        records = [
            MetricsRecord(0, "base", 0.70, 0.50, 0), MetricsRecord(1, "base", 0.72, 0.48, 0),
            MetricsRecord(0, "base", 0.74, 0.46, 1), MetricsRecord(1, "base", 0.76, 0.44, 1),
            MetricsRecord(0, "full", 0.75, 0.45, 0), MetricsRecord(1, "full", 0.77, 0.43, 0),
        ]
        summary = summarize(records).set_index("variant")
        assert summary.loc["base", "auc_mean"] == pytest.approx(0.73)
        assert summary.loc["base", "auc_std"] == pytest.approx(np.std([0.71, 0.75], ddof=1))
        assert summary.loc["full", "auc_std"] == 0.0
        assert summary.loc["full", "seeds"] == 1
        assert summary.loc["full", "auc_delta"] == pytest.approx(0.03)

    def test_empty(self):
        with pytest.raises(DataError):
            summarize([])


class TestRepresentations:
    @pytest.fixture
    def trained(self, plugged_state, tiny_config, tiny_datasets):
        mixed = mixed_for_period(plugged_state, tiny_config, tiny_datasets)
        target = tiny_datasets[(2, 0)]
        for start in range(0, 64, 16):
            index = np.arange(start, start + 16)
            diit_step(plugged_state, target.subset(index), mixed.subset(index), tiny_config.hyper)
        return plugged_state, mixed

    def test_pre_mapper_is_the_gated_aggregate(self, trained):
        state, mixed = trained
        frame = export_representations(state, mixed, "pre-mapper")
        outs = [forward(s, mixed) for s in state.active_sources]
        g = gate_weights(state.gating, forward(state.target, mixed).representation)
        expected, _ = aggregate_sources([o.representation for o in outs], [o.logits for o in outs], g)
        assert len(frame) == len(mixed)
        np.testing.assert_allclose(frame.drop(columns="d").to_numpy(), expected, atol=1e-12)
        np.testing.assert_array_equal(frame["d"].to_numpy(), mixed.d.astype(int))

    def test_post_mapper_applies_the_mapper(self, trained):
        state, mixed = trained
        pre = export_representations(state, mixed, "pre-mapper").drop(columns="d").to_numpy()
        post = export_representations(state, mixed, "post-mapper").drop(columns="d").to_numpy()
        np.testing.assert_allclose(post, map_representation(state.mapper, pre), atol=1e-12)

    def test_unknown_stage(self, trained):
        state, mixed = trained
        with pytest.raises(ConfigError):
            export_representations(state, mixed, "mid-mapper")

    def test_csv_round_trip_keeps_full_precision(self, trained, tmp_path):
        state, mixed = trained
        frame = export_representations(state, mixed, "post-mapper")
        write_representations(frame, tmp_path / "reprs.csv")
        loaded = pd.read_csv(tmp_path / "reprs.csv", float_precision="round_trip")
        np.testing.assert_array_equal(loaded.to_numpy(), frame.to_numpy())


class TestProbe:
    def test_separable_domains(self, rng):
        d = (rng.random(400) < 0.5).astype(float)
        x = rng.normal(size=(400, 3)) + 4.0 * d[:, None]
        assert probe_domain_accuracy(x, d, seed=1) > 0.95

    def test_deterministic(self, rng):
        d = (rng.random(100) < 0.5).astype(float)
        x = rng.normal(size=(100, 3))
        assert probe_domain_accuracy(x, d, seed=2) == probe_domain_accuracy(x, d, seed=2)

    def test_mismatched_inputs(self):
        with pytest.raises(DataError):
            probe_domain_accuracy(np.zeros((5, 2)), np.zeros(4))


def test_inference_touches_only_the_target(plugged_state, tiny_datasets):
    reset_reads(plugged_state)
    data = tiny_datasets[(2, 1)]
    predict(plugged_state.target, data)
    assert set(inference_reads(plugged_state).values()) == {0}
    assert plugged_state.target.flops == count_forward_flops(plugged_state.target, len(data))


def test_zero_weights_run_like_base(tiny_datasets):
    config = validate_config(tiny_config_dict(hyper={"alpha": 0.0, "beta1": 0.0, "beta2": 0.0}))
    records = run_ablation(config, variants=["full", "base"], datasets=tiny_datasets)
    full = [(r.period, r.auc, r.logloss) for r in records if r.variant == "full"]
    base = [(r.period, r.auc, r.logloss) for r in records if r.variant == "base"]
    assert full == base
