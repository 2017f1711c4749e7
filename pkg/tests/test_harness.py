import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.checkpoint import read_checkpoint
from forge.describe import retrieval_eval
from forge.harness.ab import PRESETS, ab_compare, apply_overrides
from forge.harness.config import ConfigError, ExperimentConfig, config_hash, dumps, from_dict, load_config, loads, to_dict
from forge.harness.data import EVAL_STREAM, crop_pairs, detection_sets
from forge.harness.evaluate import (
    descriptor_embed_fn,
    detection_metrics,
    evaluate,
    load_models,
    random_embed_fn,
)
from forge.harness.train import build_adapt_model, build_descriptor, smoothed, train_descriptor, train_detector
from forge.track import oracle_detections
from tiny import tiny_config


def files_equal(a, b):
    return a.read_bytes() == b.read_bytes()


class TestConfig:
    def test_default_round_trip(self):
        cfg = ExperimentConfig()
        assert loads(dumps(cfg)) == cfg

    @settings(max_examples=40, deadline=None)
    @given(
        lr=st.floats(1e-6, 1.0),
        steps=st.integers(0, 10_000),
        seed=st.integers(0, 2**31),
        alpha=st.floats(0.0, 5.0),
        gamma=st.floats(0.2, 4.0),
        haze=st.floats(0.0, 1.0),
        stages=st.lists(st.integers(0, 2), min_size=1, max_size=3, unique=True),
        adapt=st.booleans(),
    )
    def test_round_trip(self, lr, steps, seed, alpha, gamma, haze, stages, adapt):
        data = to_dict(ExperimentConfig())
        data["optimizer"].update(learning_rate=lr, steps=steps, seed=seed)
        data["mars"].update(alpha_channel=alpha, stages=stages)
        data["datagen"]["target_shift"].update(gamma=gamma, haze=haze)
        data["ablation"]["adapt_enabled"] = adapt
        cfg = from_dict(ExperimentConfig, data)
        again = loads(dumps(cfg))
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_unknown_top_level_field(self):
        with pytest.raises(ConfigError, match="bogus"):
            loads("bogus: 1\n")

    def test_unknown_nested_field(self):
        with pytest.raises(ConfigError, match="optimizer.lr"):
            loads("optimizer:\n  lr: 0.1\n")

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            loads("optimizer:\n  learning_rate: -1.0\n")

    def test_partial_file_takes_defaults(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("optimizer:\n  steps: 7\n", encoding="utf-8")
        cfg = load_config(p)
        assert cfg.optimizer.steps == 7 and cfg.descriptor_optimizer == ExperimentConfig().descriptor_optimizer

    def test_none_path_is_default(self):
        assert load_config(None) == ExperimentConfig()

    def test_with_seed_copies(self):
        base = ExperimentConfig()
        cfg = base.with_seed(5)
        assert cfg.optimizer.seed == cfg.descriptor_optimizer.seed == 5
        assert base.optimizer.seed == 0
        assert config_hash(cfg) != config_hash(base)

    def test_overrides(self):
        cfg = apply_overrides(ExperimentConfig(), {"adapt.w_global": 0.25, "ablation.mars_enabled": False})
        assert cfg.adapt.w_global == 0.25 and not cfg.ablation.mars_enabled
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), {"adapt.nope": 1})
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), {"nope.w_global": 1})


class TestTraining:
    def test_detector_zero_steps_is_initial(self, tmp_path):
        cfg = tiny_config()
        cfg.optimizer.steps = 0
        report, _ = train_detector(cfg, tmp_path)
        assert report.records == []
        params, _ = read_checkpoint(tmp_path / "checkpoint")
        init = build_adapt_model(cfg, 0).state_dict()
        assert set(params) == set(init)
        for k, v in init.items():
            np.testing.assert_array_equal(params[k], v.numpy())
        assert not (tmp_path / "checkpoints").exists()

    def test_descriptor_zero_steps_is_initial(self, tmp_path):
        cfg = tiny_config()
        cfg.descriptor_optimizer.steps = 0
        report, _ = train_descriptor(cfg, tmp_path)
        assert report.records == []
        params, _ = read_checkpoint(tmp_path / "checkpoint")
        for k, v in build_descriptor(cfg, 0).state_dict().items():
            np.testing.assert_array_equal(params[k], v.numpy())

    def test_detector_deterministic(self, tmp_path):
        cfg = tiny_config(3)
        r1, _ = train_detector(cfg, tmp_path / "a")
        r2, _ = train_detector(cfg, tmp_path / "b")
        assert r1.records == r2.records
        for name in ("params.bin", "manifest.json"):
            assert files_equal(tmp_path / "a" / "checkpoint" / name, tmp_path / "b" / "checkpoint" / name)

    def test_descriptor_deterministic(self, tmp_path):
        cfg = tiny_config(4)
        r1, _ = train_descriptor(cfg, tmp_path / "a")
        r2, _ = train_descriptor(cfg, tmp_path / "b")
        assert r1.records == r2.records
        for name in ("params.bin", "manifest.json"):
            assert files_equal(tmp_path / "a" / "checkpoint" / name, tmp_path / "b" / "checkpoint" / name)

    def test_periodic_checkpoints(self, tmp_path):
        cfg = tiny_config()
        cfg.optimizer.checkpoint_every = 2
        train_detector(cfg, tmp_path)
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000002", "step_000004"]

    def test_adapt_zero_weights_equals_supervised_only(self):
        cfg = tiny_config(1)
        cfg.optimizer.steps = 6
        data = detection_sets(cfg, 1)
        off = cfg.with_seed(1)
        off.ablation.adapt_enabled = False
        zero = cfg.with_seed(1)
        zero.adapt.w_global = zero.adapt.w_reg = zero.adapt.w_vsa_adv = zero.adapt.w_vsa_con = 0.0
        r_off, m_off = train_detector(off, data=data)
        r_zero, m_zero = train_detector(zero, data=data)
        assert [r["total"] for r in r_off.records] == [r["total"] for r in r_zero.records]
        assert [r["supervised"] for r in r_off.records] == [r["supervised"] for r in r_zero.records]
        for (k, a), (_, b) in zip(m_off.state_dict().items(), m_zero.state_dict().items()):
            assert torch.equal(a, b), k

    def test_mars_off_equals_zero_alphas(self):
        cfg = tiny_config(2)
        cfg.descriptor_optimizer.steps = 6
        pairs = crop_pairs(cfg, 2, 0, cfg.pairs.train_worlds)
        off = cfg.with_seed(2)
        off.ablation.mars_enabled = False
        zero = cfg.with_seed(2)
        zero.mars.alpha_channel = zero.mars.alpha_spatial = 0.0
        r_off, m_off = train_descriptor(off, pairs=pairs)
        r_zero, m_zero = train_descriptor(zero, pairs=pairs)
        assert [r["total"] for r in r_off.records] == [r["total"] for r in r_zero.records]
        assert [r["ntxent"] for r in r_off.records] == [r["ntxent"] for r in r_zero.records]
        for (k, a), (_, b) in zip(m_off.state_dict().items(), m_zero.state_dict().items()):
            assert torch.equal(a, b), k

    def test_detector_smoothed_loss_decreases(self):
        # 200 steps on 64 source samples; the 25-step trailing mean must fall
        # over both halves of the run in the median over three seeds
        drops = []
        for seed in range(3):
            cfg = tiny_config(seed)
            cfg.datagen.image_size = 128
            cfg.datagen.n_source = 64
            cfg.datagen.n_target = 0
            cfg.evaluation.n_source = cfg.evaluation.n_target = 0
            cfg.ablation.adapt_enabled = False
            cfg.optimizer.steps = 200
            cfg.optimizer.batch_size = 8
            report, _ = train_detector(cfg)
            s = smoothed([r["supervised"] for r in report.records])
            drops.append(min(s[24] - s[99], s[99] - s[-1]))
            assert all(math.isfinite(r["supervised"]) for r in report.records)
        assert np.median(drops) > 0

    def test_descriptor_smoothed_loss_decreases(self):
        cfg = tiny_config(0)
        cfg.pairs.train_worlds = 40
        cfg.descriptor_optimizer.steps = 150
        cfg.descriptor_optimizer.batch_size = 16
        report, _ = train_descriptor(cfg)
        s = smoothed([r["total"] for r in report.records])
        assert s[-1] < s[24]

    def test_smoothed_window(self):
        np.testing.assert_allclose(smoothed([1.0, 3.0, 5.0], window=2), [1.0, 2.0, 4.0])


class TestEvaluation:
    def test_oracle_detections_perfect(self):
        cfg = tiny_config()
        _, _, es, et = detection_sets(cfg, 0)
        for samples in (es, et):
            m = detection_metrics([oracle_detections(s) for s in samples], samples)
            assert m == {"recall": 1.0, "precision": 1.0}

    def test_random_descriptor_at_permutation_baseline(self):
        # random appearance codes carry no identity; their recall@1 must sit
        # inside the spread of recall@1 under random relabelings of the gallery
        cfg = ExperimentConfig()
        pairs = crop_pairs(cfg, 0, EVAL_STREAM, cfg.pairs.eval_worlds)
        ids = np.concatenate([pairs.ids, pairs.ids])
        z = random_embed_fn(64, 11)(None, [None] * len(ids))
        observed = retrieval_eval(ids, z)["recall@1"]
        rng = np.random.default_rng(0)
        fixed = rng.normal(size=z.shape)
        null = [retrieval_eval(rng.permutation(ids), fixed)["recall@1"] for _ in range(300)]
        assert abs(observed - np.mean(null)) <= 3 * np.std(null) + 1e-12

    def test_evaluation_is_pure_and_repeatable(self, tmp_path):
        cfg = tiny_config()
        train_detector(cfg, tmp_path / "det")
        train_descriptor(cfg, tmp_path / "desc")
        before = {p: p.read_bytes() for p in tmp_path.rglob("params.bin")}
        det, desc = load_models(cfg, tmp_path / "det" / "checkpoint", tmp_path / "desc" / "checkpoint")
        states = [{k: v.clone() for k, v in m.state_dict().items()} for m in (det, desc)]
        m1 = evaluate(cfg, det, desc).metrics
        m2 = evaluate(cfg, det, desc).metrics
        assert m1 == m2
        for m, s in zip((det, desc), states):
            for k, v in m.state_dict().items():
                assert torch.equal(v, s[k])
        assert {p: p.read_bytes() for p in tmp_path.rglob("params.bin")} == before
        for key in ("target_recall@IoU0.5", "source_recall@IoU0.5", "recall@1", "recall@5"):
            assert 0.0 <= m1[key] <= 1.0
        assert -1.0 <= m1["mean_attention_consistency"] <= 1.0
        assert m1["tracking_identity_switches"] >= 0

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_models(tiny_config(), tmp_path / "nope")

    def test_needs_a_model(self):
        with pytest.raises(ValueError):
            evaluate(tiny_config())

    def test_descriptor_embed_fn_shapes(self):
        cfg = tiny_config()
        model = build_descriptor(cfg, 0)
        _, _, es, _ = detection_sets(cfg, 0)
        dets = oracle_detections(es[0])
        z = descriptor_embed_fn(model)(es[0].image, dets)
        assert z.shape == (len(dets), cfg.mars.embed_dim)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)
        assert model.training  # eval mode is restored afterwards


class TestAB:
    def test_identical_variants_zero_delta(self, tmp_path):
        cfg = tiny_config()
        summary = ab_compare(cfg, {"x": {}, "y": {}}, "detector", seed=0, num_seeds=2, out_dir=tmp_path)
        assert summary["seeds"] == [0, 1]
        assert all(v == 0.0 for v in summary["deltas"]["y"].values())
        for name in ("ab_runs.jsonl", "ab_summary.json", "loss_curves.png", "metrics.png"):
            assert (tmp_path / name).stat().st_size > 0
        lines = (tmp_path / "ab_runs.jsonl").read_text().splitlines()
        assert len(lines) == 4 and {json.loads(x)["variant"] for x in lines} == {"x", "y"}

    def test_descriptor_kind(self):
        summary = ab_compare(tiny_config(), PRESETS["mars"], "descriptor", num_seeds=1)
        assert set(summary["deltas"]["mars"]) >= {"recall@1", "mean_attention_consistency"}

    def test_errors(self):
        with pytest.raises(ValueError):
            ab_compare(tiny_config(), {}, "detector")
        with pytest.raises(ValueError):
            ab_compare(tiny_config(), {"x": {}}, "neither", num_seeds=1)
