"""Harness tests: metrics aggregation, config parsing, the training loop,
the seen/unseen robustness protocol, the shortcut probe, RL sampler
training, and artifact writers."""

import json
import warnings
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import causalvqa.harness as hn
import causalvqa.nn_core as nc
import causalvqa.samplers as sm
from causalvqa.features import Qtype, SyntheticSpec, generate_synthetic
from causalvqa.harness import (
    AdamState,
    BankConfig,
    ConfigError,
    DataConfig,
    ExperimentConfig,
    MetricsReport,
    ModelConfig,
    OptimizerConfig,
    adam_step,
    evaluate,
    load_checkpoint,
    load_data,
    parse_experiment_config,
    resolve_output_dir,
    save_checkpoint,
    seen_unseen_protocol,
    shortcut_probe,
    train,
    write_curves,
    write_metrics,
)
from causalvqa.intervention import (
    InterventionConfig,
    MemorySource,
    build_triplet_cached,
    gate_forward,
)
from causalvqa.mnse import (
    MemoryBank,
    Metric,
    Regime,
    Target,
    instance_scenes,
    mnse_do,
)
from causalvqa.pcma import PcmaModel


def small_model(seed: int = 3, video_dim: int = 24, text_dim: int = 24) -> PcmaModel:
    cfg = ModelConfig(model_dim=32, n_heads=4, n_layers=1, seed=seed)
    return PcmaModel(cfg.pcma(video_dim, text_dim))


def synth(n: int, seed: int = 0, **kw) -> tuple:
    defaults = dict(n_clips=8, video_dim=24, text_dim=24, noise_std=0.1)
    defaults.update(kw)
    return generate_synthetic(SyntheticSpec(n_instances=n, seed=seed, **defaults))


# -- metrics ---------------------------------------------------------------------


class TestMetricsReport:
    def test_overall_is_count_weighted_mean(self):
        rep = MetricsReport(
            counts={"causal": 4, "temporal": 2, "descriptive": 4},
            corrects={"causal": 3, "temporal": 1, "descriptive": 0},
        )
        assert rep.overall == pytest.approx(4 / 10)
        assert rep.acc_causal == pytest.approx(3 / 4)
        assert rep.acc_temporal == pytest.approx(1 / 2)
        assert rep.acc_descriptive == 0.0

    @given(
        counts=st.lists(st.integers(min_value=0, max_value=50), min_size=3, max_size=3),
        data=st.data(),
    )
    @settings(max_examples=100, deadline=None)
    def test_recount_identity_exact(self, counts, data):
        corrects = [data.draw(st.integers(min_value=0, max_value=c)) for c in counts]
        names = ("causal", "temporal", "descriptive")
        rep = MetricsReport(
            counts=dict(zip(names, counts)), corrects=dict(zip(names, corrects))
        )
        if sum(counts) == 0:
            with pytest.raises(ValueError):
                rep.overall
            return
        # overall is the exact count ratio; the count-weighted mean of the
        # per-type accuracies equals the same rational number
        assert rep.overall == sum(corrects) / sum(counts)
        weighted = sum(
            Fraction(c) * Fraction(k, c) for c, k in zip(counts, corrects) if c
        )
        assert weighted / sum(counts) == Fraction(sum(corrects), sum(counts))
        for name, c, k in zip(names, counts, corrects):
            if c == 0:
                assert rep.acc(name) is None
            else:
                assert rep.acc(name) == k / c

    def test_absent_type_is_none_never_zero(self):
        rep = MetricsReport(counts={"causal": 1}, corrects={"causal": 1})
        assert rep.acc_temporal is None
        assert rep.acc_descriptive is None
        assert rep.overall == 1.0
        d = rep.to_dict()
        assert d["acc_temporal"] is None and d["acc_causal"] == 1.0

    def test_corrects_beyond_counts_rejected(self):
        with pytest.raises(ValueError):
            MetricsReport(counts={"causal": 1}, corrects={"causal": 2})

    def test_to_dict_round_trips_through_json(self):
        rep = MetricsReport(counts={"causal": 2}, corrects={"causal": 1})
        parsed = json.loads(json.dumps(rep.to_dict()))
        assert parsed["overall"] == 0.5


class TestEvaluate:
    def test_untrained_model_scores_at_chance(self):
        instances, _, _ = synth(2000, seed=42)
        rep = evaluate(small_model(seed=3), instances)
        assert 0.17 <= rep.overall <= 0.23

    def test_single_causal_instance_report(self):
        instances, _, _ = synth(1, seed=22)
        assert instances[0].qtype is Qtype.CAUSAL
        rep = evaluate(small_model(seed=3), instances)
        assert rep.overall == 1.0
        assert rep.acc_causal == 1.0
        assert rep.acc_temporal is None
        assert rep.acc_descriptive is None

    def test_video_override_with_originals_is_identity(self):
        instances, _, _ = synth(20, seed=7)
        model = small_model()
        base = evaluate(model, instances)
        same = evaluate(model, instances, [i.video for i in instances])
        assert base.counts == same.counts and base.corrects == same.corrects


# -- config parsing ----------------------------------------------------------------


class TestConfigParsing:
    def test_minimal_config_parses(self):
        cfg = parse_experiment_config(
            {"data": {"synthetic": {"n_instances": 4, "video_dim": 8, "text_dim": 8}}}
        )
        assert cfg.data.synthetic.n_instances == 4
        assert cfg.intervention is None
        assert not cfg.contrastive

    def test_all_invalid_fields_reported_together(self):
        raw = {
            "data": {"synthetic": {"n_instances": 4, "video_dim": 0}},
            "optimizer": {"lr": -1.0, "batch_size": 0},
            "bank": {"regime": "f9"},
            "intervention": {"memory_source": "warp"},
        }
        with pytest.raises(ConfigError) as err:
            parse_experiment_config(raw)
        text = str(err.value)
        assert "data.synthetic" in text
        assert "lr must be finite and nonnegative" in text
        assert "batch_size must be >= 1" in text
        assert "bank.regime" in text
        assert "intervention.memory_source" in text
        assert len(err.value.problems) >= 4

    def test_enum_strings_coerced(self):
        cfg = parse_experiment_config(
            {
                "data": {"synthetic": {"n_instances": 2, "video_dim": 8, "text_dim": 8}},
                "intervention": {"memory_source": "mnse", "beta_cl": 0.5},
                "bank": {"regime": "f1", "metric": "l2"},
            }
        )
        assert cfg.intervention.memory_source is MemorySource.MNSE
        assert cfg.bank.regime is Regime.F1_STATIC
        assert cfg.bank.metric is Metric.L2
        assert cfg.contrastive

    def test_data_section_required(self):
        with pytest.raises(ConfigError) as err:
            parse_experiment_config({})
        assert any("data" in p for p in err.value.problems)


# -- optimizer ---------------------------------------------------------------------


class TestAdam:
    def test_gradient_step_moves_against_gradient(self):
        store = nc.ParamStore(seed=0)
        store.add_zeros("w", (3,))
        store.accumulate("w", np.array([1.0, -2.0, 0.0]))
        adam_step(store, AdamState(), OptimizerConfig(lr=0.1))
        w = store["w"]
        assert w[0] < 0 and w[1] > 0 and w[2] == 0.0

    def test_lr_zero_keeps_params_bit_identical(self):
        store = nc.ParamStore(seed=0)
        store.add_zeros("w", (3,))
        store.set_("w", np.array([0.5, -1.5, 2.0]))
        before = store["w"].copy()
        store.accumulate("w", np.array([10.0, 10.0, 10.0]))
        adam_step(store, AdamState(), OptimizerConfig(lr=0.0))
        assert store["w"].tobytes() == before.tobytes()

    def test_optimizer_config_reports_all_problems(self):
        with pytest.raises(ValueError) as err:
            OptimizerConfig(lr=-1.0, batch_size=0)
        assert "lr" in str(err.value) and "batch_size" in str(err.value)


# -- training ---------------------------------------------------------------------


def erm_config(instances_seed=0, n=60, steps=40, lr=1e-3, opt_seed=1, **data_kw):
    spec = SyntheticSpec(
        n_instances=n, seed=instances_seed, n_clips=8, video_dim=24, text_dim=24,
        noise_std=data_kw.pop("noise_std", 0.1), **data_kw,
    )
    return ExperimentConfig(
        data=DataConfig(synthetic=spec),
        model=ModelConfig(model_dim=32, n_heads=4, n_layers=1, seed=5),
        optimizer=OptimizerConfig(lr=lr, steps=steps, batch_size=8, seed=opt_seed),
    )


GATE_RECIPE = ExperimentConfig(
    data=DataConfig(
        synthetic=SyntheticSpec(
            n_instances=80, seed=0, n_clips=8, video_dim=24, text_dim=24, noise_std=0.1
        )
    ),
    model=ModelConfig(model_dim=32, n_heads=4, n_layers=1, seed=10),
    optimizer=OptimizerConfig(lr=1e-3, steps=100, batch_size=8, seed=0),
    intervention=InterventionConfig(
        alpha=2.0,
        beta_cl=0.2,
        n_negatives=3,
        memory_source=MemorySource.RANDOM_BANK,
        topk_mode=True,
        k=4,
        neighbor_k=5,
        seed=7,
    ),
    bank=BankConfig(regime=Regime.F2_DYNAMIC),
)


@pytest.fixture(scope="module")
def gate_run():
    result = train(GATE_RECIPE)
    instances, _, masks = load_data(GATE_RECIPE.data)
    return result, instances, np.asarray(masks, dtype=bool)


class TestTrain:
    def test_erm_training_learns(self):
        result = train(erm_config())
        assert result.report.overall > 0.5
        curves = result.report.curves
        assert len(curves) == 40
        assert curves[-1].erm_loss < curves[0].erm_loss
        assert all(r.cl_loss == 0.0 for r in curves)

    def test_lr_zero_control(self):
        cfg = erm_config(steps=5, lr=0.0)
        instances, _, _ = load_data(cfg.data)
        init_model = PcmaModel(cfg.model.pcma(24, 24))
        init_acc = evaluate(init_model, instances).overall
        result = train(cfg)
        for name in init_model.store.names():
            assert (
                result.model.store[name].tobytes() == init_model.store[name].tobytes()
            )
        assert result.report.overall == init_acc

    def test_same_config_same_curves(self):
        c1 = train(erm_config(steps=8)).report.curves
        c2 = train(erm_config(steps=8)).report.curves
        assert c1 == c2

    def test_total_combines_erm_and_cl_exactly(self, gate_run):
        result, _, _ = gate_run
        beta = GATE_RECIPE.intervention.beta_cl
        for row in result.report.curves:
            assert row.total_loss == row.erm_loss + beta * row.cl_loss
        assert any(row.cl_loss != 0.0 for row in result.report.curves)

    def test_beta_zero_matches_plain_erm_bit_exactly(self):
        plain = train(erm_config(steps=10))
        gated = replace(
            erm_config(steps=10),
            intervention=InterventionConfig(
                beta_cl=0.0, memory_source=MemorySource.MNSE, topk_mode=True, k=4
            ),
        )
        with_cfg = train(gated)
        assert plain.report.curves == with_cfg.report.curves
        for name in plain.model.store.names():
            assert (
                plain.model.store[name].tobytes()
                == with_cfg.model.store[name].tobytes()
            )

    def test_joint_training_separates_gates(self, gate_run):
        result, instances, masks = gate_run
        gaps = []
        for inst, mask in zip(instances, masks):
            gates, _ = gate_forward(
                result.model,
                inst.video.astype(np.float64),
                inst.question.astype(np.float64),
            )
            gaps.append(gates[mask].mean() - gates[~mask].mean())
        assert float(np.mean(gaps)) > 0.01

    def test_trained_triplets_separate_positive_from_negatives(self, gate_run):
        result, instances, masks = gate_run
        icfg = GATE_RECIPE.intervention
        rng = np.random.default_rng(0)
        margins = []
        for inst, mask in zip(instances[:10], masks[:10]):
            from causalvqa.intervention import CausalSplit

            split = CausalSplit(mask=mask, gates=mask.astype(np.float64))
            triplet, _ = build_triplet_cached(
                result.model,
                inst.video.astype(np.float64),
                inst.question.astype(np.float64),
                split,
                result.bank,
                instances[0].question.astype(np.float64),
                icfg,
                rng,
                exclude_video_id=inst.video_id,
            )

            def cos(a, b):
                return float(
                    a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
                )

            pos = cos(triplet.anchor, triplet.positive)
            negs = np.mean([cos(triplet.anchor, n) for n in triplet.negatives])
            margins.append(pos - negs)
        assert float(np.mean(margins)) > 0.0

    def test_non_finite_loss_aborts_with_step(self):
        cfg = replace(
            erm_config(n=8, steps=5),
            optimizer=OptimizerConfig(lr=1e155, steps=5, batch_size=4, seed=0),
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with np.errstate(all="ignore"):
                with pytest.raises(nc.NumericsError, match=r"^step \d+:"):
                    train(cfg)

    def test_checkpoint_round_trip(self, tmp_path):
        result = train(erm_config(steps=6))
        out = save_checkpoint(result.model, tmp_path / "ckpt")
        assert out == tmp_path / "ckpt"
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.cfg == result.model.cfg
        # at-rest precision is f32; a second round trip must be lossless
        save_checkpoint(loaded, tmp_path / "ckpt2")
        loaded2 = load_checkpoint(tmp_path / "ckpt2")
        for name in loaded.store.names():
            assert loaded.store[name].tobytes() == loaded2.store[name].tobytes()
            assert np.allclose(
                result.model.store[name], loaded.store[name], atol=1e-6, rtol=1e-6
            )
        instances, _, _ = load_data(erm_config().data)
        r1 = evaluate(loaded, instances)
        r2 = evaluate(loaded2, instances)
        assert r1.corrects == r2.corrects


# -- robustness protocol -----------------------------------------------------------


class TestProtocol:
    def test_all_causal_masks_are_no_ops(self):
        instances, _, _ = synth(25, seed=3)
        masks = np.ones((25, 8), dtype=bool)
        bank = MemoryBank(24, metric=Metric.COSINE, regime=Regime.F1_STATIC)
        bank.populate(instance_scenes(instances)).freeze()
        model_a, model_b = small_model(seed=1), small_model(seed=2)
        proto = seen_unseen_protocol(model_a, model_b, instances, masks, bank)
        clean_a, clean_b = proto.clean
        for pair in (proto.seen, proto.unseen):
            assert pair[0].corrects == clean_a.corrects
            assert pair[1].corrects == clean_b.corrects
        assert all(v == 0.0 for v in proto.deltas.values())

    def test_self_replacement_leaves_accuracy_clean(self):
        instances, _, masks = synth(10, seed=4)
        model = small_model(seed=1)
        clean = evaluate(model, instances)
        videos = []
        for inst, mask in zip(instances, np.asarray(masks, dtype=bool)):
            bank = MemoryBank(24, metric=Metric.COSINE, regime=Regime.F1_STATIC)
            bank.populate(instance_scenes([inst])).freeze()
            videos.append(
                mnse_do(inst.video, mask, bank, Target.COMPLEMENT, k=1, seed=9)
            )
            assert np.array_equal(videos[-1], inst.video.astype(np.float64))
        replaced = evaluate(model, instances, videos)
        assert replaced.corrects == clean.corrects

    def test_protocol_requires_populated_bank(self):
        instances, _, masks = synth(4, seed=5)
        model = small_model()
        with pytest.raises(ValueError):
            seen_unseen_protocol(model, model, instances, np.asarray(masks), None)
        empty = MemoryBank(24, metric=Metric.COSINE, regime=Regime.F1_STATIC)
        with pytest.raises(ValueError):
            seen_unseen_protocol(model, model, instances, np.asarray(masks), empty)

    def test_protocol_deterministic(self):
        instances, _, masks = synth(12, seed=6)
        bank = MemoryBank(24, metric=Metric.COSINE, regime=Regime.F1_STATIC)
        bank.populate(instance_scenes(instances)).freeze()
        model_a, model_b = small_model(seed=1), small_model(seed=2)
        p1 = seen_unseen_protocol(
            model_a, model_b, instances, np.asarray(masks), bank, seed=3, neighbor_k=2
        )
        p2 = seen_unseen_protocol(
            model_a, model_b, instances, np.asarray(masks), bank, seed=3, neighbor_k=2
        )
        assert p1.deltas == p2.deltas

    def test_robustness_experiment_requires_intervention(self):
        with pytest.raises(ValueError):
            hn.robustness_experiment(erm_config(), seeds=[0])

    def test_reseeded_offsets_every_seed(self):
        cfg = erm_config()
        shifted = hn._reseeded(cfg, 5)
        assert shifted.data.synthetic.seed == cfg.data.synthetic.seed + 5
        assert shifted.model.seed == cfg.model.seed + 5
        assert shifted.optimizer.seed == cfg.optimizer.seed + 5


# -- shortcut probe ----------------------------------------------------------------


class TestShortcutProbe:
    def test_leaky_data_exposes_shortcut(self):
        instances, _, _ = synth(
            300, seed=9, n_clips=16, video_dim=64, text_dim=64, leak_strength=0.9
        )
        assert shortcut_probe(instances).overall > 0.5

    def test_clean_data_scores_at_chance(self):
        instances, _, _ = synth(1000, seed=9, n_clips=16, video_dim=64, text_dim=64)
        assert 0.17 <= shortcut_probe(instances).overall <= 0.23

    def test_positive_answer_rescale_is_invariant(self):
        instances, _, _ = synth(50, seed=12)
        base = shortcut_probe(instances)
        scaled = [
            replace(inst, answers=(7.5 * inst.answers).astype(np.float32))
            for inst in instances
        ]
        assert shortcut_probe(scaled).corrects == base.corrects


# -- RL sampler training -----------------------------------------------------------


class TestRlTraining:
    def test_empty_selection_costs_uniform_guess(self):
        instances, _, _ = synth(1, seed=2, video_dim=16, text_dim=16)
        model = PcmaModel(
            ModelConfig(model_dim=16, n_heads=2, n_layers=1, seed=4).pcma(16, 16)
        )
        assert hn._pred_loss(model, instances[0], []) == pytest.approx(np.log(5))

    def test_rl_training_runs_without_divergence(self):
        instances, _, _ = synth(12, seed=2, video_dim=16, text_dim=16)
        backbone = PcmaModel(
            ModelConfig(model_dim=16, n_heads=2, n_layers=1, seed=4).pcma(16, 16)
        )
        sampler = sm.RlSampler(
            sm.RlConfig(
                video_dim=16, text_dim=16, n_frames=8, model_dim=16,
                hidden_dim=16, n_heads=2, max_steps=8, gamma=0.5, seed=5,
            )
        )
        result = hn.rl_train(
            backbone, sampler, instances, episodes=40,
            opt=OptimizerConfig(lr=1e-3, steps=0, batch_size=1, seed=3),
        )
        assert len(result.rewards) == 40
        assert np.isfinite(result.rewards).all()
        assert 0.0 <= result.mean_selected_fraction <= 1.0
        assert np.isfinite(result.mean_pred_loss)
        assert np.isfinite(result.all_frames_loss)


# -- artifacts ---------------------------------------------------------------------


class TestArtifacts:
    def test_write_metrics_versioned_sorted(self, tmp_path):
        path = write_metrics({"b": 1, "a": 2}, tmp_path / "metrics.json")
        body = path.read_text()
        assert body.endswith("\n")
        parsed = json.loads(body)
        assert parsed["version"] == 1
        assert list(parsed) == sorted(parsed)

    def test_write_curves_round_trips_floats_exactly(self, tmp_path):
        rows = [
            hn.CurveRow(0, 1.0 / 3.0, 0.1 + 0.2, 2.0),
            hn.CurveRow(1, 5e-324, 1e308, 0.0),
        ]
        path = write_curves(rows, tmp_path / "curves.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "step,erm_loss,cl_loss,total_loss"
        for row, line in zip(rows, lines[1:]):
            step, erm, cl, total = line.split(",")
            assert int(step) == row.step
            assert float(erm) == row.erm_loss
            assert float(cl) == row.cl_loss
            assert float(total) == row.total_loss

    def test_output_dir_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(hn.OUTPUT_DIR_ENV, str(tmp_path / "env_dir"))
        assert resolve_output_dir(str(tmp_path / "cfg_dir")) == tmp_path / "env_dir"
        monkeypatch.delenv(hn.OUTPUT_DIR_ENV)
        assert resolve_output_dir(str(tmp_path / "cfg_dir")) == tmp_path / "cfg_dir"
        with pytest.raises(ConfigError):
            resolve_output_dir(None)
