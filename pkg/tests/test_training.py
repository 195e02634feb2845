import json

import numpy as np
import pytest

from protodet.config import TrainConfig, load_config, parse_assignments, serialize_config
from protodet.dataset import generate, load
from protodet.errors import ConfigurationError, NumericalError
from protodet.mil import PlsResult, generate_pseudo_labels
from protodet.training import (
    TrainState,
    init_state,
    learning_rate,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_step,
)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("traindata")
    generate(seed=21, num_images=8, num_classes=3, out_dir=root / "train")
    return root / "train"


def small_config(**kw):
    base = dict(iterations=12, seed=5, checkpoint_every=6)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults_match_published_values(self):
        cfg = TrainConfig()
        assert cfg.iterations == 8000
        assert cfg.lr == 0.01
        assert cfg.weight_decay == 1e-4
        assert cfg.momentum == 0.9
        assert cfg.stages == 3
        assert cfg.bank_size == 6
        assert cfg.temperature == 0.2
        assert cfg.lam == 0.03
        assert cfg.bank_momentum == 0.7
        assert cfg.nms_threshold == 0.4
        assert cfg.warmup_fraction == 0.1

    def test_file_and_override_precedence(self, tmp_path):
        f = tmp_path / "cfg.txt"
        f.write_text("lambda = 0.05\nbank.size = 4\n# comment\npls.enabled = false\n")
        cfg = load_config(f, ["lambda=0.01"])
        assert cfg.lam == 0.01  # override wins
        assert cfg.bank_size == 4
        assert cfg.pls_enabled is False

    def test_serialize_roundtrip(self):
        cfg = TrainConfig(lam=0.02, pls_discard_rule="below_tau", bank_negatives=False)
        text = serialize_config(cfg)
        back = TrainConfig(**parse_assignments(text.splitlines()))
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown config key"):
            parse_assignments(["nonsense = 1"])

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(temperature=0.0).validate()
        with pytest.raises(ConfigurationError):
            TrainConfig(pls_discard_rule="x").validate()


class TestTrainStep:
    def test_losses_finite_over_random_steps(self, tiny_data):
        ds = load(tiny_data)
        state = init_state(3, small_config(iterations=100))
        for i in range(20):
            row = train_step(state, ds.records[i % len(ds)].train_view())
            for key in ("L_mil", "L_ref_1", "L_ref_2", "L_ref_3", "L_cont", "L_total"):
                assert np.isfinite(row[key]), key
        assert row["iter"] == 20

    def test_total_is_sum_of_components(self, tiny_data):
        ds = load(tiny_data)
        cfg = small_config(iterations=100, warmup_fraction=0.0)
        state = init_state(3, cfg)
        rows = [train_step(state, ds.records[i % len(ds)].train_view()) for i in range(12)]
        for row in rows:
            expect = row["L_mil"] + row["L_ref_1"] + row["L_ref_2"] + row["L_ref_3"]
            expect += cfg.lam * row["L_cont"]
            assert row["L_total"] == pytest.approx(expect, abs=1e-12)

    def test_non_finite_loss_aborts_with_record_id(self, tiny_data):
        ds = load(tiny_data)
        state = init_state(3, small_config())
        state.net.params["cls_w"][:] = np.nan
        with pytest.raises(NumericalError, match=ds.records[0].image_id):
            train_step(state, ds.records[0].train_view())

    def test_parameters_finite_after_updates(self, tiny_data):
        ds = load(tiny_data)
        state = init_state(3, small_config(iterations=50))
        for i in range(10):
            train_step(state, ds.records[i % len(ds)].train_view())
        for name, p in state.net.params.items():
            assert np.isfinite(p).all(), name

    def test_bank_fills_during_warmup_but_no_sampling(self, tiny_data):
        ds = load(tiny_data)
        cfg = small_config(iterations=100, warmup_fraction=0.9)
        state = init_state(3, cfg)
        row = train_step(state, ds.records[0].train_view())
        assert row["bank_pos_fill"] > 0  # prototypes collected
        assert row["L_cont"] == 0.0  # contrastive gated off during warmup


class TestSupervisionChain:
    def test_stage_one_uses_fused_and_later_stages_use_previous(self, tiny_data):
        # dependency injection: distinctive fake score rows make the seed
        # choice reveal which input supervised which stage
        boxes = np.array([[0, 0, 10, 10], [40, 40, 50, 50], [70, 70, 80, 80]], dtype=float)
        labels = np.array([1])
        fused = np.array([[0.9, 0.1, 0.1]])  # argmax 0
        stage1 = generate_pseudo_labels(fused, labels, boxes)
        assert stage1.seeds[0] == [0]
        prev = np.array([[0.1, 0.9, 0.1]])  # pretend stage-1 output peaks at 1
        stage2 = generate_pseudo_labels(prev, labels, boxes)
        assert stage2.seeds[0] == [1]

    def test_pls_result_shared_across_stages(self):
        boxes = np.array([[0, 0, 10, 10], [40, 40, 50, 50]], dtype=float)
        labels = np.array([1])
        pls = PlsResult(mined={0: [1]})
        for scores in (np.array([[0.9, 0.1]]), np.array([[0.8, 0.2]])):
            plan = generate_pseudo_labels(scores, labels, boxes, pls)
            assert plan.seeds[0] == [0, 1]


class TestDeterminismAndCheckpoints:
    def test_two_runs_bit_identical(self, tiny_data, tmp_path):
        cfg = small_config()
        a = run_training(tiny_data, tmp_path / "a", cfg, quiet=True)
        b = run_training(tiny_data, tmp_path / "b", cfg, quiet=True)
        ca = (tmp_path / "a" / "checkpoint_final.npb").read_bytes()
        cb = (tmp_path / "b" / "checkpoint_final.npb").read_bytes()
        assert ca == cb
        assert a.iteration == b.iteration == cfg.iterations

    def test_different_seed_differs(self, tiny_data, tmp_path):
        run_training(tiny_data, tmp_path / "a", small_config(seed=5), quiet=True)
        run_training(tiny_data, tmp_path / "b", small_config(seed=6), quiet=True)
        assert (tmp_path / "a" / "checkpoint_final.npb").read_bytes() != (
            tmp_path / "b" / "checkpoint_final.npb"
        ).read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        cfg = small_config()
        run_training(tiny_data, tmp_path / "full", cfg, quiet=True)
        # simulate an interrupted run: train, drop the final checkpoint,
        # keep the midpoint one, then resume
        run_training(tiny_data, tmp_path / "part", cfg, quiet=True)
        (tmp_path / "part" / "checkpoint_final.npb").unlink()
        (tmp_path / "part" / "checkpoint_000012.npb").unlink()
        resumed = run_training(tiny_data, tmp_path / "part", cfg, resume=True, quiet=True)
        assert resumed.iteration == cfg.iterations
        assert (tmp_path / "full" / "checkpoint_final.npb").read_bytes() == (
            tmp_path / "part" / "checkpoint_final.npb"
        ).read_bytes()

    def test_checkpoint_roundtrip(self, tiny_data, tmp_path):
        ds = load(tiny_data)
        state = init_state(3, small_config())
        for i in range(4):
            train_step(state, ds.records[i].train_view())
        path = tmp_path / "ckpt.npb"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert back.iteration == state.iteration
        assert back.config == state.config
        for k in state.net.params:
            np.testing.assert_array_equal(back.net.params[k], state.net.params[k])
            np.testing.assert_array_equal(back.velocity[k], state.velocity[k])
        assert back.bank.pos_counts == state.bank.pos_counts

    def test_metrics_log_schema(self, tiny_data, tmp_path):
        cfg = small_config(stages=3)
        run_training(tiny_data, tmp_path / "m", cfg, quiet=True)
        rows = [
            json.loads(line)
            for line in (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
        ]
        assert len(rows) == cfg.iterations
        want_keys = {
            "iter", "L_mil", "L_ref_1", "L_ref_2", "L_ref_3",
            "L_cont", "L_total", "bank_pos_fill", "bank_neg_fill",
        }
        assert set(rows[0]) == want_keys

    def test_learning_rate_schedule(self):
        cfg = TrainConfig(iterations=1000)
        assert learning_rate(cfg, 0) == 0.01
        assert learning_rate(cfg, 749) == 0.01
        assert learning_rate(cfg, 750) == pytest.approx(0.001)


class TestBaselineCodePath:
    def test_lambda_zero_pls_off_matches_baseline_trajectory(self, tiny_data, tmp_path):
        # the baseline configuration IS lambda=0 + sampling off; run it twice
        # through the full code path and require bit-identical checkpoints
        cfg = small_config(lam=0.0, pls_enabled=False, bank_negatives=False)
        run_training(tiny_data, tmp_path / "x", cfg, quiet=True)
        run_training(tiny_data, tmp_path / "y", cfg, quiet=True)
        assert (tmp_path / "x" / "checkpoint_final.npb").read_bytes() == (
            tmp_path / "y" / "checkpoint_final.npb"
        ).read_bytes()

    def test_bank_stays_empty_when_inactive(self, tiny_data, tmp_path):
        cfg = small_config(lam=0.0, pls_enabled=False, bank_negatives=False)
        state = run_training(tiny_data, tmp_path / "z", cfg, quiet=True)
        assert state.bank.pos_fill() == 0 and state.bank.neg_fill() == 0
