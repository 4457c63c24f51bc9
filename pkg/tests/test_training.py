import json
import math

import numpy as np
import pytest

from deepconvlstm.arch import build_model, reduced_spec
from deepconvlstm.data import SyntheticTaskSpec, generate_synthetic_dataset
from deepconvlstm.tensor import Tensor
from deepconvlstm.training import (
    Adam,
    ConfigError,
    CurriculumSchedule,
    NonFiniteGradientError,
    PlateauScheduler,
    TbpttConfig,
    Trainer,
    TrainSettings,
    adam_step,
    clip_by_global_norm,
    evaluate,
    load_checkpoint,
    read_manifest,
    run_curriculum,
    save_checkpoint,
    tbptt_gradients,
    topk_accuracy,
    train_sequence_tbptt,
)
from deepconvlstm.verify import masked_boundary, toy_batch, toy_recurrent_model


def param(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


class TestAdam:
    def test_two_steps_by_hand(self):
        p = param([1.0, -2.0])
        opt = Adam([p], lr=0.1, clip=None)
        g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
        adam_step(opt, [p], [g1])
        # first bias-corrected step moves each coordinate by lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
        adam_step(opt, [p], [g2])
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
        want = np.array([0.9, -1.9]) - 0.1 * (m / 0.19) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        np.testing.assert_allclose(p.data, want, atol=1e-7)

    def test_zero_gradient_is_no_op(self):
        p = param([3.0])
        adam_step(Adam([p], lr=0.1), [p], [np.zeros(1)])
        assert p.data[0] == 3.0

    def test_clipping(self):
        grads, norm = clip_by_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
        assert norm == 5.0
        np.testing.assert_allclose(np.concatenate(grads), [0.6, 0.8])
        same, _ = clip_by_global_norm([np.array([0.3])], 1.0)
        assert same[0][0] == 0.3

    def test_non_finite_skips_update(self):
        p, q = param([1.0]), param([2.0])
        opt = Adam([p, q], lr=0.1)
        with pytest.raises(NonFiniteGradientError):
            adam_step(opt, [p, q], [np.array([1.0]), np.array([np.nan])])
        assert p.data[0] == 1.0 and q.data[0] == 2.0 and opt.step_count == 0
        assert opt.m[0][0] == 0.0

    def test_shape_mismatch(self):
        p = param([1.0, 2.0])
        with pytest.raises(ValueError):
            adam_step(Adam([p]), [p], [np.zeros(3)])

    def test_state_round_trip(self):
        p = param([1.0])
        opt = Adam([p], lr=0.1)
        adam_step(opt, [p], [np.array([1.0])])
        other = Adam([param([1.0])], lr=0.5)
        other.load_state_dict(opt.state_dict())
        assert other.step_count == 1 and other.lr == 0.1
        np.testing.assert_array_equal(other.m[0], opt.m[0])


class TestScheduler:
    def test_plateau_halves(self):
        opt = Adam([param([0.0])], lr=1.0)
        sched = PlateauScheduler(opt, patience=2)
        assert not sched.update(0.5)
        assert not sched.update(0.4)
        assert sched.update(0.5)  # equal is not an improvement
        assert opt.lr == 0.5
        assert not sched.update(0.6)
        assert opt.lr == 0.5

    def test_floor(self):
        opt = Adam([param([0.0])], lr=1e-6)
        sched = PlateauScheduler(opt, patience=1, floor=1e-6)
        sched.update(1.0)
        assert not sched.update(0.0)
        assert opt.lr == 1e-6


class TestCurriculum:
    def test_word_task(self):
        sched = CurriculumSchedule.word_task(100)
        assert sched.length_at(0) == 24 and sched.length_at(99) == 24
        assert sched.length_at(100) == 29 and sched.phase_at(5000) == 1

    def test_parse(self):
        assert CurriculumSchedule.parse("0:8, 10:12").phases == [(0, 8), (10, 12)]

    @pytest.mark.parametrize("phases", [[], [(1, 8)], [(0, 8), (5, 6)], [(0, 8), (10, 9), (5, 12)]])
    def test_invalid(self, phases):
        with pytest.raises(ConfigError):
            CurriculumSchedule(phases)


class TestTbptt:
    def test_window_counts(self):
        model = toy_recurrent_model()
        stats = tbptt_gradients(model, toy_batch(), TbpttConfig(8))
        assert (stats["windows"], stats["backward_passes"]) == (3, 3)

    def test_ragged_last_window(self):
        stats = tbptt_gradients(toy_recurrent_model(), toy_batch(t_len=10), TbpttConfig(4))
        assert stats["windows"] == 3 and stats["outputs"].shape[1] == 10

    def test_window_losses_sum_to_sequence_loss(self):
        model, batch = toy_recurrent_model(), toy_batch()
        windowed = tbptt_gradients(model, batch, TbpttConfig(8))["loss"]
        model.zero_grad()
        whole = tbptt_gradients(model, batch, TbpttConfig(24))["loss"]
        assert windowed == pytest.approx(whole, rel=1e-12)

    def test_matches_masked_full_bptt(self):
        model, batch = toy_recurrent_model(1), toy_batch(1)
        tbptt_gradients(model, batch, TbpttConfig(8))
        cut = [p.grad.copy() for p in model.parameters()]
        model.zero_grad()
        stats = tbptt_gradients(model, batch, TbpttConfig(8), boundary=masked_boundary)
        assert stats["backward_passes"] == 1
        for a, p in zip(cut, model.parameters()):
            np.testing.assert_allclose(a, p.grad, atol=1e-12)

    def test_one_update_per_sequence(self):
        model = toy_recurrent_model()
        opt = Adam(model.parameters(), lr=1e-3)
        metrics = train_sequence_tbptt(model, toy_batch(), TbpttConfig(8), opt)
        assert metrics["updates"] == 1 and opt.step_count == 1
        assert all(p.grad is None or not p.grad.any() for p in model.parameters())

    def test_window_longer_than_sequence(self):
        with pytest.raises(ConfigError):
            tbptt_gradients(toy_recurrent_model(), toy_batch(t_len=6), TbpttConfig(8))
        with pytest.raises(ConfigError):
            TbpttConfig(0)


class TestEvaluation:
    def test_topk(self):
        probs = np.array([[0.1, 0.7, 0.2], [0.5, 0.3, 0.2]])
        acc = topk_accuracy(probs, [2, 0], ks=(1, 2))
        assert acc == {"top1": 0.5, "top2": 1.0}

    def test_ties_break_by_index(self):
        assert topk_accuracy(np.full((1, 4), 0.25), [0], ks=(1,))["top1"] == 1.0


@pytest.fixture(scope="module")
def tiny_data():
    spec = SyntheticTaskSpec(n_frames=4, n_train=8, n_test=4)
    return generate_synthetic_dataset(spec, 0, "train"), generate_synthetic_dataset(spec, 0, "test")


def tiny_trainer(seed=0):
    model = build_model(reduced_spec(2), seed=seed)
    return Trainer(model, TrainSettings(batch_size=2, lr=1e-3, window=2, eval_every=2, augment=None), seed)


class TestTrainer:
    def test_rows_and_counters(self, tiny_data):
        train, test = tiny_data
        t = tiny_trainer()
        rows = run_curriculum(t, CurriculumSchedule([(0, 3), (2, 4)]), train, 3, val_dataset=test)
        assert [r["step"] for r in rows] == [1, 2, 3]
        assert [r["length"] for r in rows] == [3, 3, 4]
        assert rows[1]["val_accuracy"] is not None and rows[0]["val_accuracy"] is None
        assert t.updates == t.sequences == 3
        assert all(math.isfinite(r["loss"]) for r in rows)

    def test_curriculum_longer_than_data(self, tiny_data):
        with pytest.raises(ConfigError):
            run_curriculum(tiny_trainer(), CurriculumSchedule([(0, 5)]), tiny_data[0], 1)

    def test_early_stop(self, tiny_data):
        rows = run_curriculum(tiny_trainer(), CurriculumSchedule([(0, 2)]), tiny_data[0], 5,
                              on_step=lambda row: False)
        assert len(rows) == 1

    def test_evaluate_keys(self, tiny_data):
        res = evaluate(tiny_trainer().model, tiny_data[1])
        assert set(res) == {"top1", "top5", "top10", "n"} and res["n"] == 4


class TestCheckpoint:
    def test_resume_is_bit_exact(self, tiny_data, tmp_path):
        train = tiny_data[0]
        sched = CurriculumSchedule([(0, 3)])
        straight = tiny_trainer()
        run_curriculum(straight, sched, train, 4)

        first = tiny_trainer()
        run_curriculum(first, sched, train, 2)
        save_checkpoint(tmp_path / "ck", first.model, first)
        resumed = tiny_trainer(seed=0)
        load_checkpoint(tmp_path / "ck", resumed.model, resumed)
        assert resumed.step == 2 and resumed.opt.step_count == 2
        run_curriculum(resumed, sched, train, 4)
        for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_manifest_contents(self, tmp_path):
        t = tiny_trainer()
        save_checkpoint(tmp_path / "ck", t.model, t, extra={"note": "x"})
        manifest = read_manifest(tmp_path / "ck")
        assert manifest["spec_hash"] == t.model.spec.hash()
        assert manifest["note"] == "x" and manifest["step"] == 0
        assert not (tmp_path / "ck" / "manifest.json.tmp").exists()
        json.dumps(manifest)

    def test_spec_mismatch(self, tmp_path):
        t = tiny_trainer()
        save_checkpoint(tmp_path / "ck", t.model)
        other = build_model(reduced_spec(3))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "ck", other)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "none")
