"""Training harness: regimes, schedules in effect, eval metrics, invariants."""

import numpy as np
import pytest

from stageswap.autodiff import Tensor
from stageswap.checkpoint import Checkpoint
from stageswap.config import RunConfig
from stageswap.data import SyntheticSample, collate, gen_eval_set
from stageswap.metrics import read_metrics
from stageswap.model import Prediction, TrackerModel
from stageswap.train import (DivergenceError, EvalMetrics, evaluate,
                             hanning_window, run_student_training,
                             train_teacher)


def tiny_cfg(**kw):
    base = dict(embed_dim=8, heads=2, mlp_ratio=2, template=8, search=16,
                patch=4, teacher_layers=4, student_layers=2, epochs=1,
                iters_per_epoch=4, batch=2, lr=1e-3, lr_decay_epoch=100,
                noise=0.05, distractors=1, seed=0)
    base.update(kw)
    return RunConfig(**base)


def fresh_teacher(cfg):
    teacher = TrackerModel(cfg.teacher_model_config(), np.random.default_rng([cfg.seed, 0]))
    teacher.freeze()
    return teacher


def state_checksum(model):
    return Checkpoint(config={}, tensors=model.state()).checksum()


class _ServedPrediction:
    """Stand-in model whose predictions are a fixed function of the sample order."""

    def __init__(self, task, score_rows, offset_rows):
        self.cfg = task
        self._scores = score_rows
        self._offsets = offset_rows
        self._cursor = 0

    def forward_full(self, z, x, plan=None):
        n = len(z)
        rows = slice(self._cursor, self._cursor + n)
        self._cursor += n
        pred = Prediction(score_map=Tensor(self._scores[rows]),
                          offset_map=Tensor(self._offsets[rows]))
        return [], pred


class TestEvaluate:
    def build_serving_model(self, samples, task, offset_shift=0.0):
        n, g = len(samples), task.grid_side
        scores = np.zeros((n, g * g), dtype=np.float32)
        offsets = np.zeros((n, g * g, 2), dtype=np.float32)
        for i, s in enumerate(samples):
            scores[i, s.gt_cell] = 10.0
            offsets[i, :, :] = s.gt_offset
            offsets[i, :, 0] += offset_shift
        return _ServedPrediction(task, scores, offsets)

    def test_perfect_predictor_scores_perfectly(self):
        task = tiny_cfg().task_spec()
        samples = gen_eval_set(task, 12, seed=0)
        model = self.build_serving_model(samples, task)
        ev = evaluate(model, samples, chunk=5)
        assert ev.acc == 1.0
        assert ev.off_err == pytest.approx(0.0, abs=1e-7)
        assert ev.iou == pytest.approx(1.0, abs=1e-6)

    def test_known_offset_error_and_iou(self):
        task = tiny_cfg().task_spec()
        samples = gen_eval_set(task, 12, seed=0)
        model = self.build_serving_model(samples, task, offset_shift=0.5)
        ev = evaluate(model, samples, chunk=5)
        assert ev.acc == 1.0
        assert ev.off_err == pytest.approx(0.5, abs=1e-6)
        assert ev.iou == pytest.approx((1 / 3), abs=1e-6)

    def test_hanning_window_peaks_at_center(self):
        w = hanning_window(5)
        assert w.shape == (25,)
        assert np.argmax(w) == 12

    def test_hanning_choice_moves_to_window_peak_on_flat_scores(self):
        task = tiny_cfg().task_spec()
        g = task.grid_side
        center_cell = (g // 2 - 1) * g + (g // 2 - 1)  # first of the tied peak
        blank = np.zeros((task.template_side,) * 2)
        search = np.zeros((task.search_side,) * 2)
        off = np.full(2, 0.5)
        samples = [SyntheticSample(blank, search, center_cell, off) for _ in range(6)]
        n = len(samples)
        model = _ServedPrediction(task, np.zeros((n, g * g), dtype=np.float32),
                                  np.full((n, g * g, 2), 0.5, dtype=np.float32))
        with_window = evaluate(model, samples, use_hanning=True)
        assert with_window.acc == 1.0
        model = _ServedPrediction(task, np.zeros((n, g * g), dtype=np.float32),
                                  np.full((n, g * g, 2), 0.5, dtype=np.float32))
        without = evaluate(model, samples, use_hanning=False)
        assert without.acc == 0.0  # flat scores argmax to cell 0 instead

    def test_untrained_model_is_far_from_solved(self):
        # random weights still pick up image brightness, so the floor sits
        # well above 1/16 chance; the point is that it is nowhere near solved
        cfg = tiny_cfg()
        model = TrackerModel(cfg.student_model_config(), np.random.default_rng(0))
        samples = gen_eval_set(cfg.task_spec(), 64, seed=0)
        ev = evaluate(model, samples)
        assert ev.acc < 0.6


class TestTeacherTraining:
    def test_loss_falls_and_metrics_are_written(self, tmp_path):
        # accuracy at this miniature scale is too noisy to trend within a
        # couple of epochs; the tracking loss is the robust learning signal
        cfg = tiny_cfg(embed_dim=16, teacher_layers=2, epochs=2,
                       iters_per_epoch=40, batch=8, lr=1e-3)
        path = str(tmp_path / "metrics.txt")
        teacher, records = train_teacher(cfg, metrics_path=path, eval_samples=64)
        assert len(records) == cfg.epochs
        assert records[-1].l_track < 0.6 * records[0].l_track
        on_disk = read_metrics(path)
        assert [r.epoch for r in on_disk] == [0, 1]
        assert on_disk[-1].acc == pytest.approx(records[-1].acc, abs=1e-6)

    def test_same_seed_is_bitwise_reproducible(self):
        cfg = tiny_cfg(epochs=1, iters_per_epoch=3)
        t1, _ = train_teacher(cfg, eval_samples=4)
        t2, _ = train_teacher(cfg, eval_samples=4)
        assert state_checksum(t1) == state_checksum(t2)


class TestStudentRegimes:
    def test_teacher_params_never_move(self):
        cfg = tiny_cfg(regime="compress", epochs=1, iters_per_epoch=4)
        teacher = fresh_teacher(cfg)
        before = state_checksum(teacher)
        run_student_training(cfg, teacher, eval_samples=4)
        assert state_checksum(teacher) == before

    def test_compress_follows_schedule_and_reports_p(self):
        cfg = tiny_cfg(regime="compress", epochs=3, iters_per_epoch=2,
                       p_init=0.5, alpha1=0.2, alpha2=0.2)
        teacher = fresh_teacher(cfg)
        result = run_student_training(cfg, teacher, eval_samples=4)
        schedule = cfg.schedule()
        assert [r.p for r in result.records] == [
            pytest.approx(schedule.schedule_p(e)) for e in range(cfg.epochs)]

    def test_naive_equals_compress_with_all_student_path_and_track_only(self):
        base = tiny_cfg(epochs=1, iters_per_epoch=5, batch=2)
        teacher = fresh_teacher(base)
        naive = run_student_training(base.with_(regime="naive"), teacher,
                                     eval_samples=4)
        reduced = run_student_training(
            base.with_(regime="compress", p_init=1.0,
                       lambda_pred=0.0, lambda_feat=0.0),
            teacher, eval_samples=4)
        assert state_checksum(naive.student) == state_checksum(reduced.student)
        assert [r.acc for r in naive.records] == [r.acc for r in reduced.records]

    def test_distill_diverges_from_naive(self):
        base = tiny_cfg(epochs=1, iters_per_epoch=5, batch=2)
        teacher = fresh_teacher(base)
        naive = run_student_training(base.with_(regime="naive"), teacher,
                                     eval_samples=4)
        distill = run_student_training(base.with_(regime="distill"), teacher,
                                       eval_samples=4)
        assert state_checksum(naive.student) != state_checksum(distill.student)

    def test_sweep_requires_fixed_p(self):
        cfg = tiny_cfg(regime="sweep")
        with pytest.raises(ValueError, match="fixed probability"):
            run_student_training(cfg, fresh_teacher(cfg))

    def test_sweep_holds_p_then_finetunes_all_student(self):
        cfg = tiny_cfg(regime="sweep", epochs=2, iters_per_epoch=2)
        teacher = fresh_teacher(cfg)
        result = run_student_training(cfg, teacher, fixed_p=0.3, eval_samples=4)
        ps = [r.p for r in result.records]
        assert ps == [0.3, 0.3, 1.0]  # finetune tail is one tenth, rounded up

    def test_poisoned_teacher_raises_divergence_error(self):
        cfg = tiny_cfg(regime="distill", epochs=1, iters_per_epoch=1)
        teacher = fresh_teacher(cfg)
        teacher.blocks[0].wq.w.data[0, 0] = np.nan
        with pytest.raises(DivergenceError, match="diverged at epoch 0"):
            run_student_training(cfg, teacher, eval_samples=4)


class TestDecoupled:
    def test_needs_at_least_one_epoch_per_stage(self):
        cfg = tiny_cfg(regime="decoupled", epochs=1)
        with pytest.raises(ValueError, match="epochs"):
            run_student_training(cfg, fresh_teacher(cfg), eval_samples=4)

    def test_stages_train_one_at_a_time(self, monkeypatch):
        cfg = tiny_cfg(regime="decoupled", epochs=2, iters_per_epoch=5,
                       decoder_trainable=False, lr=1e-3)
        teacher = fresh_teacher(cfg)
        snaps = []

        def spy(model, samples, use_hanning=False, chunk=64):
            snaps.append((model.blocks[0].wq.w.data.copy(),
                          model.blocks[1].wq.w.data.copy()))
            return EvalMetrics(acc=0.0, off_err=0.0, iou=0.0)

        monkeypatch.setattr("stageswap.train.evaluate", spy)
        result = run_student_training(cfg, teacher, eval_samples=4)
        assert len(result.records) == 3  # one epoch per stage + finetune
        init0 = teacher.blocks[0].wq.w.data  # student stage 0 starts as a copy
        s0_after_phase0, s1_after_phase0 = snaps[0]
        s0_after_phase1, s1_after_phase1 = snaps[1]
        s0_after_finetune, _ = snaps[2]
        assert not np.array_equal(s0_after_phase0, init0)
        np.testing.assert_array_equal(s1_after_phase0,
                                      teacher.blocks[3].wq.w.data)
        np.testing.assert_array_equal(s0_after_phase1, s0_after_phase0)
        assert not np.array_equal(s1_after_phase1, s1_after_phase0)
        assert not np.array_equal(s0_after_finetune, s0_after_phase1)
