"""Synthetic task tests: determinism, verbatim paste, label uniformity."""

import math

import numpy as np
import pytest

from stageswap.data import (
    BACKGROUND,
    TaskSpec,
    batch_rng,
    collate,
    eval_rng,
    gen_batch,
    gen_eval_set,
    gen_sample,
)


def small_task(**kw):
    base = dict(template_side=16, search_side=32, patch=4, noise=0.1, distractors=2)
    base.update(kw)
    return TaskSpec(**base)


def center_from_label(sample, task):
    """Invert the cell/offset labels back to the paste center pixel."""
    row, col = divmod(sample.gt_cell, task.grid_side)
    cy = row * task.patch + int(round(sample.gt_offset[0] * task.patch - 0.5))
    cx = col * task.patch + int(round(sample.gt_offset[1] * task.patch - 0.5))
    return cy, cx


class TestTaskSpec:
    def test_derived_sizes(self):
        task = small_task()
        assert task.target_side == 8
        assert task.grid_side == 8
        assert task.num_cells == 64

    def test_validation(self):
        with pytest.raises(ValueError):
            small_task(search_side=24)
        with pytest.raises(ValueError):
            small_task(noise=-0.1)
        with pytest.raises(ValueError):
            small_task(distractors=-1)


class TestGeneration:
    def test_same_seed_identical_batches(self):
        task = small_task()
        a = gen_batch(np.random.default_rng(5), task, 8)
        b = gen_batch(np.random.default_rng(5), task, 8)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.search, sb.search)
            np.testing.assert_array_equal(sa.template, sb.template)
            assert sa.gt_cell == sb.gt_cell

    def test_labels_within_bounds(self):
        task = small_task()
        for s in gen_batch(np.random.default_rng(0), task, 64):
            assert 0 <= s.gt_cell < task.num_cells
            assert np.all(s.gt_offset >= 0.0) and np.all(s.gt_offset < 1.0)

    def test_clean_paste_appears_verbatim(self):
        task = small_task(noise=0.0, distractors=0)
        for s in gen_batch(np.random.default_rng(3), task, 32):
            cy, cx = center_from_label(s, task)
            ts = task.target_side
            texture = s.template[ts // 2:ts // 2 + ts, ts // 2:ts // 2 + ts]
            top, left = cy - ts // 2, cx - ts // 2
            y0, x0 = max(top, 0), max(left, 0)
            y1 = min(top + ts, task.search_side)
            x1 = min(left + ts, task.search_side)
            np.testing.assert_array_equal(
                s.search[y0:y1, x0:x1],
                texture[y0 - top:y1 - top, x0 - left:x1 - left])

    def test_template_is_neutral_outside_target(self):
        task = small_task()
        s = gen_sample(np.random.default_rng(1), task)
        assert np.all(s.template[0:4, :] == BACKGROUND)
        assert np.all(s.template[:, 0:4] == BACKGROUND)
        assert np.any(s.template[4:12, 4:12] != BACKGROUND)

    def test_noise_bounds_search_pixels(self):
        task = small_task(noise=0.05, distractors=0)
        s = gen_sample(np.random.default_rng(2), task)
        assert s.search.min() >= -0.05
        assert s.search.max() <= 1.05

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            gen_batch(np.random.default_rng(0), small_task(), 0)

    def test_cell_histogram_uniform(self):
        task = small_task()
        n = 10_000
        cells = [s.gt_cell for s in gen_batch(np.random.default_rng(11), task, n)]
        counts = np.bincount(cells, minlength=task.num_cells)
        expect = n / task.num_cells
        sigma = math.sqrt(n * (1 / task.num_cells) * (1 - 1 / task.num_cells))
        assert np.all(np.abs(counts - expect) < 4 * sigma)
        dof = task.num_cells - 1
        chi2 = float(((counts - expect) ** 2 / expect).sum())
        assert chi2 < dof + 4 * math.sqrt(2 * dof)

    def test_offsets_hit_every_quarter(self):
        task = small_task()
        offs = np.stack([s.gt_offset for s in
                         gen_batch(np.random.default_rng(4), task, 500)])
        levels = np.unique(np.round(offs * task.patch - 0.5).astype(int))
        np.testing.assert_array_equal(levels, [0, 1, 2, 3])


class TestCollateAndStreams:
    def test_collate_shapes(self):
        task = small_task()
        z, x, cells, offs = collate(gen_batch(np.random.default_rng(0), task, 5))
        assert z.shape == (5, 16, 16)
        assert x.shape == (5, 32, 32)
        assert cells.shape == (5,) and cells.dtype == np.int64
        assert offs.shape == (5, 2)

    def test_batch_stream_keyed_by_epoch_and_iteration(self):
        a = batch_rng(0, 1, 2).uniform(size=4)
        b = batch_rng(0, 1, 2).uniform(size=4)
        c = batch_rng(0, 1, 3).uniform(size=4)
        d = batch_rng(0, 2, 2).uniform(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_eval_stream_disjoint_from_batches(self):
        e = eval_rng(0).uniform(size=4)
        t = batch_rng(0, 0, 0).uniform(size=4)
        assert not np.array_equal(e, t)

    def test_eval_set_deterministic(self):
        task = small_task()
        a = gen_eval_set(task, 4, seed=7)
        b = gen_eval_set(task, 4, seed=7)
        np.testing.assert_array_equal(a[0].search, b[0].search)
