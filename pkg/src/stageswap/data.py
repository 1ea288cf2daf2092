"""Synthetic template/search tracking pairs.

Each sample draws a random target texture, centers it in a dark template
image, and pastes it into a dark search image at a uniformly random pixel
center (clipped at the borders). Distractor textures from the same
distribution are pasted first, so the target always stays on top, and
uniform additive noise is applied to the finished search image. Ground truth
is the grid cell containing the paste center plus the sub-cell offset of
that center.

Textures are strictly brighter than the background, so localizing bright
regions is easy; telling the target apart from the distractors still
requires matching the template's specific pattern. Textures are piecewise
constant over a coarse 2x2 block grid, which keeps them recognizable when
the paste lands off the patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND = 0.0
TEXTURE_LO, TEXTURE_HI = 0.25, 1.0


@dataclass(frozen=True)
class TaskSpec:
    template_side: int = 16
    search_side: int = 32
    patch: int = 4
    noise: float = 0.1
    distractors: int = 2

    def __post_init__(self):
        if self.search_side != 2 * self.template_side:
            raise ValueError("search side must be twice the template side")
        if self.template_side % self.patch or self.search_side % self.patch:
            raise ValueError("image sides must be divisible by the patch size")
        if self.template_side % 2:
            raise ValueError("template side must be even")
        if self.noise < 0:
            raise ValueError(f"noise amplitude must be >= 0, got {self.noise}")
        if self.distractors < 0:
            raise ValueError(f"distractor count must be >= 0, got {self.distractors}")

    @property
    def target_side(self) -> int:
        return self.template_side // 2

    @property
    def grid_side(self) -> int:
        return self.search_side // self.patch

    @property
    def num_cells(self) -> int:
        return self.grid_side ** 2


@dataclass(frozen=True)
class SyntheticSample:
    template: np.ndarray   # (template_side, template_side)
    search: np.ndarray     # (search_side, search_side)
    gt_cell: int           # row-major cell index of the target center
    gt_offset: np.ndarray  # (2,) sub-cell (y, x) position in [0, 1)


MIN_BLOCK_CONTRAST = 0.12


def _texture_base(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(TEXTURE_LO, TEXTURE_HI, size=(2, 2))


def _blow_up(base: np.ndarray, side: int) -> np.ndarray:
    block = side // 2
    return np.kron(base, np.ones((block, block)))


def _distractor_base(rng: np.random.Generator, target_base: np.ndarray) -> np.ndarray:
    """A texture grid whose every block clearly differs from the target's."""
    while True:
        base = _texture_base(rng)
        if np.abs(base - target_base).min() >= MIN_BLOCK_CONTRAST:
            return base


def _paste(canvas: np.ndarray, tile: np.ndarray, center_y: int, center_x: int):
    """Paste ``tile`` centered on (center_y, center_x), clipped to the canvas."""
    h, w = tile.shape
    top, left = center_y - h // 2, center_x - w // 2
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + h, canvas.shape[0]), min(left + w, canvas.shape[1])
    canvas[y0:y1, x0:x1] = tile[y0 - top:y1 - top, x0 - left:x1 - left]


def gen_sample(rng: np.random.Generator, task: TaskSpec) -> SyntheticSample:
    ts, side, patch = task.target_side, task.search_side, task.patch

    base = _texture_base(rng)
    texture = _blow_up(base, ts)
    template = np.full((task.template_side,) * 2, BACKGROUND)
    _paste(template, texture, task.template_side // 2, task.template_side // 2)

    search = np.full((side, side), BACKGROUND)
    for _ in range(task.distractors):
        tile = _blow_up(_distractor_base(rng, base), ts)
        dy, dx = rng.integers(0, side, size=2)
        _paste(search, tile, int(dy), int(dx))
    cy, cx = (int(v) for v in rng.integers(0, side, size=2))
    _paste(search, texture, cy, cx)
    if task.noise:
        search = search + rng.uniform(-task.noise, task.noise, size=(side, side))

    gt_cell = (cy // patch) * task.grid_side + (cx // patch)
    gt_offset = np.array([((cy % patch) + 0.5) / patch,
                          ((cx % patch) + 0.5) / patch])
    return SyntheticSample(template=template, search=search,
                           gt_cell=gt_cell, gt_offset=gt_offset)


def gen_batch(rng: np.random.Generator, task: TaskSpec, n: int) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    return [gen_sample(rng, task) for _ in range(n)]


def collate(samples: list[SyntheticSample]):
    """Stack a sample list into (templates, searches, cells, offsets) arrays."""
    z = np.stack([s.template for s in samples])
    x = np.stack([s.search for s in samples])
    cells = np.array([s.gt_cell for s in samples], dtype=np.int64)
    offsets = np.stack([s.gt_offset for s in samples])
    return z, x, cells, offsets


def batch_rng(seed: int, epoch: int, iteration: int) -> np.random.Generator:
    """Training-batch stream, keyed so each (seed, epoch, iteration) is reproducible."""
    return np.random.default_rng([seed, 3, epoch, iteration])


def eval_rng(seed: int) -> np.random.Generator:
    """Held-out evaluation stream, disjoint from the training batch stream."""
    return np.random.default_rng([seed, 4])


def gen_eval_set(task: TaskSpec, n: int, seed: int) -> list[SyntheticSample]:
    return gen_batch(eval_rng(seed), task, n)
