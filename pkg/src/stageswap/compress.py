"""Stage-swap compression machinery.

A deep frozen teacher is split into contiguous stages. A shallow student
assigns one block per stage. During training, each iteration draws a
per-stage bit mask: bit 1 routes tokens through the corresponding student
block (wrapped in a projection pair), bit 0 routes them through the
original teacher stage. The replacement probability ramps toward 1 over
training, so the student is gradually weaned off the teacher's layers.

Three losses supervise the composite: the tracking loss on ground truth,
a guidance loss toward the frozen teacher's own prediction, and a
feature loss that pulls stage-boundary tokens toward the teacher's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor
from .model import INIT_STD, Linear, TrackerConfig, TrackerModel, copy_params, stage_forward


# -- stage division ----------------------------------------------------------

@dataclass(frozen=True)
class StagePlan:
    """Aligned partitions of the teacher and student block stacks."""

    teacher_ranges: tuple[tuple[int, int], ...]
    student_ranges: tuple[tuple[int, int], ...]

    @property
    def num_stages(self) -> int:
        return len(self.teacher_ranges)

    @property
    def teacher_layers(self) -> int:
        return self.teacher_ranges[-1][1]

    @property
    def student_layers(self) -> int:
        return self.student_ranges[-1][1]

    def ranges_for_layer_count(self, n: int) -> tuple[tuple[int, int], ...]:
        if n == self.teacher_layers:
            return self.teacher_ranges
        if n == self.student_layers:
            return self.student_ranges
        raise ValueError(f"plan covers {self.teacher_layers} teacher / "
                         f"{self.student_layers} student layers, not {n}")


def divide_stages(teacher_layers: int, num_stages: int, mode: str = "even",
                  uneven_sizes=None) -> StagePlan:
    """Partition ``teacher_layers`` blocks into contiguous stages.

    ``even`` splits into equal runs and requires divisibility; ``uneven``
    takes explicit per-stage sizes. The student side always gets one block
    per stage.
    """
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    if num_stages > teacher_layers:
        raise ValueError(f"cannot cut {teacher_layers} layers into {num_stages} stages")
    if mode == "even":
        if teacher_layers % num_stages:
            raise ValueError(f"{teacher_layers} layers not divisible into {num_stages} even stages")
        size = teacher_layers // num_stages
        sizes = [size] * num_stages
    elif mode == "uneven":
        if not uneven_sizes:
            raise ValueError("uneven mode requires explicit stage sizes")
        sizes = [int(s) for s in uneven_sizes]
        if len(sizes) != num_stages:
            raise ValueError(f"got {len(sizes)} sizes for {num_stages} stages")
        if any(s < 1 for s in sizes):
            raise ValueError("every stage needs at least one layer")
        if sum(sizes) != teacher_layers:
            raise ValueError(f"stage sizes sum to {sum(sizes)}, expected {teacher_layers}")
    else:
        raise ValueError(f"unknown stage mode {mode!r}")

    bounds = np.cumsum([0] + sizes)
    teacher_ranges = tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
    student_ranges = tuple((i, i + 1) for i in range(num_stages))
    return StagePlan(teacher_ranges=teacher_ranges, student_ranges=student_ranges)


# -- replacement schedule ----------------------------------------------------

@dataclass(frozen=True)
class ReplacementSchedule:
    """Per-epoch replacement probability: flat start, linear ramp, flat end.

    The probability holds at ``p_init`` for the first ``alpha1`` fraction of
    training, rises linearly to 1 over the middle, and stays at 1 for the
    last ``alpha2`` fraction.
    """

    p_init: float
    alpha1: float
    alpha2: float
    total_epochs: int

    def __post_init__(self):
        if not (0.0 < self.p_init <= 1.0):
            raise ValueError(f"p_init must be in (0, 1], got {self.p_init}")
        if self.alpha1 < 0.0 or self.alpha2 < 0.0:
            raise ValueError("alpha fractions must be non-negative")
        if self.alpha1 + self.alpha2 >= 1.0:
            raise ValueError("alpha1 + alpha2 must be < 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    def schedule_p(self, t: float) -> float:
        m = self.total_epochs
        if not (0.0 <= t <= m):
            raise ValueError(f"epoch {t} outside [0, {m}]")
        ramp_start = self.alpha1 * m
        ramp_stop = (1.0 - self.alpha2) * m
        if t < ramp_start:
            return self.p_init
        if t > ramp_stop:
            return 1.0
        return self.p_init + (t - ramp_start) * (1.0 - self.p_init) / (ramp_stop - ramp_start)

    def expected_p(self) -> float:
        """Time average of schedule_p over [0, total_epochs] in closed form."""
        return (1.0 + self.p_init) / 2.0 + (1.0 - self.p_init) / 2.0 * (self.alpha2 - self.alpha1)


# -- path sampling -----------------------------------------------------------

@dataclass(frozen=True)
class PathMask:
    """One replacement decision per stage: 1 = student block, 0 = teacher stage."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"mask bits must be 0 or 1, got {self.bits}")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def all_teacher(cls, num_stages: int) -> "PathMask":
        return cls(bits=(0,) * num_stages)

    @classmethod
    def all_student(cls, num_stages: int) -> "PathMask":
        return cls(bits=(1,) * num_stages)


def sample_path(num_stages: int, p: float, rng: np.random.Generator) -> PathMask:
    """Draw independent per-stage replacement bits with P(bit = 1) = p."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"replacement probability {p} outside [0, 1]")
    draws = rng.random(num_stages)
    return PathMask(bits=tuple(int(d < p) for d in draws))


# -- projections and student construction ------------------------------------

class ProjectionPair:
    """Linear adapters around one student block.

    ``project_in`` maps teacher-width tokens to student width and
    ``project_out`` maps them back. With equal widths both start as exact
    identities, so an untrained wrapped block computes the same function as
    the bare block; with different widths they start small and random.
    """

    def __init__(self, teacher_dim: int, student_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.inp = Linear(teacher_dim, student_dim, rng, dtype)
        self.out = Linear(student_dim, teacher_dim, rng, dtype)
        if teacher_dim == student_dim:
            self.inp.w.data = np.eye(teacher_dim, dtype=dtype)
            self.out.w.data = np.eye(teacher_dim, dtype=dtype)
        self.inp.b.data[:] = 0.0
        self.out.b.data[:] = 0.0

    def project_in(self, x: Tensor) -> Tensor:
        return self.inp(x)

    def project_out(self, x: Tensor) -> Tensor:
        return self.out(x)

    def params(self, prefix: str):
        return self.inp.params(prefix + ".in") + self.out.params(prefix + ".out")


def build_student(teacher: TrackerModel, plan: StagePlan, rng: np.random.Generator,
                  init_policy: str = "skip", decoder_init: str = "teacher"):
    """Construct the shallow student and its per-stage projection pairs.

    The student reuses the teacher's patch and positional embeddings as
    frozen bitwise copies; only its blocks (and decoder) train. Block init
    policies: ``skip`` copies the last block of each teacher stage, ``first``
    copies the first block, ``random`` draws fresh weights.
    """
    if init_policy not in ("skip", "first", "random"):
        raise ValueError(f"unknown init policy {init_policy!r}")
    if decoder_init not in ("teacher", "random"):
        raise ValueError(f"unknown decoder init {decoder_init!r}")
    tcfg = teacher.cfg
    if plan.teacher_layers != tcfg.num_layers:
        raise ValueError(f"plan covers {plan.teacher_layers} layers, "
                         f"teacher has {tcfg.num_layers}")

    scfg = TrackerConfig(embed_dim=tcfg.embed_dim, num_layers=plan.num_stages,
                         num_heads=tcfg.num_heads, mlp_ratio=tcfg.mlp_ratio,
                         patch_size=tcfg.patch_size, template_side=tcfg.template_side,
                         search_side=tcfg.search_side)
    student = TrackerModel(scfg, rng, dtype=teacher.dtype)

    copy_params(student.embed_params(), teacher.embed_params())
    for p in student.embed_params():
        p.requires_grad = False

    if init_policy != "random":
        for i, (start, stop) in enumerate(plan.teacher_ranges):
            src = teacher.blocks[stop - 1] if init_policy == "skip" else teacher.blocks[start]
            copy_params([t for _, t in student.blocks[i].params("b")],
                        [t for _, t in src.params("b")])

    if decoder_init == "teacher":
        copy_params(student.decoder_params(), teacher.decoder_params())

    projections = [ProjectionPair(tcfg.embed_dim, scfg.embed_dim, rng, dtype=teacher.dtype)
                   for _ in range(plan.num_stages)]
    return student, projections


# -- composite forward -------------------------------------------------------

class CompositeTracker:
    """Mask-routed mixture of frozen teacher stages and trainable student blocks.

    The token stream always starts from the teacher's frozen embeddings and
    ends in the student's decoder. With an all-zero mask (and the decoder
    still holding its teacher-initialized weights) the composite reproduces
    the teacher bit for bit; with an all-one mask and identity projections
    it reproduces the student's own inference forward.
    """

    def __init__(self, teacher: TrackerModel, student: TrackerModel,
                 projections: list[ProjectionPair], plan: StagePlan,
                 decoder_trainable: bool = True):
        if len(projections) != plan.num_stages:
            raise ValueError(f"need {plan.num_stages} projection pairs, got {len(projections)}")
        if len(student.blocks) != plan.student_layers:
            raise ValueError("student depth does not match the stage plan")
        if len(teacher.blocks) != plan.teacher_layers:
            raise ValueError("teacher depth does not match the stage plan")
        self.teacher = teacher
        self.student = student
        self.projections = projections
        self.plan = plan
        self.decoder_trainable = decoder_trainable

    def forward(self, z: np.ndarray, x: np.ndarray, mask: PathMask):
        """Route each stage by its mask bit; returns (stage snapshots, prediction)."""
        if len(mask) != self.plan.num_stages:
            raise ShapeError(f"mask has {len(mask)} bits for {self.plan.num_stages} stages")
        tokens = self.teacher.embed(z, x)
        snaps: list[Tensor] = []
        for i, bit in enumerate(mask.bits):
            if bit:
                s0, s1 = self.plan.student_ranges[i]
                h = self.projections[i].project_in(tokens)
                h = stage_forward(self.student.blocks[s0:s1], h)
                tokens = self.projections[i].project_out(h)
            else:
                t0, t1 = self.plan.teacher_ranges[i]
                tokens = stage_forward(self.teacher.blocks[t0:t1], tokens)
            snaps.append(tokens)
        return snaps, self.student.decode(tokens)

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, blk in enumerate(self.student.blocks):
            out.extend(blk.params(f"student.blocks.{i}"))
        for i, proj in enumerate(self.projections):
            out.extend(proj.params(f"proj.{i}"))
        if self.decoder_trainable:
            out.extend(self.student.decoder.params("student.decoder"))
        return out

    def trainable_params(self) -> list[Tensor]:
        return [t for _, t in self.named_trainable()]


# -- losses -------------------------------------------------------------------

def gather_cells(map3: Tensor, cells: np.ndarray) -> Tensor:
    """Pick one row per batch element from a (B, G, K) map.

    Uses a constant one-hot selector matmul so the pick stays on the
    gradient tape without a dedicated indexing primitive.
    """
    b, g, k = map3.shape
    cells = np.asarray(cells)
    if cells.shape != (b,):
        raise ShapeError(f"gather_cells: need {b} cell indices, got {cells.shape}")
    sel = np.zeros((b, b * g), dtype=map3.data.dtype)
    sel[np.arange(b), np.arange(b) * g + cells] = 1.0
    flat = ad.reshape(map3, (b * g, k))
    return ad.matmul(Tensor(sel, dtype=sel.dtype), flat)


def track_loss(pred, gt_cells: np.ndarray, gt_offsets: np.ndarray) -> Tensor:
    """Cross-entropy over grid cells plus L1 on the offset at the true cell."""
    ce = ad.cross_entropy_with_logits(pred.score_map, np.asarray(gt_cells, dtype=np.int64))
    picked = gather_cells(pred.offset_map, gt_cells)
    off = ad.l1(picked, Tensor(np.asarray(gt_offsets), dtype=pred.offset_map.data.dtype))
    return ad.add(ce, off)


def prediction_guidance_loss(student_pred, teacher_pred) -> Tensor:
    """Match the teacher's score distribution and its offset at its own argmax.

    The teacher targets are plain arrays (no gradient flows back into them).
    """
    t_scores = teacher_pred.score_map.data
    m = t_scores.max(axis=-1, keepdims=True)
    e = np.exp(t_scores - m)
    soft = e / e.sum(axis=-1, keepdims=True)
    ce = ad.cross_entropy_with_logits(student_pred.score_map, soft)
    t_cells = teacher_pred.cells
    picked = gather_cells(student_pred.offset_map, t_cells)
    off = ad.l1(picked, Tensor(teacher_pred.offsets,
                               dtype=student_pred.offset_map.data.dtype))
    return ad.add(ce, off)


def feature_mimic_loss(snaps: list[Tensor], ref_snaps: list[Tensor]) -> Tensor:
    """Mean over stages of the mean squared distance between boundary tokens."""
    if len(snaps) != len(ref_snaps) or not snaps:
        raise ShapeError(f"feature_mimic_loss: {len(snaps)} snapshots vs {len(ref_snaps)}")
    total = None
    for s, r in zip(snaps, ref_snaps):
        if s.shape != r.shape:
            raise ShapeError(f"feature_mimic_loss: snapshot shapes {s.shape} vs {r.shape}")
        ref = Tensor(r.data, dtype=s.data.dtype)
        term = ad.scale(ad.sum_squares(ad.sub(s, ref)), 1.0 / s.size)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(snaps))


@dataclass(frozen=True)
class LossWeights:
    track: float = 1.0
    pred: float = 1.0
    feat: float = 0.2

    @property
    def needs_teacher(self) -> bool:
        return self.pred != 0.0 or self.feat != 0.0


def combine_losses(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the loss parts; rejects non-finite values."""
    total = None
    for name, w in (("track", weights.track), ("pred", weights.pred), ("feat", weights.feat)):
        if name not in parts:
            continue
        part = parts[name]
        if not np.isfinite(part.data):
            raise NumericError(f"loss term {name} is not finite")
        term = ad.scale(part, float(w))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no loss parts to combine")
    return total
