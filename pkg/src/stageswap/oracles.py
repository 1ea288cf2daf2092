"""Independent brute-force and analytic checks for the compression machinery.

Every oracle here recomputes its expected value from first principles
(exhaustive enumeration, numeric integration, finite differences, or direct
bitwise comparison) so the main implementation can be validated against
something it does not share code with.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import compress as compress_mod
from .autodiff import Tensor
from .compress import (CompositeTracker, LossWeights, PathMask,
                       ReplacementSchedule, StagePlan, combine_losses,
                       feature_mimic_loss, prediction_guidance_loss,
                       track_loss)
from .model import TrackerModel

MAX_ENUM_STAGES = 16
FD_STEP = 1e-5
REL_ERR_FLOOR = 1e-8
GRAD_TOL = 1e-4


# -- exhaustive path enumeration ------------------------------------------------

@dataclass(frozen=True)
class PathDistribution:
    """All 2^N masks over N stages with their exact Bernoulli probabilities."""

    masks: tuple[PathMask, ...]
    probs: np.ndarray

    def prob_of(self, bits: tuple[int, ...]) -> float:
        for mask, prob in zip(self.masks, self.probs):
            if mask.bits == bits:
                return float(prob)
        raise KeyError(f"no mask {bits} in distribution")


def enumerate_paths(num_stages: int, p: float) -> PathDistribution:
    """Brute-force the full mask distribution for independent Bernoulli bits."""
    if not 1 <= num_stages <= MAX_ENUM_STAGES:
        raise ValueError(
            f"enumerate_paths handles 1..{MAX_ENUM_STAGES} stages, got {num_stages}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    masks = []
    probs = []
    for bits in itertools.product((0, 1), repeat=num_stages):
        ones = sum(bits)
        masks.append(PathMask(bits=bits))
        probs.append(p ** ones * (1.0 - p) ** (num_stages - ones))
    return PathDistribution(masks=tuple(masks), probs=np.asarray(probs, dtype=np.float64))


def sampler_consistency(num_stages: int, p: float, draws: int,
                        rng: np.random.Generator) -> float:
    """Max |empirical − analytic| mask frequency over ``draws`` samples.

    Calls the sampler through its module so a patched implementation is
    what gets measured.
    """
    if draws < 10_000:
        raise ValueError(f"need at least 10000 draws for a stable estimate, got {draws}")
    dist = enumerate_paths(num_stages, p)
    index = {mask.bits: i for i, mask in enumerate(dist.masks)}
    counts = np.zeros(len(dist.masks), dtype=np.int64)
    for _ in range(draws):
        mask = compress_mod.sample_path(num_stages, p, rng)
        counts[index[mask.bits]] += 1
    return float(np.abs(counts / draws - dist.probs).max())


# -- schedule integration -------------------------------------------------------

def integrate_schedule(schedule: ReplacementSchedule, steps: int) -> float:
    """Trapezoid mean of the replacement probability over one full run.

    The grid always includes the two ramp breakpoints, so the piecewise
    linear schedule is integrated exactly once ``steps`` is past the
    precondition.
    """
    if steps < 1_000:
        raise ValueError(f"need at least 1000 integration steps, got {steps}")
    m = schedule.total_epochs
    grid = np.linspace(0.0, m, steps + 1)
    breaks = np.array([schedule.alpha1 * m, (1.0 - schedule.alpha2) * m])
    grid = np.unique(np.concatenate([grid, breaks]))
    values = np.array([schedule.schedule_p(t) for t in grid])
    return float(np.trapezoid(values, grid) / m)


# -- path equivalence -----------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    """One named pass/fail entry of an oracle run."""

    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class EquivalenceReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a, b))


def _decoder_matches(teacher: TrackerModel, student: TrackerModel) -> bool:
    t_state = {k: v for k, v in teacher.state().items() if k.startswith("decoder.")}
    s_state = {k: v for k, v in student.state().items() if k.startswith("decoder.")}
    return all(_bitwise_equal(t_state[k], s_state[k]) for k in t_state)


def _projections_are_identity(projections) -> bool:
    for pair in projections:
        w_in, w_out = pair.inp.w.data, pair.out.w.data
        if w_in.shape[0] != w_in.shape[1]:
            return False
        eye = np.eye(w_in.shape[0], dtype=w_in.dtype)
        if not (_bitwise_equal(w_in, eye) and _bitwise_equal(w_out, eye)
                and not pair.inp.b.data.any() and not pair.out.b.data.any()):
            return False
    return True


def path_equivalence_suite(teacher: TrackerModel, student: TrackerModel,
                           plan: StagePlan, projections,
                           rng: np.random.Generator | None = None) -> EquivalenceReport:
    """Bitwise boundary checks on the mask-routed composite.

    (a) the all-teacher path reproduces the teacher's token stream exactly
    (and its prediction too when the student decoder still holds the
    teacher's weights); (b) the all-student path with identity projections
    reproduces the student's own inference forward exactly; (c) running the
    teacher stage-by-stage reproduces its unstaged forward exactly.
    """
    rng = rng or np.random.default_rng(0)
    cfg = teacher.cfg
    z = rng.random((2, cfg.template_side, cfg.template_side))
    x = rng.random((2, cfg.search_side, cfg.search_side))
    comp = CompositeTracker(teacher, student, projections, plan)
    checks = []

    t_snaps, t_pred = teacher.forward_full(z, x, plan)
    zero_snaps, zero_pred = comp.forward(z, x, PathMask.all_teacher(plan.num_stages))
    stream_ok = _bitwise_equal(zero_snaps[-1].data, t_snaps[-1].data)
    if _decoder_matches(teacher, student):
        pred_ok = (_bitwise_equal(zero_pred.score_map.data, t_pred.score_map.data)
                   and _bitwise_equal(zero_pred.offset_map.data, t_pred.offset_map.data))
        detail = "token stream and prediction vs teacher forward"
        passed = stream_ok and pred_ok
    else:
        detail = "token stream vs teacher forward (decoder differs, prediction skipped)"
        passed = stream_ok
    checks.append(CheckResult("all_teacher_path", passed, detail))

    if _projections_are_identity(projections):
        s_snaps, s_pred = student.forward_full(z, x, plan)
        one_snaps, one_pred = comp.forward(z, x, PathMask.all_student(plan.num_stages))
        passed = (_bitwise_equal(one_snaps[-1].data, s_snaps[-1].data)
                  and _bitwise_equal(one_pred.score_map.data, s_pred.score_map.data)
                  and _bitwise_equal(one_pred.offset_map.data, s_pred.offset_map.data))
        detail = "token stream and prediction vs student inference forward"
    else:
        passed = False
        detail = "projections are not exact identities"
    checks.append(CheckResult("all_student_path", passed, detail))

    _, full_pred = teacher.forward_full(z, x)
    passed = (_bitwise_equal(t_pred.score_map.data, full_pred.score_map.data)
              and _bitwise_equal(t_pred.offset_map.data, full_pred.offset_map.data))
    checks.append(CheckResult("stage_recomposition", passed,
                                   "staged teacher forward vs unstaged forward"))
    return EquivalenceReport(checks=tuple(checks))


# -- gradient audit -------------------------------------------------------------

def perturb_params(named_params, rng: np.random.Generator, scale: float = 0.2):
    """Move parameters to generic positions before a finite-difference audit.

    Freshly initialized attention weights are so small that some gradients
    sit at the finite-difference noise floor; adding moderate noise keeps
    every audited gradient well above it without changing what the audit
    proves.
    """
    for _, param in named_params:
        param.data += rng.normal(0.0, scale, size=param.data.shape)


@dataclass
class GradAuditReport:
    max_rel_err: float
    worst_param: str
    param_errs: dict[str, float] = field(default_factory=dict)
    zero_violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.max_rel_err < GRAD_TOL and not self.zero_violations


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return float((np.abs(a - b) / denom).max())


def _audit_params(loss_fn, named_params) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Compare reverse-mode gradients against central finite differences."""
    for _, param in named_params:
        param.grad = None
    with ad.record():
        loss = loss_fn()
        ad.backward(loss)
    grads = {name: (None if p.grad is None else p.grad.copy())
             for name, p in named_params}
    errs = {}
    for name, param in named_params:
        if param.data.dtype != np.float64:
            raise ValueError(f"gradient audit requires float64 parameters, {name} "
                             f"is {param.data.dtype}")
        fd = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = loss_fn().item()
            flat[i] = orig - FD_STEP
            down = loss_fn().item()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * FD_STEP)
        analytic = grads[name]
        if analytic is None:
            analytic = np.zeros_like(fd)
        errs[name] = _relative_error(analytic, fd)
    return errs, grads


def grad_audit_model(model: TrackerModel, batch) -> GradAuditReport:
    """Finite-difference audit of a standalone tracker through the task loss."""
    z, x, cells, offsets = batch

    def loss_fn():
        _, pred = model.forward_full(z, x)
        return track_loss(pred, cells, offsets)

    named = [(n, p) for n, p in model.named_params() if p.requires_grad]
    if not named:
        raise ValueError("model has no trainable parameters to audit")
    errs, _ = _audit_params(loss_fn, named)
    worst = max(errs, key=errs.get)
    return GradAuditReport(max_rel_err=errs[worst], worst_param=worst, param_errs=errs)


def grad_audit_composite(comp: CompositeTracker, batch, mask: PathMask,
                         weights: LossWeights | None = None) -> GradAuditReport:
    """Audit every trainable parameter through a mask-routed forward.

    Also verifies the frozen contract: teacher parameters and the
    projections of unsampled stages must come out of the backward pass
    with exactly no gradient.
    """
    weights = weights or LossWeights()
    z, x, cells, offsets = batch
    plan = comp.plan
    teacher = comp.teacher
    for _, param in teacher.named_params():
        param.grad = None
    for pair in comp.projections:
        for _, param in pair.params("p"):
            param.grad = None
    if weights.needs_teacher:
        t_snaps, t_pred = teacher.forward_full(z, x, plan)

    def loss_fn():
        snaps, pred = comp.forward(z, x, mask)
        parts = {"track": track_loss(pred, cells, offsets)}
        if weights.pred != 0.0:
            parts["pred"] = prediction_guidance_loss(pred, t_pred)
        if weights.feat != 0.0:
            parts["feat"] = feature_mimic_loss(snaps, t_snaps)
        return combine_losses(parts, weights)

    active = [i for i, bit in enumerate(mask.bits) if bit]
    named = []
    for i in active:
        s0, s1 = plan.student_ranges[i]
        for j in range(s0, s1):
            named.extend(comp.student.blocks[j].params(f"student.blocks.{j}"))
        named.extend(comp.projections[i].params(f"proj.{i}"))
    if comp.decoder_trainable:
        named.extend(comp.student.decoder.params("student.decoder"))
    if not named:
        raise ValueError("mask leaves no trainable parameters to audit")
    errs, _ = _audit_params(loss_fn, named)

    violations = []
    for name, param in teacher.named_params():
        if param.grad is not None and param.grad.any():
            violations.append(f"teacher.{name}")
    for i, bit in enumerate(mask.bits):
        if bit:
            continue
        for name, param in comp.projections[i].params(f"proj.{i}"):
            if param.grad is not None and param.grad.any():
                violations.append(name)
    worst = max(errs, key=errs.get)
    return GradAuditReport(max_rel_err=errs[worst], worst_param=worst,
                           param_errs=errs, zero_violations=tuple(violations))


def grad_audit(target, batch, mask: PathMask | None = None,
               weights: LossWeights | None = None) -> GradAuditReport:
    """Dispatch the audit on a standalone tracker or a composite."""
    if isinstance(target, CompositeTracker):
        if mask is None:
            bits = tuple(i % 2 for i in range(target.plan.num_stages))
            mask = PathMask(bits=bits)
        return grad_audit_composite(target, batch, mask, weights)
    if isinstance(target, TrackerModel):
        return grad_audit_model(target, batch)
    raise TypeError(f"cannot audit {type(target).__name__}")


# -- full suite ------------------------------------------------------------------

def _suite_schedule_checks(rng: np.random.Generator) -> list[CheckResult]:
    worst_boundary = 0.0
    worst_step = 0.0
    worst_integral = 0.0
    monotone = True
    for _ in range(20):
        p_init = float(rng.uniform(0.05, 0.95))
        alpha1 = float(rng.uniform(0.0, 0.45))
        alpha2 = float(rng.uniform(0.0, 0.45))
        m = int(rng.integers(10, 200))
        s = ReplacementSchedule(p_init=p_init, alpha1=alpha1, alpha2=alpha2,
                                total_epochs=m)
        worst_boundary = max(worst_boundary,
                             abs(s.schedule_p(0.0) - p_init),
                             abs(s.schedule_p(float(m)) - 1.0))
        grid = np.linspace(0.0, m, 2001)
        values = np.array([s.schedule_p(t) for t in grid])
        if np.any(np.diff(values) < -1e-12):
            monotone = False
        worst_step = max(worst_step, float(np.abs(np.diff(values)).max()))
        worst_integral = max(worst_integral,
                             abs(integrate_schedule(s, 100_000) - s.expected_p()))
    half = ReplacementSchedule(p_init=0.5, alpha1=0.1, alpha2=0.1, total_epochs=60)
    closed = (1.0 + half.p_init) / 2.0 + (1.0 - half.p_init) / 2.0 * (half.alpha2 - half.alpha1)
    return [
        CheckResult("schedule_boundaries", worst_boundary == 0.0,
                    f"max boundary error {worst_boundary:.2e}"),
        CheckResult("schedule_monotone_continuous", monotone and worst_step < 0.05,
                    f"monotone={monotone}, max grid step {worst_step:.4f}"),
        CheckResult("schedule_integral", worst_integral < 1e-6,
                    f"max |numeric - closed| {worst_integral:.2e}"),
        CheckResult("schedule_closed_form",
                    abs(half.expected_p() - closed) < 1e-9,
                    f"|expected_p - closed form| {abs(half.expected_p() - closed):.2e}"),
    ]


def _suite_sampler_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    sums_ok = True
    worst_sum = 0.0
    for n in (1, 2, 4, 8, 16):
        for p in (0.1, 0.5, 0.9):
            err = abs(enumerate_paths(n, p).probs.sum() - 1.0)
            worst_sum = max(worst_sum, err)
            sums_ok = sums_ok and err < 1e-12
    out.append(CheckResult("mask_enumeration", sums_ok,
                           f"max |sum(probs) - 1| {worst_sum:.2e} over N<=16"))
    draws = 20_000
    worst = ""
    passed = True
    for p in (0.1, 0.5, 0.9):
        dev = sampler_consistency(4, p, draws, rng)
        maxprob = float(enumerate_paths(4, p).probs.max())
        bound = 4.0 * np.sqrt(maxprob * (1.0 - maxprob) / draws)
        if dev >= bound:
            passed = False
        worst += f" p={p}: {dev:.4f}<{bound:.4f}"
    out.append(CheckResult("sampler_consistency", passed, worst.strip()))
    return out


def _tiny_setup(dtype, seed: int = 0):
    from .model import TrackerConfig

    cfg = TrackerConfig(embed_dim=8, num_heads=2, mlp_ratio=2, num_layers=4,
                        patch_size=4, template_side=8, search_side=16)
    teacher = TrackerModel(cfg, np.random.default_rng(seed), dtype=dtype)
    teacher.freeze()
    plan = compress_mod.divide_stages(cfg.num_layers, 2)
    student, projections = compress_mod.build_student(
        teacher, plan, np.random.default_rng(seed + 1))
    return teacher, student, plan, projections


def _suite_grad_checks(rng: np.random.Generator) -> list[CheckResult]:
    from .data import TaskSpec, collate, gen_batch

    teacher, student, plan, projections = _tiny_setup(np.float64)
    perturb_params(teacher.named_params(), rng)
    perturb_params(student.named_params(), rng)
    for i, pair in enumerate(projections):
        perturb_params(pair.params(f"proj.{i}"), rng)
    task = TaskSpec(template_side=8, search_side=16, patch=4, noise=0.1, distractors=1)
    batch = collate(gen_batch(rng, task, 2))
    comp = CompositeTracker(teacher, student, projections, plan)
    comp_rep = grad_audit(comp, batch, mask=PathMask(bits=(1, 0)))
    model_rep = grad_audit(student, batch)
    return [
        CheckResult("grad_audit_composite", comp_rep.max_rel_err < GRAD_TOL,
                    f"max rel err {comp_rep.max_rel_err:.2e} at {comp_rep.worst_param}"),
        CheckResult("frozen_zero_grads", not comp_rep.zero_violations,
                    "teacher and unused projections received no gradient"
                    if not comp_rep.zero_violations
                    else f"nonzero grads on {comp_rep.zero_violations}"),
        CheckResult("grad_audit_model", model_rep.max_rel_err < GRAD_TOL,
                    f"max rel err {model_rep.max_rel_err:.2e} at {model_rep.worst_param}"),
    ]


def run_suite(f64: bool = False, seed: int = 0) -> list[CheckResult]:
    """Run every oracle family on small fixtures; returns the pass/fail list."""
    rng = np.random.default_rng(seed)
    results = []
    results.extend(_suite_schedule_checks(rng))
    results.extend(_suite_sampler_checks(rng))
    dtype = np.float64 if f64 else np.float32
    teacher, student, plan, projections = _tiny_setup(dtype)
    results.extend(path_equivalence_suite(teacher, student, plan, projections).checks)
    results.extend(_suite_grad_checks(rng))
    return results
