"""AdamW unit tests, including a hand-rolled scalar trajectory oracle."""

import numpy as np
import pytest

from stageswap.autodiff import ShapeError, Tensor
from stageswap.optim import AdamW


def scalar_param(value, dtype=np.float64):
    return Tensor(np.array([value]), requires_grad=True, dtype=dtype)


def scalar_grad(value):
    return np.array([value], dtype=np.float64)


def reference_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar reference: decay first, then bias-corrected Adam."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        theta = theta - lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        out.append(theta)
    return out


class TestAdamW:
    def test_first_step_moves_by_about_lr(self):
        p = scalar_param(1.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = scalar_grad(1.0)
        opt.step()
        assert p.data.item() == pytest.approx(0.9, abs=1e-6)

    def test_zero_grad_zero_decay_leaves_param(self):
        p = scalar_param(3.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = scalar_grad(0.0)
        opt.step()
        assert p.data.item() == pytest.approx(3.0, abs=0.0)

    def test_three_step_trajectory_matches_hand_reference(self):
        grads = [0.5, -0.25, 1.5]
        want = reference_adamw(1.0, grads, lr=0.1, wd=0.1)
        p = scalar_param(1.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.1)
        got = []
        for g in grads:
            p.grad = scalar_grad(g)
            opt.step()
            got.append(p.data.item())
        np.testing.assert_allclose(got, want, rtol=0.0, atol=1e-12)

    def test_decay_applied_before_moment_update(self):
        # with g=0 the Adam half contributes nothing, leaving pure decay
        p = scalar_param(2.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = scalar_grad(0.0)
        opt.step()
        assert p.data.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)

    def test_missing_grad_skips_param_entirely(self):
        p = scalar_param(1.0)
        q = scalar_param(1.0)
        opt = AdamW([p, q], lr=0.1, weight_decay=0.5)
        p.grad = scalar_grad(1.0)
        opt.step()
        assert q.data.item() == 1.0           # no decay either
        assert opt.state[1].step == 0  # step counter untouched
        assert opt.state[0].step == 1

    def test_zero_grad_clears(self):
        p = scalar_param(1.0)
        opt = AdamW([p], lr=0.1)
        p.grad = scalar_grad(1.0)
        opt.zero_grad()
        assert p.grad is None

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = AdamW([p], lr=0.1)
        p.grad = np.zeros(4, dtype=np.float32)
        with pytest.raises(ShapeError):
            opt.step()

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            AdamW([scalar_param(1.0)], lr=0.0)

    def test_vector_params_track_scalar_reference_per_element(self):
        grads = np.array([[0.5, -0.25, 1.5], [1.0, 1.0, 1.0]]).T  # 3 steps x 2 elems
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([p], lr=0.05, weight_decay=0.2)
        for g in grads:
            p.grad = g.astype(np.float64)
            opt.step()
        want0 = reference_adamw(1.0, grads[:, 0], lr=0.05, wd=0.2)[-1]
        want1 = reference_adamw(-2.0, grads[:, 1], lr=0.05, wd=0.2)[-1]
        np.testing.assert_allclose(p.data, [want0, want1], rtol=0.0, atol=1e-12)
