"""Tests for the optimizer against closed-form single-step behavior."""

import numpy as np
import pytest

from mstr.nn import Parameter
from mstr.optim import AdamW, clip_grad_norm


def _param(values):
    p = Parameter(np.asarray(values, dtype=np.float64))
    return p


class TestAdamW:
    def test_first_step_moves_by_lr_sign(self):
        """With bias correction, the first step is lr * g / (|g| + eps)."""
        p = _param([1.0, -2.0])
        p.grad = np.array([0.5, -0.25])
        opt = AdamW([("p", p)], lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)

    def test_skips_parameters_without_gradient(self):
        p = _param([3.0])
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
        opt.step()
        np.testing.assert_array_equal(p.data, [3.0])

    def test_decay_is_decoupled(self):
        """Zero gradient still shrinks the weight by lr * wd * w."""
        p = _param([2.0])
        p.grad = np.zeros(1)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
        opt.step()
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_zero_grad_resets(self):
        p = _param([1.0])
        p.grad = np.ones(1)
        opt = AdamW([("p", p)], lr=0.1)
        opt.zero_grad()
        assert p.grad is None

    def test_converges_on_quadratic(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=4)
        p = _param(np.zeros(4))
        opt = AdamW([("p", p)], lr=0.05)
        for _ in range(500):
            p.grad = 2.0 * (p.data - target)
            opt.step()
        np.testing.assert_allclose(p.data, target, atol=1e-3)

    def test_moments_track_named_parameters(self):
        a, b = _param([0.0]), _param([0.0])
        opt = AdamW([("a", a), ("b", b)], lr=0.1)
        a.grad = np.array([1.0])
        b.grad = np.array([-1.0])
        opt.step()
        assert opt._m["a"][0] > 0 > opt._m["b"][0]


class TestClipGradNorm:
    def test_reports_norm_without_clipping(self):
        p = _param([0.0, 0.0])
        p.grad = np.array([3.0, 4.0])
        norm = clip_grad_norm([("p", p)], max_norm=10.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_array_equal(p.grad, [3.0, 4.0])

    def test_scales_down_to_max_norm(self):
        p = _param([0.0, 0.0])
        p.grad = np.array([3.0, 4.0])
        clip_grad_norm([("p", p)], max_norm=1.0)
        np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)

    def test_joint_norm_over_parameters(self):
        a, b = _param([0.0]), _param([0.0])
        a.grad = np.array([3.0])
        b.grad = np.array([4.0])
        norm = clip_grad_norm([("a", a), ("b", b)], max_norm=2.5)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(a.grad, [1.5])
        np.testing.assert_allclose(b.grad, [2.0])
