"""The finite-difference suite itself: coverage, thresholds, and the
negative control proving a broken backward is caught."""

import numpy as np
import pytest

from mstr import autodiff as ad
from mstr.autodiff import Tensor
from mstr.gradcheck import (DEFAULT_THRESHOLD, check_full_model,
                            check_scalar_function, op_cases, run_all,
                            run_op_checks)

EXPECTED_OPS = {
    "add", "sub", "neg", "mul", "div", "pow", "matmul", "matmul_batched",
    "reshape", "transpose", "getitem_slice", "getitem_fancy", "sum_axis",
    "mean", "exp", "log", "sqrt", "relu", "absolute", "maximum", "minimum",
    "clip", "sigmoid", "inverse_sigmoid", "softmax", "concatenate", "stack",
    "linear", "bilinear_gather_features", "bilinear_gather_coords",
    "bilinear_gather_multihead_values", "bilinear_gather_multihead_coords",
    "layer_norm", "ffn", "single_scale_attention", "ms_deform_attention",
}


class TestOpSuite:
    def test_every_op_passes(self):
        reports = run_op_checks(seed=0)
        failed = [r.name for r in reports if not r.passed]
        assert failed == []

    def test_each_op_checked_exactly_once(self):
        rng = np.random.default_rng(0)
        names = [name for name, _, _ in op_cases(rng)]
        assert len(names) == len(set(names))
        assert set(names) >= EXPECTED_OPS

    def test_errors_are_small_not_merely_passing(self):
        reports = run_op_checks(seed=0)
        worst = max(r.max_rel_error for r in reports)
        assert worst <= DEFAULT_THRESHOLD

    def test_seed_changes_probe_but_not_verdict(self):
        for seed in (1, 2):
            assert all(r.passed for r in run_op_checks(seed=seed))


class TestScalarCheck:
    def test_quadratic_passes(self):
        report = check_scalar_function("quad", lambda t: (t * t).sum(),
                                       np.array([0.3, -0.7, 1.1]))
        assert report.passed
        assert report.max_rel_error < 1e-7

    def test_corrupted_backward_is_caught(self):
        """Negative control: a function whose analytic gradient is scaled
        by 1.01 must fail the 1e-4 gate."""

        def corrupted(t: Tensor) -> Tensor:
            y = t * t
            true_backward = y._backward
            def scaled(g):
                true_backward(g)
                t.grad *= 1.01
            y._backward = scaled
            return y.sum()

        report = check_scalar_function("corrupted", corrupted,
                                       np.array([0.4, 0.9]))
        assert not report.passed
        assert report.max_rel_error > 1e-3

    def test_zero_gradient_function_passes(self):
        report = check_scalar_function("const", lambda t: (t * 0.0).sum(),
                                       np.array([0.5, 0.5]))
        assert report.passed


class TestFullModel:
    def test_full_model_within_threshold(self):
        report = check_full_model(seed=0)
        assert report.name == "full_model"
        assert report.passed, report.max_rel_error

    def test_run_all_includes_model_and_ops(self):
        reports = run_all(seed=0)
        names = [r.name for r in reports]
        assert "full_model" in names
        assert len(names) == len(run_op_checks(seed=0)) + 1
        assert all(r.passed for r in reports)
