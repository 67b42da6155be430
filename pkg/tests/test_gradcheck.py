import numpy as np
import pytest

from trackrank import tensor as tc
from trackrank.gradcheck import (grad_check, head_builder, relative_error, run_suite,
                                 triplet_builder)
from trackrank.tensor import Tensor


def test_constant_loss_has_zero_gradients():
    def build(rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        return {"x": x}, lambda: Tensor(2.5) + (x * 0.0).sum()

    report = grad_check(build)
    assert report.passed
    assert report.errors == {"x": 0.0}


def test_triplet_over_eight_embeddings_passes():
    report = grad_check(triplet_builder, 1e-4, seed=3)
    assert report.passed, report.errors


def test_lstm_over_four_frames_passes():
    report = grad_check(head_builder("lstm_final"), 1e-4, seed=1)
    assert report.passed, report.errors


def test_too_tight_tolerance_fails():
    report = grad_check(head_builder("gru_avg"), 1e-14, seed=0)
    assert not report.passed


def test_non_finite_node_is_reported():
    def build(rng):
        x = Tensor(np.array([800.0]), requires_grad=True)
        return {"x": x}, lambda: tc.exp(x).sum()

    report = grad_check(build)
    assert not report.passed
    assert "exp" in report.failure


def test_relative_error_scale():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    # vanishing gradients compare against the floor
    assert relative_error(np.array([0.0]), np.array([1e-11])) == pytest.approx(1e-5)


def test_unknown_suite_target():
    with pytest.raises(KeyError):
        run_suite(["nope"], seeds=1)


def test_suite_subset_runs():
    rows = run_suite(["avg", "softmax"], seeds=2)
    assert [r.name for r in rows] == ["avg", "softmax"]
    assert all(r.passed for r in rows)
