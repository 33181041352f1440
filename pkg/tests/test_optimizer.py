"""
Tests for AdamW, the warmup/decay schedule and gradient clipping.
"""
import math
import os
import sys

import numpy as np
import pytest

# Add source directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'source'))

from numerics import ParameterSet
from optimizer import AdamW, ParamGroup, clip_grad_norm, global_grad_norm, linear_warmup_decay


def make_params() -> ParameterSet:
    params = ParameterSet(seed=0)
    params.create("encoder.w", (2, 3))
    params.create("gega.b", (3,), init="ones")
    return params


class TestAdamW:
    """Parameter updates."""

    def test_first_step_moves_by_lr(self):
        """After bias correction the first Adam step is lr * g / (|g| + eps)."""
        params = make_params()
        before = params["gega.b"].values.copy()
        params["gega.b"].grad = np.array([2.0, -0.5, 0.0])
        params["encoder.w"].grad = np.zeros((2, 3))
        AdamW(params, [ParamGroup(["encoder.w"], 0.1), ParamGroup(["gega.b"], 0.01)]).step()
        g = np.array([2.0, -0.5, 0.0])
        expected = before - 0.01 * g / (np.abs(g) + 1e-6)
        assert np.allclose(params["gega.b"].values, expected, atol=1e-12)

    def test_group_learning_rates(self):
        """Each group uses its own learning rate."""
        params = make_params()
        optimizer = AdamW(params, [ParamGroup(["encoder.w"], 0.1), ParamGroup(["gega.b"], 0.01)])
        assert optimizer.lr_of("encoder.w") == 0.1
        assert optimizer.lr_of("gega.b") == 0.01

    def test_lr_scale(self):
        """lr_scale 0 leaves parameters unchanged."""
        params = make_params()
        before = params.state_dict()
        for _, tensor in params.items():
            tensor.grad = np.ones_like(tensor.values)
        AdamW(params, [ParamGroup(params.names(), 0.1)]).step(lr_scale=0.0)
        for name, values in params.state_dict().items():
            assert np.array_equal(values, before[name])

    def test_minimizes_quadratic(self):
        """Repeated steps drive a quadratic toward its minimum."""
        params = ParameterSet(seed=0)
        x = params.create("x", (4,), init="ones")
        optimizer = AdamW(params, [ParamGroup(["x"], 0.05)])
        for _ in range(1000):
            x.grad = 2 * (x.values - 3.0)
            optimizer.step()
        assert np.allclose(x.values, 3.0, atol=0.05)

    def test_weight_decay(self):
        """Decoupled decay shrinks parameters even with zero gradients."""
        params = ParameterSet(seed=0)
        x = params.create("x", (2,), init="ones")
        x.grad = np.zeros(2)
        AdamW(params, [ParamGroup(["x"], 0.1)], weight_decay=0.5).step()
        assert np.allclose(x.values, 0.95)

    def test_overlapping_groups(self):
        """A parameter may belong to one group only."""
        params = make_params()
        with pytest.raises(ValueError, match="more than one group"):
            AdamW(params, [ParamGroup(["encoder.w"], 0.1), ParamGroup(["encoder.w"], 0.2)])

    def test_unknown_parameter(self):
        """Groups must name existing parameters."""
        with pytest.raises(KeyError):
            AdamW(make_params(), [ParamGroup(["missing"], 0.1)])


class TestSchedule:
    """Linear warmup then linear decay."""

    def test_warmup_rises(self):
        """Multipliers rise linearly to 1 over the warmup steps."""
        assert [linear_warmup_decay(s, 4, 20) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]

    def test_decay_to_zero(self):
        """After warmup the multiplier falls linearly and reaches 0 at the end."""
        assert linear_warmup_decay(4, 4, 20) == 1.0
        assert linear_warmup_decay(12, 4, 20) == 0.5
        assert linear_warmup_decay(20, 4, 20) == 0.0

    def test_no_warmup(self):
        """Zero warmup starts at full rate."""
        assert linear_warmup_decay(0, 0, 10) == 1.0
        assert linear_warmup_decay(5, 0, 10) == 0.5

    def test_never_negative(self):
        """Steps past the end stay at 0."""
        assert linear_warmup_decay(30, 2, 10) == 0.0


class TestClipping:
    """Global-norm clipping."""

    def test_norm(self):
        """The global norm covers every parameter's gradient."""
        params = make_params()
        params["encoder.w"].grad = np.full((2, 3), 1.0)
        params["gega.b"].grad = np.array([3.0, 0.0, 0.0])
        assert global_grad_norm(params) == pytest.approx(math.sqrt(15.0))

    def test_clips_large_gradients(self):
        """Gradients above max_norm are rescaled to max_norm; the pre-clip norm is returned."""
        params = make_params()
        params["encoder.w"].grad = np.zeros((2, 3))
        params["gega.b"].grad = np.array([3.0, 4.0, 0.0])
        norm = clip_grad_norm(params, 1.0)
        assert norm == pytest.approx(5.0)
        assert global_grad_norm(params) == pytest.approx(1.0, abs=1e-6)

    def test_small_gradients_untouched(self):
        """Gradients within max_norm are left alone."""
        params = make_params()
        params["encoder.w"].grad = np.zeros((2, 3))
        params["gega.b"].grad = np.array([0.3, 0.4, 0.0])
        clip_grad_norm(params, 1.0)
        assert np.array_equal(params["gega.b"].grad, [0.3, 0.4, 0.0])
