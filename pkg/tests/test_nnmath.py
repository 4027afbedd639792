import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tstnet.nnmath import (
    Affine,
    DimensionError,
    GRUCell,
    affine,
    grad_check,
    grad_check_functional,
    gru_step,
    leaky_relu,
    maxpool_axis,
    relative_error,
    sigmoid,
    tanh,
    uniform_fan_in,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def zero_cell(n_in=3, width=3):
    cell = GRUCell(n_in, width, torch.Generator().manual_seed(0))
    with torch.no_grad():
        for p in cell.parameters():
            p.zero_()
    return cell


class TestAffine:
    def test_identity(self):
        y = affine(t([1.0, 2.0]), torch.eye(2, dtype=torch.float64), t([0.0, 0.0]))
        np.testing.assert_array_equal(y.numpy(), [1.0, 2.0])

    def test_permutation(self):
        y = affine(t([1.0, 0.0]), t([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(y.numpy(), [0.0, 1.0])

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)"):
            affine(t([1.0, 2.0, 3.0]), torch.eye(2, dtype=torch.float64))

    def test_stacked_matches_per_stream(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(4, 3, 5, generator=g, dtype=torch.float64)
        W = torch.randn(3, 5, 2, generator=g, dtype=torch.float64)
        b = torch.randn(3, 2, generator=g, dtype=torch.float64)
        y = affine(x, W, b)
        for p in range(3):
            np.testing.assert_allclose(y[:, p].numpy(), (x[:, p] @ W[p] + b[p]).numpy(), atol=1e-12)

    def test_gradient_vs_finite_differences(self):
        g = torch.Generator().manual_seed(2)
        x = torch.randn(3, 4, generator=g, dtype=torch.float64)
        W = torch.randn(4, 2, generator=g, dtype=torch.float64)
        b = torch.randn(2, generator=g, dtype=torch.float64)
        R = torch.randn(3, 2, generator=g, dtype=torch.float64)
        res = grad_check(lambda _: (affine(x, W, b) * R).sum(), {"x": x, "W": W, "b": b})
        assert res.max_rel_error < 1e-6

    def test_init_bounds(self):
        w = uniform_fan_in((64, 8), 64, torch.Generator().manual_seed(0))
        assert w.abs().max() <= 1 / 8
        assert Affine(4, 3, torch.Generator()).b.abs().sum() == 0


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(t(0.0)).item() == 0.5

    def test_leaky_relu_negative(self):
        assert leaky_relu(t(-1.0), 0.01).item() == pytest.approx(-0.01)

    def test_leaky_relu_positive_passthrough(self):
        assert leaky_relu(t(3.0), 0.01).item() == 3.0

    @given(arrays(np.float64, 7, elements=st.floats(-80, 80)))
    def test_sigmoid_range_and_finiteness(self, x):
        y = sigmoid(torch.from_numpy(x)).numpy()
        assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))
        assert np.all(np.isfinite(tanh(torch.from_numpy(x)).numpy()))

    def test_gradients(self):
        x = torch.randn(5, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        for fn in (sigmoid, tanh, lambda v: leaky_relu(v, 0.01)):
            res = grad_check(lambda _: fn(x).pow(2).sum(), {"x": x})
            assert res.max_rel_error < 1e-6


class TestGRU:
    def test_zero_network_zero_state(self):
        cell = zero_cell()
        h = gru_step(cell, torch.randn(3), torch.zeros(3))
        np.testing.assert_array_equal(h.detach().numpy(), 0.0)

    def test_zero_network_halves_state(self):
        cell = zero_cell()
        v = torch.tensor([1.0, -2.0, 4.0])
        h = gru_step(cell, torch.randn(3), v)
        np.testing.assert_allclose(h.detach().numpy(), 0.5 * v.numpy())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_zero_weights_zero_state_any_input(self, seed):
        x = torch.randn(3, generator=torch.Generator().manual_seed(seed)) * 100
        assert gru_step(zero_cell(), x, torch.zeros(3)).abs().sum() == 0

    def test_hidden_bounded(self):
        g = torch.Generator().manual_seed(5)
        cell = GRUCell(4, 6, g)
        h = torch.zeros(6)
        for _ in range(50):
            h = gru_step(cell, torch.randn(4, generator=g) * 10, h)
            assert h.abs().max() <= 1.0

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            gru_step(zero_cell(3, 3), torch.zeros(3), torch.zeros(4))

    def test_gradients(self):
        g = torch.Generator().manual_seed(6)
        cell = GRUCell(3, 4, g).double()
        x = torch.randn(3, generator=g, dtype=torch.float64)
        h = torch.randn(4, generator=g, dtype=torch.float64)
        R = torch.randn(4, generator=g, dtype=torch.float64)
        res = grad_check(lambda _: (gru_step(cell, x, h) * R).sum(),
                         {"x": x, "h": h, **dict(cell.named_parameters())})
        assert res.max_rel_error < 1e-4


class TestMaxpool:
    def test_per_column(self):
        x = t([[1.0, -0.01], [0.0, 2.0], [-0.03, 0.0]])
        np.testing.assert_array_equal(maxpool_axis(x, 0).numpy(), [1.0, 2.0])

    def test_single_element_identity(self):
        x = t([[3.0, -1.0]])
        np.testing.assert_array_equal(maxpool_axis(x, 0).numpy(), [3.0, -1.0])

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            maxpool_axis(torch.zeros(0, 3), 0)

    def test_ties_route_to_first(self):
        x = t([[2.0], [2.0], [1.0]]).requires_grad_()
        maxpool_axis(x, 0).sum().backward()
        np.testing.assert_array_equal(x.grad.numpy().ravel(), [1.0, 0.0, 0.0])

    def test_joint_axes_and_mask(self):
        x = t([[[1.0], [9.0]], [[5.0], [2.0]]])
        assert maxpool_axis(x, (0, 1)).item() == 9.0
        mask = torch.tensor([[[True], [False]], [[True], [True]]])
        assert maxpool_axis(x, (0, 1), mask=mask).item() == 5.0

    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e6, 1e6)))
    def test_bounds_every_element(self, x):
        out = maxpool_axis(torch.from_numpy(x), 0).numpy()
        assert np.all(out[None] >= x)
        assert np.all((x == out[None]).any(axis=0))

    def test_gradient(self):
        x = torch.randn(4, 6, 3, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
        res = grad_check(lambda _: (maxpool_axis(x, 1) ** 2).sum(), {"x": x})
        assert res.max_rel_error < 1e-4


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0
    assert relative_error(1e-12, 0.0) < 1e-6
    assert relative_error(2.0, 1.0) == 0.5


def test_grad_check_catches_wrong_gradient():
    x = torch.randn(3, dtype=torch.float64)

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            return v ** 2

        @staticmethod
        def backward(ctx, g):
            return g  # wrong on purpose

    res = grad_check(lambda _: Bad.apply(x).sum(), {"x": x})
    assert res.max_rel_error > 1e-2


def test_grad_check_rejects_float32():
    with pytest.raises(TypeError):
        grad_check(lambda _: torch.zeros(()), {"x": torch.zeros(2)})


def test_batched_check_agrees_with_sequential():
    g = torch.Generator().manual_seed(3)
    cell = GRUCell(4, 5, g).double()
    x, h, R = (torch.randn(n, generator=g, dtype=torch.float64) for n in (4, 5, 5))
    seq = grad_check(lambda _: (gru_step(cell, x, h) * R).sum(), {"x": x, "h": h})
    vec = grad_check_functional(lambda v: (gru_step(cell, v["x"], v["h"]) * R).sum(),
                                {"x": x, "h": h}, chunk=3)
    assert seq.checked == vec.checked == 9
    assert vec.max_rel_error < 1e-6 and seq.max_rel_error < 1e-6


def test_batched_check_catches_wrong_gradient():
    x = torch.randn(6, dtype=torch.float64)
    # detach hides one factor from autograd, so the analytic gradient is half the true one
    res = grad_check_functional(lambda v: (v["x"].detach() * v["x"]).sum(), {"x": x})
    assert res.max_rel_error > 0.4


def test_batched_check_samples_entries():
    x = torch.randn(50, dtype=torch.float64)
    res = grad_check_functional(lambda v: (v["x"] ** 3).sum(), {"x": x}, max_entries=7)
    assert res.checked == 7 and res.max_rel_error < 1e-6
