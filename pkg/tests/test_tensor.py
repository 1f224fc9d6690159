"""Numeric core: forward semantics, tape replay, and finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inod.errors import ArgumentError, DimensionError
from inod.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    focal_loss_with_logits,
    masked_merge,
    mean_all,
    mul,
    nn_resize,
    nn_resize_chw,
    relu,
    scale,
    sigmoid,
    sum_all,
    tensor,
)

from conftest import numeric_grad, rel_error


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = tensor(rng.normal(size=(1, 5, 5)))
        w = tensor(np.ones((1, 1, 1, 1)))
        b = tensor(np.zeros(1))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_gives_bias(self, rng):
        x = tensor(np.zeros((2, 6, 6)))
        w = tensor(rng.normal(size=(3, 2, 3, 3)))
        b = tensor(np.array([1.5, -2.0, 0.25]))
        out = conv2d(x, w, b, stride=1, padding=1)
        for c in range(3):
            np.testing.assert_allclose(out.data[c], b.data[c])

    def test_output_shape(self, rng):
        x = tensor(rng.normal(size=(2, 8, 8)))
        w = tensor(rng.normal(size=(4, 2, 4, 4)))
        b = tensor(np.zeros(4))
        out = conv2d(x, w, b, stride=2, padding=1)
        assert out.data.shape == (4, 4, 4)

    def test_weight_gradient_matches_finite_differences(self, rng):
        # nearest shape to the 4x4 stride-2 pad-1 case that satisfies divisibility
        x = tensor(rng.normal(size=(2, 5, 5)))
        w = tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = tensor(np.zeros(3), requires_grad=True)

        with Tape() as tape:
            loss = sum_all(conv2d(x, w, b, stride=2, padding=1))
        grads = backward(loss, tape)

        def forward():
            return conv2d(x, w, b, stride=2, padding=1).data.sum()

        assert rel_error(grads[w], numeric_grad(forward, w.data)) < 1e-6
        assert rel_error(grads[b], numeric_grad(forward, b.data)) < 1e-6

    def test_non_divisible_extent_raises(self, rng):
        x = tensor(rng.normal(size=(2, 4, 4)))
        w = tensor(rng.normal(size=(3, 2, 3, 3)))
        b = tensor(np.zeros(3))
        with pytest.raises(DimensionError, match="divisible"):
            conv2d(x, w, b, stride=2, padding=1)

    def test_channel_mismatch_names_axes(self, rng):
        x = tensor(rng.normal(size=(3, 4, 4)))
        w = tensor(rng.normal(size=(2, 2, 1, 1)))
        b = tensor(np.zeros(2))
        with pytest.raises(DimensionError, match="channels"):
            conv2d(x, w, b)

    def test_linearity(self, rng):
        xa = rng.normal(size=(2, 6, 6))
        xb = rng.normal(size=(2, 6, 6))
        w = tensor(rng.normal(size=(3, 2, 3, 3)))
        b = tensor(np.zeros(3))
        alpha, beta = 0.7, -1.3
        combined = conv2d(tensor(alpha * xa + beta * xb), w, b, padding=1)
        separate = alpha * conv2d(tensor(xa), w, b, padding=1).data + beta * conv2d(
            tensor(xb), w, b, padding=1
        ).data
        assert rel_error(combined.data, separate) < 1e-10


class TestMaskedMerge:
    def test_all_zero_mask(self, rng):
        a = tensor(rng.normal(size=(3, 4, 4)))
        b = tensor(rng.normal(size=(3, 4, 4)))
        out = masked_merge(a, b, np.zeros((4, 4), dtype=np.uint8))
        np.testing.assert_array_equal(out.data, b.data)

    def test_all_one_mask(self, rng):
        a = tensor(rng.normal(size=(3, 4, 4)))
        b = tensor(rng.normal(size=(3, 4, 4)))
        out = masked_merge(a, b, np.ones((4, 4), dtype=np.uint8))
        np.testing.assert_array_equal(out.data, a.data)

    def test_small_example(self):
        a = tensor([[[1.0, 2.0], [3.0, 4.0]]])
        b = tensor([[[5.0, 6.0], [7.0, 8.0]]])
        mask = np.array([[1, 0], [0, 1]])
        out = masked_merge(a, b, mask)
        np.testing.assert_array_equal(out.data, [[[1.0, 6.0], [7.0, 4.0]]])

    def test_dimension_mismatch(self, rng):
        a = tensor(rng.normal(size=(3, 4, 4)))
        with pytest.raises(DimensionError):
            masked_merge(a, a, np.zeros((5, 4), dtype=np.uint8))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_conservation_exact(self, seed):
        r = np.random.default_rng(seed)
        shape = (int(r.integers(1, 4)), int(r.integers(1, 7)), int(r.integers(1, 7)))
        a = r.normal(size=shape)
        b = r.normal(size=shape)
        mask = r.integers(0, 2, size=shape[1:]).astype(np.uint8)
        out = masked_merge(tensor(a), tensor(b), mask).data
        assert (np.abs(out - a) * mask).sum() == 0.0
        assert (np.abs(out - b) * (1 - mask)).sum() == 0.0

    def test_gradient_routing(self, rng):
        a = tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        b = tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        mask = rng.integers(0, 2, size=(3, 3)).astype(np.uint8)
        with Tape() as tape:
            loss = sum_all(masked_merge(a, b, mask))
        grads = backward(loss, tape)
        np.testing.assert_array_equal(grads[a], np.broadcast_to(mask, (2, 3, 3)).astype(float))
        np.testing.assert_array_equal(grads[b], np.broadcast_to(1 - mask, (2, 3, 3)).astype(float))


class TestNnResize:
    def test_identity_at_equal_dims(self, rng):
        grid = rng.integers(0, 2, size=(5, 7))
        np.testing.assert_array_equal(nn_resize(grid, 5, 7), grid)

    def test_single_cell_broadcast(self):
        grid = np.array([[3.5]])
        out = nn_resize(grid, 4, 6)
        np.testing.assert_array_equal(out, np.full((4, 6), 3.5))

    def test_block_replication(self):
        grid = np.array([[1, 0], [0, 1]])
        out = nn_resize(grid, 4, 4)
        expected = np.array(
            [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
        )
        np.testing.assert_array_equal(out, expected)

    def test_zero_dim_raises(self):
        with pytest.raises(ArgumentError):
            nn_resize(np.ones((2, 2)), 0, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.floats(-10, 10))
    def test_constant_grid_stays_constant(self, out_h, out_w, value):
        grid = np.full((3, 5), value)
        out = nn_resize(grid, out_h, out_w)
        assert (out == value).all()

    def test_chw_resize_gradient(self, rng):
        x = tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(nn_resize_chw(x, 6, 9))
        grads = backward(loss, tape)

        def forward():
            return nn_resize_chw(x, 6, 9).data.sum()

        assert rel_error(grads[x], numeric_grad(forward, x.data)) < 1e-8


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        grads = backward(loss, tape)
        np.testing.assert_array_equal(grads[x], np.ones((3, 4)))

    def test_half_square_sum_gives_x(self, rng):
        x = tensor(rng.normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = scale(sum_all(mul(x, x)), 0.5)
        grads = backward(loss, tape)
        np.testing.assert_allclose(grads[x], x.data, rtol=1e-12)

    def test_unreachable_leaf_is_zero(self, rng):
        x = tensor(rng.normal(size=(2, 2)), requires_grad=True)
        y = tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        grads = backward(loss, tape)
        assert y not in grads
        np.testing.assert_array_equal(grads[y], np.zeros((2, 2)))

    def test_non_scalar_loss_raises(self, rng):
        x = tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            out = relu(x)
        with pytest.raises(ArgumentError, match="scalar"):
            backward(out, tape)

    def test_composite_graph_matches_finite_differences(self, rng):
        x = tensor(rng.normal(size=(1, 8, 8)))
        w = tensor(rng.normal(size=(2, 1, 3, 3)) * 0.5, requires_grad=True)
        b = tensor(rng.normal(size=2) * 0.1, requires_grad=True)
        hw = tensor(rng.normal(size=(1, 2, 1, 1)), requires_grad=True)
        hb = tensor(np.zeros(1), requires_grad=True)
        target = rng.integers(0, 2, size=(8, 8))

        def graph():
            body = sigmoid(relu(conv2d(x, w, b, padding=1)))
            logits = conv2d(body, hw, hb)
            return focal_loss_with_logits(logits, target)

        with Tape() as tape:
            loss = graph()
        grads = backward(loss, tape)

        for param in (w, b, hw, hb):
            fd = numeric_grad(lambda: graph().data, param.data)
            assert rel_error(grads[param], fd) < 1e-4

    def test_gradient_accumulates_over_reuse(self, rng):
        x = tensor(rng.normal(size=(3,)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(add(x, x))
        grads = backward(loss, tape)
        np.testing.assert_array_equal(grads[x], np.full(3, 2.0))


class TestPointwiseOps:
    @pytest.mark.parametrize(
        "op,builder",
        [
            ("relu", lambda x: relu(x)),
            ("sigmoid", lambda x: sigmoid(x)),
            ("mean", lambda x: mean_all(x)),
            ("scale", lambda x: scale(x, -2.5)),
        ],
    )
    def test_gradients_match_finite_differences(self, rng, op, builder):
        x = tensor(rng.normal(size=(4, 5)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(builder(x)) if op != "mean" else builder(x)
        grads = backward(loss, tape)
        fd = numeric_grad(
            lambda: (builder(x).data.sum() if op != "mean" else builder(x).data), x.data
        )
        assert rel_error(grads[x], fd) < 1e-6

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            add(tensor(np.zeros((2, 2))), tensor(np.zeros((3, 2))))

    def test_finite_outputs_on_finite_inputs(self, rng):
        x = tensor(rng.normal(size=(2, 8, 8)) * 100)
        w = tensor(rng.normal(size=(3, 2, 3, 3)) * 100)
        b = tensor(rng.normal(size=3) * 100)
        out = sigmoid(relu(conv2d(x, w, b, padding=1)))
        assert np.isfinite(out.data).all()


class TestTape:
    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(ArgumentError):
                with Tape():
                    pass

    def test_no_recording_without_tape(self, rng):
        x = tensor(rng.normal(size=(2, 2)), requires_grad=True)
        t = Tape()
        out = relu(x)  # outside the with-block: nothing recorded
        assert len(t) == 0
        assert out.requires_grad

    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))
