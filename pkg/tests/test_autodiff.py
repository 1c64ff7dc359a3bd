"""Tests for the reverse-mode tensor core.

Expected values in the example tests were computed by hand (or against
plain numpy) before the operations were implemented.
"""

import numpy as np
import pytest

import posecast.autodiff as ad
from posecast.autodiff import (
    ContractError,
    ShapeError,
    Tensor,
    absolute,
    backward,
    broadcast_rows,
    concat_cols,
    concat_rows,
    elementwise,
    finite_diff_check,
    matmul,
    no_grad,
    normalize_rows,
    relu,
    reshape,
    scale,
    slice_rows,
    softmax_rows,
    sum_all,
    tanh,
    transpose,
)


class TestForwardExamples:
    def test_matmul_hand_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0], [6.0]])
        out = matmul(a, b)
        assert out.shape == (2, 1)
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_matmul_identity_is_exact(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 4))
        out = matmul(Tensor(x), Tensor(np.eye(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_matmul_inner_dim_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_matmul_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_add_sub_mul(self):
        a = Tensor([[1.0, -2.0], [0.5, 4.0]])
        b = Tensor([[2.0, 3.0], [-1.0, 0.5]])
        np.testing.assert_array_equal((a + b).data, [[3.0, 1.0], [-0.5, 4.5]])
        np.testing.assert_array_equal((a - b).data, [[-1.0, -5.0], [1.5, 3.5]])
        np.testing.assert_array_equal((a * b).data, [[2.0, -6.0], [-0.5, 2.0]])

    def test_scalar_broadcast_allowed(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = a + 10.0
        np.testing.assert_array_equal(out.data, [[11.0, 12.0], [13.0, 14.0]])
        out = a * Tensor(2.0)
        np.testing.assert_array_equal(out.data, [[2.0, 4.0], [6.0, 8.0]])

    def test_partial_broadcast_rejected(self):
        # A row vector against a matrix is not a scalar; it must go
        # through broadcast_rows explicitly.
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((1, 4))))

    def test_unary_ops(self):
        x = Tensor([[-1.5, 0.0, 2.0]])
        np.testing.assert_array_equal(relu(x).data, [[0.0, 0.0, 2.0]])
        np.testing.assert_array_equal(absolute(x).data, [[1.5, 0.0, 2.0]])
        np.testing.assert_allclose(tanh(x).data, np.tanh([[-1.5, 0.0, 2.0]]))
        np.testing.assert_array_equal(scale(x, -2.0).data, [[3.0, 0.0, -4.0]])

    def test_softmax_uniform_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_softmax_large_inputs_stable(self):
        out = softmax_rows(Tensor([[1000.0, 0.0, -1000.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data.sum(axis=1), [1.0], atol=1e-15)
        assert out.data[0, 0] > 1.0 - 1e-12

    def test_softmax_mask_sentinel_zeroes_weight(self):
        scores = Tensor([[2.0, -1e9, 0.5]])
        out = softmax_rows(scores)
        assert out.data[0, 1] == 0.0
        np.testing.assert_allclose(out.data.sum(axis=1), [1.0], atol=1e-15)

    def test_normalize_rows_stats(self):
        rng = np.random.default_rng(1)
        x = rng.normal(loc=3.0, scale=2.5, size=(5, 16))
        out = normalize_rows(Tensor(x), eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=1), np.zeros(5), atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=1), np.ones(5), atol=1e-6)

    def test_structure_ops(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0]])
        np.testing.assert_array_equal(concat_rows([a, b]).data,
                                      [[1, 2], [3, 4], [5, 6]])
        np.testing.assert_array_equal(concat_cols([a, transpose(b)]).data,
                                      [[1, 2, 5], [3, 4, 6]])
        np.testing.assert_array_equal(slice_rows(a, 1, 2).data, [[3.0, 4.0]])
        np.testing.assert_array_equal(reshape(a, (1, 4)).data, [[1, 2, 3, 4]])
        np.testing.assert_array_equal(broadcast_rows(Tensor([1.0, 2.0]), 3).data,
                                      [[1, 2], [1, 2], [1, 2]])

    def test_structure_shape_errors(self):
        with pytest.raises(ShapeError):
            concat_rows([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])
        with pytest.raises(ShapeError):
            concat_cols([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])
        with pytest.raises(ShapeError):
            slice_rows(Tensor(np.zeros((2, 3))), 1, 4)
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros((2, 3))), (4, 2))
        with pytest.raises(ContractError):
            concat_rows([])

    def test_elementwise_dispatcher(self):
        a = Tensor([[1.0, -1.0]])
        np.testing.assert_array_equal(elementwise("relu", a).data, [[1.0, 0.0]])
        np.testing.assert_array_equal(elementwise("add", a, a).data, [[2.0, -2.0]])
        np.testing.assert_array_equal(elementwise("scale", a, 3.0).data, [[3.0, -3.0]])
        with pytest.raises(ContractError):
            elementwise("pow", a, a)


class TestBackward:
    def test_sum_all_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad_is_two_x(self):
        x = Tensor([[1.0, -2.0, 3.0]], requires_grad=True)
        sum_all(x * x).backward()
        np.testing.assert_array_equal(x.grad, [[2.0, -4.0, 6.0]])

    def test_reused_tensor_accumulates(self):
        x = Tensor([[1.0, 1.0]], requires_grad=True)
        sum_all(x + x).backward()
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])

    def test_two_backward_calls_double_grads(self):
        x = Tensor([[2.0]], requires_grad=True)
        loss = sum_all(x * x)
        loss.backward()
        np.testing.assert_array_equal(x.grad, [[4.0]])
        loss.backward()
        np.testing.assert_array_equal(x.grad, [[8.0]])

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x + x)

    def test_intermediate_requires_grad_populated(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        mid = x * x
        sum_all(mid).backward()
        assert mid.grad is not None
        np.testing.assert_array_equal(mid.grad, [[1.0, 1.0]])

    def test_constant_branch_gets_no_grad(self):
        x = Tensor([[1.0]], requires_grad=True)
        c = Tensor([[5.0]])
        sum_all(x * c).backward()
        assert c.grad is None

    def test_matmul_grads_match_closed_form(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        sum_all(matmul(a, b)).backward()
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)

    def test_scalar_broadcast_grad_sums(self):
        s = Tensor(2.0, requires_grad=True)
        x = Tensor(np.ones((3, 4)))
        sum_all(ad.mul(x, s)).backward()
        assert s.grad.shape == ()
        assert float(s.grad) == 12.0

    def test_no_grad_builds_no_graph(self):
        x = Tensor([[1.0]], requires_grad=True)
        with no_grad():
            y = x * x
        assert y.requires_grad is False
        assert y._parents == ()

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([[0.5]], requires_grad=True)
        y = x
        for _ in range(3000):
            y = y + 0.0
        sum_all(y).backward()
        np.testing.assert_array_equal(x.grad, [[1.0]])


class TestFiniteDiff:
    def test_sum_of_squares_is_tight(self):
        x = Tensor(np.array([[0.3, -1.2, 2.0]]), requires_grad=True)
        err = finite_diff_check(lambda: sum_all(x * x), [x])
        assert err < 1e-6

    def test_composite_graph(self):
        rng = np.random.default_rng(3)
        w1 = Tensor(rng.normal(scale=0.5, size=(4, 5)), requires_grad=True)
        w2 = Tensor(rng.normal(scale=0.5, size=(5, 2)), requires_grad=True)
        bias = Tensor(rng.normal(scale=0.1, size=2), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 4)))

        def f():
            h = tanh(matmul(x, w1))
            out = matmul(h, w2) + broadcast_rows(bias, 3)
            return sum_all(out * out)

        assert finite_diff_check(f, [w1, w2, bias]) < 1e-6

    def test_fused_reductions(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        target = rng.normal(size=(3, 6))

        def f():
            y = softmax_rows(x)
            z = normalize_rows(x * y)
            return sum_all(absolute(z - Tensor(target)))

        assert finite_diff_check(f, [x]) < 1e-5

    def test_structure_ops_random_graphs(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
            v = Tensor(rng.normal(size=4), requires_grad=True)

            def f():
                stacked = concat_rows([a, b])
                wide = concat_cols([stacked, relu(stacked)])
                piece = slice_rows(wide, 1, 4)
                flat = reshape(piece, (1, piece.size))
                biased = stacked + broadcast_rows(v, 5)
                mixed = transpose(biased) * (sum_all(flat) * 0.1)
                return sum_all(mixed * mixed)

            assert finite_diff_check(f, [a, b, v]) < 1e-5

    def test_eps_bounds_enforced(self):
        x = Tensor([[1.0]], requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: sum_all(x), [x], eps=1e-2)

    def test_random_composites_seeded_sweep(self):
        # Property loop: 20 random small graphs mixing most primitives.
        rng = np.random.default_rng(6)
        for trial in range(20):
            rows = int(rng.integers(2, 5))
            cols = int(rng.integers(2, 5))
            x = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
            w = Tensor(rng.normal(size=(cols, 3)), requires_grad=True)

            def f():
                h = matmul(x, w)
                h = normalize_rows(h, eps=1e-5)
                h = softmax_rows(h) * 2.0 - tanh(h)
                return sum_all(absolute(h))

            assert finite_diff_check(f, [x, w]) < 1e-5
