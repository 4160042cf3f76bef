"""Tensor construction, primitive ops, backward, and the gradient checker."""

import numpy as np
import numpy.testing as npt
import pytest

from evoattn import Tensor, grad_check, grad_check_params, no_grad, tensor_new
from evoattn.tensor import concat, matmul, relu, tsum


class TestTensorNew:
    def test_valid_2x2(self):
        t = tensor_new([2, 2], [1, 2, 3, 4])
        npt.assert_array_equal(t.data, [[1, 2], [3, 4]])
        assert t.data.dtype == np.float64

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            tensor_new([3], [1, 2])

    def test_scalar_like(self):
        t = tensor_new([1], [0])
        assert t.shape == (1,)
        assert t.item() == 0.0

    def test_data_copied(self):
        src = np.ones(4)
        t = tensor_new([4], src)
        src[0] = 99.0
        assert t.data[0] == 1.0


class TestMatmul:
    def test_identity(self):
        m = np.array([[2.0, -1.0], [0.5, 3.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(m))
        npt.assert_array_equal(out.data, m)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        npt.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_ones_times_bt(self):
        # d/da sum(a @ b) = ones(m, n) @ b^T, computed here directly
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)))
        (a @ b).sum().backward()
        expected = np.ones((3, 5)) @ b.data.T
        npt.assert_allclose(a.grad, expected, rtol=1e-12)

    def test_batched_broadcast(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal((2, 3, 4)))
        b = Tensor(rng.standard_normal((4, 5)))
        out = matmul(a, b)
        assert out.shape == (2, 3, 5)
        npt.assert_allclose(out.data[1], a.data[1] @ b.data, rtol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        npt.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gives_2x(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        npt.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_leaf_without_graph_rejected(self):
        with pytest.raises(RuntimeError):
            Tensor([1.0], requires_grad=True).backward()

    def test_repeated_backward_reaccumulates_from_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        npt.assert_array_equal(x.grad, first)

    def test_fanout_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x + x  # dy/dx = 2
        y.sum().backward()
        npt.assert_array_equal(x.grad, [2.0])

    def test_broadcast_bias_grad(self):
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        (x + b).sum().backward()
        npt.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_no_grad_disables_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._grad_fn is None and not y.requires_grad


class TestPrimitiveGrads:
    """Finite-difference sweep over every primitive at several seeds."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("name,f", [
        ("add", lambda x: (x + x * 0.5).sum()),
        ("mul", lambda x: (x * x).sum()),
        ("scale", lambda x: (x * 3.5).sum()),
        ("power", lambda x: ((x * x + 1.0) ** 1.5).sum()),
        ("relu", lambda x: relu(x).sum()),
        ("reshape", lambda x: (x.reshape(6) * x.reshape(6)).sum()),
        ("transpose", lambda x: (x.transpose((1, 0)) @ x).sum()),
        ("slice", lambda x: (x[0:1] * x[1:2]).sum()),
        ("mean", lambda x: (x * x).mean()),
        ("sum_axis", lambda x: (x.sum(axis=0) * x.sum(axis=0)).sum()),
        ("concat", lambda x: (concat([x, x * 2.0], axis=1) ** 2.0).sum()),
    ])
    def test_primitive(self, seed, name, f):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3)) + 2.5, requires_grad=True)
        assert grad_check(f, x, eps=1e-5) <= 1e-4

    @pytest.mark.parametrize("seed", [0, 5])
    def test_matmul_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)

        def f(t):
            return ((t @ t) * t).sum()

        assert grad_check(f, x, eps=1e-5) <= 1e-4


class TestGradCheck:
    def test_linear_function_exact(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        assert grad_check(lambda t: t.sum(), x) <= 1e-10

    def test_softmax_sum_is_constant(self):
        # softmax rows sum to 1, so the gradient of their sum vanishes
        from evoattn import softmax_masked
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4,)), requires_grad=True)
        assert grad_check(lambda t: softmax_masked(t).sum(), x) <= 1e-6

    @pytest.mark.parametrize("seed", range(6))
    def test_softmax_sum_gradient_vanishes(self, seed):
        # the autodiff gradient itself is zero to machine precision
        from evoattn import softmax_masked
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((5,)), requires_grad=True)
        softmax_masked(x).sum().backward()
        assert np.abs(x.grad).max() <= 1e-12

    def test_eps_validated(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), x, eps=0.5)

    def test_params_variant(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        x = np.array([[0.5, -1.0, 2.0]])

        def f():
            return ((Tensor(x) @ w + b) ** 2.0).sum()

        errs = grad_check_params(f, {"w": w, "b": b})
        assert max(errs.values()) <= 1e-6


class TestDeterminism:
    def test_forward_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            a = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
            b = Tensor(rng.standard_normal((8, 8)))
            out = relu(a @ b + a * 0.3)
            out.sum().backward()
            return out.data.tobytes(), a.grad.tobytes()

        assert run() == run()
