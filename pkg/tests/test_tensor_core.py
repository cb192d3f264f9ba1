import numpy as np
import pytest

from dualflow.errors import GradientError, NonFiniteError, ShapeError
from dualflow.tensor_core import (
    Tensor,
    backward,
    concat,
    default_dtype,
    finite_checks,
    get_default_dtype,
    no_grad,
    ones,
    stack,
    zeros,
)


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


class TestConstruction:
    def test_default_dtype_is_float64(self):
        assert Tensor([1.0, 2.0]).dtype == np.float64

    def test_default_dtype_context(self):
        with default_dtype(np.float32):
            assert get_default_dtype() == np.float32
            assert zeros((2, 2)).dtype == np.float32
            assert ones((3,)).dtype == np.float32
        assert get_default_dtype() == np.float64

    def test_item_and_len(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert len(t) == 2
        assert t.sum().item() == 10.0


class TestBroadcasting:
    def test_scalar_operand(self):
        t = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal((t * 2.0).data, [2.0, 4.0, 6.0])
        np.testing.assert_array_equal((1.0 - t).data, [0.0, -1.0, -2.0])
        np.testing.assert_array_equal((6.0 / t).data, [6.0, 3.0, 2.0])

    def test_size_one_tensor_operand(self):
        t = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal((t + Tensor([10.0])).data, [11.0, 12.0, 13.0])

    def test_general_broadcast_rejected(self):
        with pytest.raises(ShapeError, match="reshape or expand"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3,)))

    def test_expand_rank_must_match(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)).expand(2, 3)

    def test_bad_reshape(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_matmul_shapes(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestGraphRecording:
    def test_no_grad_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y.is_leaf

    def test_non_scalar_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            backward(x * 2.0)

    def test_non_finite_results_raise(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError):
                Tensor([0.0, 1.0]).log()

    def test_finite_checks_can_be_disabled(self):
        with np.errstate(divide="ignore"), finite_checks(False):
            out = Tensor([0.0, 1.0]).log()
        assert np.isneginf(out.data[0])

    def test_shared_subexpression_accumulates(self):
        x = Tensor([0.5, -2.0, 3.0], requires_grad=True)
        grads = backward((x * x + x).sum(), [x])
        np.testing.assert_allclose(grads[x], 2.0 * x.data + 1.0)

    def test_named_gradients_and_unreached_params(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        grads = backward((x * 3.0).sum(), {"x": x, "unused": unused})
        np.testing.assert_allclose(grads["x"], [3.0, 3.0])
        np.testing.assert_array_equal(grads["unused"], [0.0])
        assert grads.reached(x)
        assert not grads.reached(unused)
        assert set(grads) == {"x", "unused"}

    def test_detach_cuts_the_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x.detach() * x).sum()
        grads = backward(y, [x])
        np.testing.assert_allclose(grads[x], x.data)


class TestGradients:
    def test_elementwise_chain(self, rng, gradcheck):
        x = param(rng, 3, 4, low=0.2, high=1.5)
        y = param(rng, 3, 4, low=0.5, high=2.0)
        gradcheck(lambda: ((x * y).exp().sin() + (x / y).sqrt().log() - (x**3).tanh() * y.sigmoid()).sum(), [x, y])

    def test_unary_ops(self, rng, gradcheck):
        x = param(rng, 5, low=0.3, high=1.2)
        gradcheck(lambda: (x.cos() * x.square() + (-x).relu() + x.relu() * 2.0).mean(), [x])

    def test_reductions(self, rng, gradcheck):
        x = param(rng, 2, 3, 4)
        w = Tensor(rng.normal(size=(2, 1, 4)))
        gradcheck(lambda: (x.sum(axis=1, keepdims=True) * w).sum() + x.mean(axis=(0, 2)).square().sum(), [x])

    def test_matmul_and_transpose(self, rng, gradcheck):
        a = param(rng, 3, 4)
        b = param(rng, 4, 2)
        gradcheck(lambda: ((a @ b).T @ a).square().sum(), [a, b])

    def test_shape_ops(self, rng, gradcheck):
        x = param(rng, 2, 1, 3)
        w = Tensor(rng.normal(size=(3, 2, 4)))
        gradcheck(lambda: (x.expand(2, 4, 3).transpose(2, 0, 1) * w).sum() + x.reshape(6)[1:4].square().sum(), [x])

    def test_concat_and_stack(self, rng, gradcheck):
        a = param(rng, 2, 3)
        b = param(rng, 1, 3)
        w = Tensor(rng.normal(size=(2, 2, 3)))
        gradcheck(lambda: (concat([a, b, a], axis=0).square().sum() + (stack([a, a * 2.0]) * w).sum()), [a, b])

    def test_division_by_tensor(self, rng, gradcheck):
        x = param(rng, 4, low=0.5, high=1.5)
        gradcheck(lambda: (2.0 / x + x / Tensor(3.0)).sum(), [x])

    def test_randomized_cases(self, gradcheck):
        for seed in range(20):
            r = np.random.default_rng(seed)
            a = param(r, 3, 3, low=0.2, high=1.0)
            b = param(r, 3, 3, low=0.2, high=1.0)
            gradcheck(lambda: ((a @ b).sigmoid() * a.exp() / (b + 1.0)).sum(), [a, b])
