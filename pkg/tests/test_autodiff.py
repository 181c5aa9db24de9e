"""Autodiff engine: hand-checked values, finite-difference oracles,
accumulation semantics, and tape bookkeeping."""

import numpy as np
import pytest

import affmtl.autodiff as ad
from affmtl.autodiff import Tensor, finite_diff_check
from affmtl.errors import ContractError, DegenerateInputError, DimensionError, DomainError


def leaf(rng, *shape, scale=3.0):
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)


class TestForwardValues:
    def test_add_mul_hand_case(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        out = ad.mul(ad.add(a, b), b)
        np.testing.assert_array_equal(out.data, [12.0, 24.0])

    def test_matmul_hand_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0], [6.0]], requires_grad=True)
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[17.0], [39.0]])

    def test_matmul_shape_mismatch(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((4, 2)))
        with pytest.raises(DimensionError):
            ad.matmul(a, b)

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        out = ad.sigmoid(Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)

    def test_leaky_relu_negative_slope(self):
        out = ad.leaky_relu(Tensor([-2.0, 0.0, 3.0]), alpha=0.01)
        np.testing.assert_array_equal(out.data, [-0.02, 0.0, 3.0])

    def test_log_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([1.0, 0.0]))

    def test_mean_and_variance_hand_case(self):
        """variance_population([1,2,3]) = 2/3 with the 1/N convention."""
        x = Tensor([1.0, 2.0, 3.0])
        assert ad.mean(x).item() == 2.0
        assert ad.variance_population(x).item() == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_reduce_empty_extent_rejected(self):
        with pytest.raises(DegenerateInputError):
            ad.tensor_sum(Tensor(np.zeros((0,))))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = ad.softmax(Tensor(rng.normal(size=(40, 8)) * 10), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones(40), atol=1e-12)
        assert np.all(y >= 0)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 8))
        a = ad.softmax(Tensor(x), axis=1).data
        b = ad.softmax(Tensor(x + 123.0), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_clamp_values(self):
        out = ad.clamp(Tensor([-1.0, 0.5, 2.0]), 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])

    def test_unary_dispatch_matches_named(self):
        x = Tensor([0.3, -0.7])
        np.testing.assert_array_equal(ad.unary(x, "tanh").data, ad.tanh(x).data)

    def test_reduce_dispatch(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert ad.reduce(x, "sum").item() == 10.0
        assert ad.reduce(x, "mean").item() == 2.5


class TestBackwardSemantics:
    def test_grad_of_sum_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_double_use_accumulates(self):
        """y = x*x via two uses of x: dy/dx = 2x from two contributions."""
        x = Tensor([3.0], requires_grad=True)
        ad.backward(ad.tensor_sum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.tensor_sum(x))
        ad.backward(ad.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_take_rows_repeated_indices_accumulate(self):
        x = Tensor([[1.0], [2.0]], requires_grad=True)
        ad.backward(ad.tensor_sum(ad.take_rows(x, [0, 0, 1])))
        np.testing.assert_array_equal(x.grad, [[2.0], [1.0]])

    def test_non_scalar_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(ad.add(x, x))

    def test_untraced_backward_rejected(self):
        with pytest.raises(ContractError):
            ad.backward(Tensor(1.0))

    def test_tape_consumed_after_backward(self):
        x = Tensor([1.0], requires_grad=True)
        ad.backward(ad.tensor_sum(ad.mul(x, x)))
        assert len(ad.active_tape()) == 0

    def test_no_grad_suppresses_tracing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad
        assert len(ad.active_tape()) == 0

    def test_constant_inputs_get_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 5.0])
        ad.backward(ad.tensor_sum(ad.mul(x, c)))
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])
        assert c.grad is None

    def test_broadcast_bias_grad_sums_rows(self):
        """(N,d) + (d,) broadcast: bias grad is the column sum of upstream."""
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        ad.backward(ad.tensor_sum(ad.add(x, b)))
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_determinism_bitwise(self):
        """Same seed, same graph ⇒ bitwise-identical values and gradients."""
        def run():
            rng = np.random.default_rng(123)
            x = leaf(rng, 5, 4)
            w = leaf(rng, 4, 3)
            out = ad.tensor_sum(ad.sigmoid(ad.matmul(x, w)))
            ad.backward(out)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        (o1, x1, w1), (o2, x2, w2) = run(), run()
        assert o1.tobytes() == o2.tobytes()
        assert x1.tobytes() == x2.tobytes()
        assert w1.tobytes() == w2.tobytes()


class TestFiniteDifferenceOracle:
    """Every differentiable op agrees with central finite differences to
    better than 1e-4 relative error across seeds 0..9."""

    TOL = 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_elementwise_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 4, 3)
        other = leaf(rng, 4, 3)

        def f(t):
            y = ad.mul(ad.add(t, other), ad.sigmoid(t))
            return ad.tensor_sum(ad.tanh(y))

        assert finite_diff_check(f, x) < self.TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_matmul_both_sides(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, 3, 4)
        b = leaf(rng, 4, 2)
        assert finite_diff_check(lambda t: ad.tensor_sum(ad.matmul(t, b)), a) < self.TOL
        assert finite_diff_check(lambda t: ad.tensor_sum(ad.matmul(a, t)), b) < self.TOL

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "leaky_relu", "exp"])
    def test_unary_kinds(self, kind):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = leaf(rng, 5)
            err = finite_diff_check(lambda t: ad.tensor_sum(ad.unary(t, kind)), x)
            assert err < self.TOL, f"{kind} seed {seed}: {err}"

    def test_log_positive_domain(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.uniform(0.1, 3.0, 6), requires_grad=True)
            assert finite_diff_check(lambda t: ad.tensor_sum(ad.log(t)), x) < self.TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_reductions_and_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 4, 5)
        assert finite_diff_check(lambda t: ad.mean(ad.variance_population(t, axis=1)), x) < self.TOL
        assert finite_diff_check(
            lambda t: ad.tensor_sum(ad.mul(ad.softmax(t, axis=1), ad.softmax(t, axis=1))), x
        ) < self.TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_division(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, 6)
        b = Tensor(rng.uniform(0.5, 2.0, 6), requires_grad=True)
        assert finite_diff_check(lambda t: ad.tensor_sum(ad.div(t, b)), a) < self.TOL
        assert finite_diff_check(lambda t: ad.tensor_sum(ad.div(a, t)), b) < self.TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_selection_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 6, 4)
        idx = rng.integers(0, 6, size=8)
        assert finite_diff_check(
            lambda t: ad.tensor_sum(ad.sigmoid(ad.take_rows(t, idx))), x) < self.TOL
        assert finite_diff_check(
            lambda t: ad.tensor_sum(ad.tanh(ad.narrow(t, 1, 1, 2))), x) < self.TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_stack_and_select_step(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 2, 3, 4)

        def f(t):
            steps = [ad.select_step(t, i) for i in range(3)]
            return ad.tensor_sum(ad.tanh(ad.stack(steps, axis=1)))

        assert finite_diff_check(f, x) < self.TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_two_layer_composite(self, seed):
        """Full MLP graph: gradients of both weight matrices check out."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, (5, 4)))
        w1 = leaf(rng, 4, 6, scale=0.8)
        w2 = leaf(rng, 6, 2, scale=0.8)

        def loss(_):
            h = ad.leaky_relu(ad.matmul(x, w1), 0.01)
            return ad.mean(ad.mul(ad.matmul(h, w2), ad.matmul(h, w2)))

        assert finite_diff_check(loss, w1) < self.TOL
        assert finite_diff_check(loss, w2) < self.TOL
