"""Tensor engine: construction contracts, op semantics, gradient checks."""

import math

import numpy as np
import pytest

from trireid import autodiff as ad
from trireid.autodiff import GradientTape, Tensor, backward
from trireid.errors import ContractError, DimensionError
from util import check_grads_match, finite_difference, random_stochastic


class TestConstruction:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            Tensor([[1.0, float("inf")]])

    def test_float64_row_major(self):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]

    def test_shape_and_size(self):
        t = Tensor(np.zeros((3, 4)))
        assert t.shape == (3, 4)
        assert t.size == 12


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal((a @ b).data, b.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal((a @ b).data, [[11.0]])

    def test_stochastic_product(self):
        a = Tensor([[0.5, 0.5], [0.5, 0.5]])
        b = Tensor([[0.9, 0.1], [0.2, 0.8]])
        np.testing.assert_allclose((a @ b).data, [[0.55, 0.45], [0.55, 0.45]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_associativity_on_stochastic(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b, c = (random_stochastic(rng, 6) for _ in range(3))
            left = (a @ b) @ c
            right = a @ (b @ c)
            np.testing.assert_allclose(left, right, atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_shift_invariance_no_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = ad.softmax_rows(Tensor([[math.log(2.0), 0.0]]))
        np.testing.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 4, 9)) * 30)
        s = ad.softmax_rows(x).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        assert (s >= 0).all()


class TestBackward:
    def test_square_gradient(self):
        x = Tensor([[3.0]], requires_grad=True)
        with GradientTape() as tape:
            loss = ad.mul(x, x).sum()
        grads = backward(loss, tape)
        np.testing.assert_allclose(grads[x], [[6.0]])

    def test_softmax_sum_grad_is_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 5)), requires_grad=True)
        with GradientTape() as tape:
            loss = ad.softmax_rows(x).sum()
        grads = backward(loss, tape)
        np.testing.assert_allclose(grads[x], 0.0, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradientTape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_unused_parameter_gets_exact_zeros(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with GradientTape() as tape:
            z = ad.mul(x, x).sum()
            _side = ad.mul(unused, unused)  # recorded but not on the loss path
        grads = backward(z, tape)
        assert (grads[unused] == 0.0).all()

    def test_sum_of_losses_equals_sum_of_grads(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        with GradientTape() as tape:
            la = ad.mul(x, x).sum()
            lb = ad.gelu(x).sum()
            combined = ad.add(la, lb)
        g_combined = backward(combined, tape)[x]
        g_a = backward(la, tape)[x]
        g_b = backward(lb, tape)[x]
        np.testing.assert_allclose(g_combined, g_a + g_b, atol=1e-12)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(3, 4))
        w0 = rng.normal(size=(4, 4))

        def build(x, w):
            h = ad.gelu(ad.matmul(x, w))
            return ad.softmax_rows(h).mean()

        check_grads_match(build, [x0, w0])


class TestPrimitiveExamples:
    def test_mse_of_identical_is_zero(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 3)))
        assert ad.mse(x, x).item() == 0.0

    def test_concat_shape_law(self):
        a = Tensor(np.zeros((5, 2)))
        b = Tensor(np.zeros((5, 7)))
        assert ad.concat([a, b], axis=1).shape == (5, 9)

    def test_concat_extent_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.zeros((5, 2))), Tensor(np.zeros((4, 2)))], axis=1)

    def test_layer_norm_constant_vector(self):
        x = Tensor(np.full((2, 8), 3.7))
        gain = Tensor(np.ones(8))
        bias = Tensor(np.zeros(8))
        out = ad.layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_masked_fill(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        mask = np.array([[True, False], [False, True]])
        out = ad.masked_fill(x, mask, -9.0)
        np.testing.assert_array_equal(out.data, [[-9.0, 2.0], [3.0, -9.0]])

    def test_take_with_duplicates_scatter_adds(self):
        x0 = np.arange(6, dtype=np.float64).reshape(3, 2)

        def build(x):
            return ad.take(x, [0, 0, 2], axis=0).sum()

        check_grads_match(build, [x0])

    def test_tensor_division_by_tensor_rejected(self):
        with pytest.raises(TypeError):
            Tensor([1.0]) / Tensor([2.0])


def _rand_shapes(rng):
    m, k, n = rng.integers(1, 5, size=3)
    return int(m), int(k), int(n)


class TestRandomizedGradientChecks:
    """Every differentiable primitive against central finite differences."""

    N_CASES = 100

    def test_add_sub_mul_broadcast(self):
        rng = np.random.default_rng(42)
        for _ in range(self.N_CASES):
            m, k, _ = _rand_shapes(rng)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(1, k)) if rng.random() < 0.5 else rng.normal(size=(m, k))
            check_grads_match(lambda x, y: ad.mul(ad.add(x, y), ad.sub(x, y)).sum(), [a, b])

    def test_matmul(self):
        rng = np.random.default_rng(43)
        for _ in range(self.N_CASES):
            m, k, n = _rand_shapes(rng)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            check_grads_match(lambda x, y: ad.matmul(x, y).sum(), [a, b])

    def test_batched_matmul(self):
        rng = np.random.default_rng(44)
        for _ in range(30):
            b_, m, k = _rand_shapes(rng)
            a = rng.normal(size=(b_, m, k))
            w = rng.normal(size=(k, m))
            check_grads_match(lambda x, y: ad.matmul(x, y).sum(), [a, w])

    def test_softmax_and_log_softmax(self):
        rng = np.random.default_rng(45)
        for _ in range(self.N_CASES):
            m, k, _ = _rand_shapes(rng)
            x = rng.normal(size=(m, k + 1)) * 2
            w = rng.normal(size=(m, k + 1))
            check_grads_match(lambda t, v: ad.mul(ad.softmax_rows(t), v).sum(), [x, w])
            check_grads_match(lambda t, v: ad.mul(ad.log_softmax_rows(t), v).sum(), [x, w])

    def test_gelu_relu_sqrt(self):
        rng = np.random.default_rng(46)
        for _ in range(self.N_CASES):
            m, k, _ = _rand_shapes(rng)
            x = rng.normal(size=(m, k)) * 2
            check_grads_match(lambda t: ad.gelu(t).sum(), [x])
            # keep relu kinks and sqrt singularities away from the probe
            xp = np.abs(x) + 0.5
            check_grads_match(lambda t: ad.relu(t).sum(), [xp])
            check_grads_match(lambda t: ad.sqrt(t).sum(), [xp])

    def test_layer_norm(self):
        rng = np.random.default_rng(47)
        for _ in range(self.N_CASES):
            m, k, _ = _rand_shapes(rng)
            x = rng.normal(size=(m, k + 2))
            gain = rng.normal(size=(k + 2,))
            bias = rng.normal(size=(k + 2,))
            w = rng.normal(size=(m, k + 2))
            check_grads_match(
                lambda t, g_, b_, v: ad.mul(ad.layer_norm(t, g_, b_), v).sum(),
                [x, gain, bias, w],
            )

    def test_reductions_and_shapes(self):
        rng = np.random.default_rng(48)
        for _ in range(self.N_CASES):
            m, k, n = _rand_shapes(rng)
            x = rng.normal(size=(m, k, n))
            check_grads_match(lambda t: t.mean(axis=1).sum(), [x])
            check_grads_match(lambda t: t.sum(axis=(0, 2)).mean(), [x])
            check_grads_match(lambda t: t.reshape(m * k, n).transpose().sum(), [x])
            check_grads_match(
                lambda t: ad.broadcast_to(t.sum(axis=0, keepdims=True), (m, k, n)).mean(), [x]
            )

    def test_concat_take_masked_fill(self):
        rng = np.random.default_rng(49)
        for _ in range(self.N_CASES):
            m, k, _ = _rand_shapes(rng)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(m, k))
            mask = rng.random(size=(m, 2 * k)) < 0.3
            idx = rng.integers(0, m, size=3)

            def build(x, y, _mask=mask, _idx=idx):
                joined = ad.concat([x, y], axis=1)
                filled = ad.masked_fill(joined, _mask, 0.5)
                return ad.take(filled, _idx, axis=0).sum()

            check_grads_match(build, [a, b])

    def test_mse(self):
        rng = np.random.default_rng(50)
        for _ in range(self.N_CASES):
            m, k, _ = _rand_shapes(rng)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(m, k))
            check_grads_match(lambda x, y: ad.mse(x, y), [a, b])


class TestFiniteDifferenceOracle:
    def test_oracle_on_quadratic(self):
        # the oracle itself must be right: d/dx sum(x^2) = 2x
        x = np.array([1.0, -2.0, 0.5])
        g = finite_difference(lambda v: float((v ** 2).sum()), x)
        np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
