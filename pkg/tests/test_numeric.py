import math

import numpy as np
import pytest

from dlora.numeric import (
    IGNORE,
    InputError,
    Rng,
    ShapeError,
    asum,
    counting,
    cross_entropy,
    matmul,
    rmsnorm,
    rmsnorm_backward,
    seeded_normal,
    silu,
    silu_backward,
    softmax_rows,
    softmax_rows_backward,
    splitmix64,
)
from oracles import ordered_matmul, splitmix64_words


class TestMatmul:
    def test_identity(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        np.testing.assert_array_equal(matmul(a, np.eye(2, dtype=np.float32)), a)

    def test_hand_computed(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float64)
        b = np.array([[5], [6]], dtype=np.float64)
        np.testing.assert_array_equal(matmul(a, b), [[17], [39]])

    def test_scalar(self):
        assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_bitwise_matches_scalar_ordered_loop(self, dtype):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 17)).astype(dtype)
        b = rng.standard_normal((17, 4)).astype(dtype)
        np.testing.assert_array_equal(matmul(a, b), ordered_matmul(a, b))

    def test_batched_broadcast_close_to_blas(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((2, 3, 6, 8))
        b = rng.standard_normal((8, 5))
        np.testing.assert_allclose(matmul(a, b), a @ b, rtol=1e-12, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((4, 2)))
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 1)))

    def test_flop_count(self):
        seen = []
        with counting(seen.append):
            matmul(np.ones((2, 3, 4)), np.ones((4, 5)))
        assert sum(seen) == 2 * (2 * 3 * 4 * 5)


def test_asum_is_left_to_right():
    x = np.array([1e8, 1.0, -1e8, 1.0], dtype=np.float32)
    # ((1e8 + 1) - 1e8) + 1 in float32 is 1, a pairwise sum could give 2 or 0.
    assert asum(x) == np.float32(((np.float32(1e8) + 1) - np.float32(1e8)) + 1)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_hand_computed(self):
        np.testing.assert_allclose(softmax_rows(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]], rtol=1e-15)

    def test_large_inputs_stable(self):
        out = softmax_rows(np.array([[1000.0, 1000.0]]))
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((3, 5))
        y = softmax_rows(x)
        grad = softmax_rows_backward(y, w)
        eps = 1e-6
        for i, j in [(0, 0), (1, 3), (2, 4)]:
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            fd = (np.sum(w * softmax_rows(xp)) - np.sum(w * softmax_rows(xm))) / (2 * eps)
            assert abs(fd - grad[i, j]) < 1e-8


class TestRmsnorm:
    def test_zero_input(self):
        np.testing.assert_array_equal(rmsnorm(np.zeros((2, 4)), np.ones(4)), np.zeros((2, 4)))

    def test_hand_computed(self):
        out = rmsnorm(np.array([3.0, 4.0]), np.ones(2), eps=0.0)
        np.testing.assert_allclose(out, np.array([3.0, 4.0]) / math.sqrt(12.5), rtol=1e-15)
        np.testing.assert_allclose(out, [0.8485, 1.1314], atol=1e-4)

    def test_gain_linear(self):
        x = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_allclose(rmsnorm(x, 3.0 * np.ones(3)), 3.0 * rmsnorm(x, np.ones(3)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 6))
        g = rng.standard_normal(6)
        w = rng.standard_normal((2, 6))
        dx, dg = rmsnorm_backward(x, g, w)
        eps = 1e-6
        f = lambda xx, gg: float(np.sum(w * rmsnorm(xx, gg)))
        for idx in [(0, 0), (1, 5), (0, 3)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            assert abs((f(xp, g) - f(xm, g)) / (2 * eps) - dx[idx]) < 1e-7
        for j in range(6):
            gp, gm = g.copy(), g.copy()
            gp[j] += eps
            gm[j] -= eps
            assert abs((f(x, gp) - f(x, gm)) / (2 * eps) - dg[j]) < 1e-7


def test_silu_and_derivative():
    x = np.linspace(-4, 4, 9)
    np.testing.assert_allclose(silu(x), x / (1 + np.exp(-x)))
    eps = 1e-6
    fd = (silu(x + eps) - silu(x - eps)) / (2 * eps)
    np.testing.assert_allclose(silu_backward(x, np.ones_like(x)), fd, atol=1e-8)


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = cross_entropy(np.zeros((1, 4)), np.array([2]))
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_confident(self):
        loss, _ = cross_entropy(np.array([[10.0, -10.0]], dtype=np.float32), np.array([0]))
        # -log(sigmoid(20)) = log(1 + e^-20)
        assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert loss == pytest.approx(2.06e-9, rel=1e-2)

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(0)
        _, g = cross_entropy(rng.standard_normal((3, 4, 7)), rng.integers(0, 7, (3, 4)))
        np.testing.assert_allclose(g.sum(-1), 0, atol=1e-15)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((4, 5))
        t = np.array([1, IGNORE, 4, 0])
        _, g = cross_entropy(z, t)
        eps = 1e-6
        for i in range(4):
            for j in range(5):
                zp, zm = z.copy(), z.copy()
                zp[i, j] += eps
                zm[i, j] -= eps
                fd = (cross_entropy(zp, t)[0] - cross_entropy(zm, t)[0]) / (2 * eps)
                assert abs(fd - g[i, j]) < 1e-8
        np.testing.assert_array_equal(g[1], 0)

    def test_bad_targets(self):
        with pytest.raises(InputError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))
        with pytest.raises(InputError):
            cross_entropy(np.zeros((1, 3)), np.array([IGNORE]))


class TestRng:
    def test_reference_vector(self):
        # Published SplitMix64 output for seed 0.
        assert Rng(0).next_u64() == 0xE220A8397B1DCDAF
        assert splitmix64(0)[1] == 0xE220A8397B1DCDAF

    def test_against_independent_implementation(self):
        for seed in (0, 1, 42, 2**64 - 1):
            r = Rng(seed)
            assert [r.next_u64() for _ in range(20)] == splitmix64_words(seed, 20)

    def test_vectorised_words_continue_the_stream(self):
        a, b = Rng(9), Rng(9)
        got = [int(w) for w in a.words(7)] + [a.next_u64()]
        assert got == [b.next_u64() for _ in range(8)]

    def test_determinism(self):
        np.testing.assert_array_equal(seeded_normal(Rng(5), (3, 4)), seeded_normal(Rng(5), (3, 4)))

    def test_normal_moments(self):
        z = Rng(123).normal(100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.var() - 1) < 0.05

    def test_permutation_is_a_permutation(self):
        p = Rng(1).permutation(50)
        assert sorted(p) == list(range(50))
        assert p != list(range(50))
