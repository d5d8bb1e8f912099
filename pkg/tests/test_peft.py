import math

import numpy as np
import pytest

from dlora.numeric import ShapeError, counting
from dlora.peft import (
    Kind,
    LoraProjection,
    OptimState,
    SerialAdapter,
    adamw_step,
    adapter_backward,
    adapter_forward,
    cosine_lr,
    init_pool,
    lora_backward,
    lora_delta,
    module_l2_norm,
)


def proj(down, up, alpha=1.0):
    return LoraProjection(np.asarray(down, dtype=np.float64), np.asarray(up, dtype=np.float64), alpha)


class TestLora:
    def test_zero_up_is_noop(self):
        m = init_pool("lora", 1, 6, rank=2, seed=1, precision=64)[0]
        h = np.random.default_rng(0).standard_normal((2, 3, 6))
        for d in m.forward(h):
            np.testing.assert_array_equal(d, 0)

    def test_scalar_hand_computed(self):
        delta = lora_delta(np.array([[7.0]]), proj([[3.0]], [[5.0]], alpha=2.0))
        assert delta[0, 0] == 210.0

    def test_zero_alpha(self):
        p = proj(np.ones((2, 3)), np.ones((2, 3)), alpha=0.0)
        np.testing.assert_array_equal(lora_delta(np.ones((4, 3)), p), 0)

    def test_scalar_backward_hand_computed(self):
        g_up, g_down, dh = lora_backward(np.array([[7.0]]), np.array([[0.5]]), proj([[3.0]], [[5.0]], alpha=2.0))
        assert g_up[0, 0] == 2 * 21 * 0.5
        assert g_down[0, 0] == 2 * 5 * 0.5 * 7
        assert dh[0, 0] == 2 * 5 * 0.5 * 3

    def test_zero_upstream_gradient(self):
        p = proj(np.ones((2, 3)), np.ones((2, 3)))
        for g in lora_backward(np.ones((4, 3)), np.zeros((4, 3)), p):
            np.testing.assert_array_equal(g, 0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        h = rng.standard_normal((2, 3, 5))
        p = proj(rng.standard_normal((2, 5)), rng.standard_normal((2, 5)), alpha=0.7)
        w = rng.standard_normal((2, 3, 5))
        g_up, g_down, dh = lora_backward(h, w, p)
        f = lambda: float(np.sum(w * lora_delta(h, p)))
        eps = 1e-6
        for arr, grad in ((p.up, g_up), (p.down, g_down), (h, dh)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                fp = f()
                arr[idx] = old - eps
                fm = f()
                arr[idx] = old
                fd = (fp - fm) / (2 * eps)
                assert abs(fd - grad[idx]) <= 1e-5 * max(1.0, abs(fd))

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            lora_delta(np.ones((2, 4)), proj(np.ones((2, 3)), np.ones((2, 3))))

    def test_flops_per_token(self):
        m = init_pool("lora", 1, 64, rank=4, seed=0)[0]
        seen = []
        with counting(seen.append):
            m.forward(np.zeros((1, 1, 64), dtype=np.float32))
        matmul_part = 3 * (2 * 4 * 64 + 2 * 4 * 64)
        assert matmul_part == 3072
        # Plus the alpha scaling, one FLOP per rank entry.
        assert sum(seen) == matmul_part + 3 * 4


class TestAdapter:
    def test_zero_is_identity(self):
        a = SerialAdapter(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(3))
        h = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(adapter_forward(h, a), h)

    def test_scalar_hand_computed(self):
        a = SerialAdapter(np.array([[1.0]]), np.zeros(1), np.array([[3.0]]), np.zeros(1))
        out = adapter_forward(np.array([[2.0]]), a)
        assert out[0, 0] == pytest.approx(2 + 3 * 2 / (1 + math.exp(-2)), rel=1e-15)
        # SiLU(2) = 2 * sigmoid(2) = 1.76159, so the branch adds 5.28478.
        assert out[0, 0] == pytest.approx(7.28478, abs=1e-5)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        a = SerialAdapter(*(rng.standard_normal(s) for s in [(4, 3), (3,), (3, 4), (4,)]))
        h = rng.standard_normal((2, 5, 4))
        w = rng.standard_normal((2, 5, 4))
        grads, dh = adapter_backward(h, w, a)
        f = lambda: float(np.sum(w * adapter_forward(h, a)))
        eps = 1e-6
        pairs = [(a.wa, grads["wa"]), (a.ba, grads["ba"]), (a.wb, grads["wb"]), (a.bb, grads["bb"]), (h, dh)]
        for arr, grad in pairs:
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                fp = f()
                arr[idx] = old - eps
                fm = f()
                arr[idx] = old
                fd = (fp - fm) / (2 * eps)
                assert abs(fd - grad[idx]) <= 1e-5 * max(1.0, abs(fd))

    def test_init_is_identity(self):
        m = init_pool("adapter", 2, 5, adapter_dim=3, seed=2)[1]
        assert m.kind is Kind.ADAPTER
        np.testing.assert_array_equal(m.forward(np.ones((1, 2, 5), dtype=np.float32))[0], 0)
        assert np.any(m.adapter.wa != 0)


class TestNorm:
    def test_zero(self):
        m = init_pool("adapter", 1, 3, adapter_dim=2, seed=0)[0]
        m.adapter.wa[...] = 0
        assert module_l2_norm(m) == 0.0

    def test_three_four_five(self):
        m = init_pool("adapter", 1, 1, adapter_dim=1, seed=0, precision=64)[0]
        m.adapter.wa[...] = 3
        m.adapter.wb[...] = 4
        assert module_l2_norm(m) == 5.0

    def test_homogeneous(self):
        m = init_pool("lora", 1, 4, rank=2, seed=9, precision=64)[0]
        for p in m.parameters():
            p += 0.1
        base = module_l2_norm(m)
        for p in m.parameters():
            p *= -2.5
        assert module_l2_norm(m) == pytest.approx(2.5 * base, rel=1e-14)

    def test_fresh_lora_norm_positive(self):
        assert all(module_l2_norm(m) > 0 for m in init_pool("lora", 8, 64, seed=1))


class TestAdamW:
    def test_zero_grad_no_decay_is_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        adamw_step(p, [np.zeros(2)], OptimState(base_lr=0.1, total_steps=10, weight_decay=0.0))
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_is_unit_step(self):
        p = [np.array([0.0])]
        adamw_step(p, [np.array([1.0])], OptimState(base_lr=0.1, total_steps=0, weight_decay=0.0))
        assert p[0][0] == pytest.approx(-0.1, rel=1e-6)

    def test_against_textbook_reference(self):
        rng = np.random.default_rng(0)
        p = [rng.standard_normal(5)]
        ref = p[0].copy()
        m = v = np.zeros(5)
        s = OptimState(base_lr=0.05, total_steps=7, weight_decay=0.1)
        for t in range(1, 6):
            g = rng.standard_normal(5)
            adamw_step(p, [g], s)
            lr = 0.05 * 0.5 * (1 + math.cos(math.pi * (t - 1) / 7))
            ref = ref * (1 - lr * 0.1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p[0], ref, rtol=1e-12)

    def test_cosine_endpoints(self):
        assert cosine_lr(0.3, 0, 100) == 0.3
        assert abs(cosine_lr(0.3, 100, 100)) < 1e-12
        assert cosine_lr(0.3, 50, 100) == pytest.approx(0.15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adamw_step([np.zeros(2)], [np.zeros(3)], OptimState())
