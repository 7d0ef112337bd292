import numpy as np
import pytest

from dualspike import engine
from dualspike.engine import SGD, SurrogateSpec, Tensor, grad_check


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def fd_grad(fn, x, eps=1e-6):
    """Central-difference gradient oracle, float64."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = fn()
        x[i] = orig - eps
        lo = fn()
        x[i] = orig
        g[i] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


class TestAffine:
    def test_identity_weights(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([0.0, 0.0])
        assert np.array_equal(engine.affine(x, w, b).data, [[1.0, 2.0]])

    def test_zero_input_passes_bias(self):
        x = Tensor([[0.0, 0.0]])
        w = Tensor(rand((2, 2), 1, np.float32))
        b = Tensor([3.0, 4.0])
        assert np.array_equal(engine.affine(x, w, b).data, [[3.0, 4.0]])

    def test_analytic(self):
        x = Tensor([[1.0, 1.0]])
        w = Tensor([[2.0, 0.0], [0.0, 2.0]])
        b = Tensor([1.0, 1.0])
        assert np.array_equal(engine.affine(x, w, b).data, [[3.0, 3.0]])

    def test_shape_mismatch_reports_dims(self):
        with pytest.raises(ValueError, match=r"\(1, 3\).*\(2, 2\)"):
            engine.affine(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))),
                          Tensor(np.zeros(2)))

    def test_gradients_match_finite_differences(self):
        x = Tensor(rand((3, 4), 2), requires_grad=True, dtype=np.float64)
        w = Tensor(rand((4, 5), 3), requires_grad=True, dtype=np.float64)
        b = Tensor(rand(5, 4), requires_grad=True, dtype=np.float64)
        out = engine.sum_all(engine.mul(engine.affine(x, w, b), Tensor(rand((3, 5), 5), dtype=np.float64)))
        out.backward()

        def f():
            return float(engine.sum_all(engine.mul(
                engine.affine(Tensor(x.data, dtype=np.float64),
                              Tensor(w.data, dtype=np.float64),
                              Tensor(b.data, dtype=np.float64)),
                Tensor(rand((3, 5), 5), dtype=np.float64))).data)

        for t in (x, w, b):
            assert np.allclose(t.grad, fd_grad(f, t.data), atol=1e-6)


class TestConv:
    def test_identity_kernel(self):
        x = Tensor(rand((2, 1, 5, 5), 0, np.float32))
        k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = engine.conv2d(x, k, None, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_zero_input(self):
        x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
        k = Tensor(rand((3, 2, 3, 3), 1, np.float32))
        out = engine.conv2d(x, k, None, stride=1, padding=1)
        assert np.array_equal(out.data, np.zeros((1, 3, 4, 4), dtype=np.float32))

    def test_all_ones_sums_window(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = engine.conv2d(x, k, None, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.flat[0] == 9.0

    def test_non_integer_output_rejected(self):
        x = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        k = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="not an integer"):
            engine.conv2d(x, k, None, stride=2, padding=0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = engine.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64),
                            Tensor(b, dtype=np.float64), stride=1, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        naive = np.zeros_like(out)
        for n in range(2):
            for f in range(4):
                for i in range(6):
                    for j in range(6):
                        naive[n, f, i, j] = (xp[n, :, i : i + 3, j : j + 3] * k[f]).sum() + b[f]
        assert np.allclose(out, naive, atol=1e-10)

    def test_strided_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 2, 7, 7)), requires_grad=True, dtype=np.float64)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
        probe = rng.standard_normal((2, 3, 4, 4))

        def f():
            out = engine.conv2d(Tensor(x.data, dtype=np.float64),
                                Tensor(k.data, dtype=np.float64),
                                Tensor(b.data, dtype=np.float64), stride=2, padding=1)
            return float(engine.sum_all(engine.mul(out, Tensor(probe, dtype=np.float64))).data)

        out = engine.conv2d(x, k, b, stride=2, padding=1)
        engine.sum_all(engine.mul(out, Tensor(probe, dtype=np.float64))).backward()
        for t in (x, k, b):
            assert np.allclose(t.grad, fd_grad(f, t.data), atol=1e-6)


class TestPoolingAndShape:
    def test_avg_pool_gradients(self):
        x = Tensor(rand((1, 2, 4, 4), 3), requires_grad=True, dtype=np.float64)
        probe = rand((1, 2, 2, 2), 4)
        engine.sum_all(engine.mul(engine.avg_pool2d(x), Tensor(probe, dtype=np.float64))).backward()

        def f():
            return float(engine.sum_all(engine.mul(
                engine.avg_pool2d(Tensor(x.data, dtype=np.float64)),
                Tensor(probe, dtype=np.float64))).data)

        assert np.allclose(x.grad, fd_grad(f, x.data), atol=1e-7)

    def test_upsample_inverts_shape(self):
        x = Tensor(rand((1, 1, 3, 3), 5))
        up = engine.upsample2x(x)
        assert up.shape == (1, 1, 6, 6)
        assert np.array_equal(up.data[0, 0, ::2, ::2], x.data[0, 0])

    def test_concat_gradient_splits(self):
        a = Tensor(rand((2, 2, 3, 3), 6), requires_grad=True, dtype=np.float64)
        b = Tensor(rand((2, 3, 3, 3), 7), requires_grad=True, dtype=np.float64)
        out = engine.concat([a, b], axis=1)
        engine.sum_all(out).backward()
        assert np.array_equal(a.grad, np.ones_like(a.data))
        assert np.array_equal(b.grad, np.ones_like(b.data))


class TestSpike:
    def test_above_threshold_fires(self):
        out = engine.spike(Tensor([1.2]), 1.0, SurrogateSpec())
        assert out.data[0] == 1.0

    def test_below_threshold_silent(self):
        out = engine.spike(Tensor([0.8]), 1.0, SurrogateSpec())
        assert out.data[0] == 0.0

    def test_soft_mode_half_at_threshold(self):
        out = engine.spike(Tensor([1.0]), 1.0, SurrogateSpec(mode="soft"))
        assert out.data[0] == pytest.approx(0.5)

    def test_hard_output_is_binary_for_any_input(self):
        v = Tensor(rand(1000, 9, np.float32) * 10)
        out = engine.spike(v, 0.3, SurrogateSpec()).data
        assert set(np.unique(out)).issubset({0.0, 1.0})

    def test_surrogate_gradient_formula(self):
        # d/dv [spike] = (a/2) / (1 + (pi*a*(v - thr)/2)^2)
        v = Tensor(np.array([0.7, 1.0, 1.4]), requires_grad=True, dtype=np.float64)
        engine.sum_all(engine.spike(v, 1.0, SurrogateSpec(slope=2.0))).backward()
        u = v.data - 1.0
        expected = (2.0 / 2) / (1 + (np.pi * 2.0 * u / 2) ** 2)
        assert np.allclose(v.grad, expected)

    def test_soft_forward_matches_surrogate_antiderivative(self):
        # finite differences of the soft forward reproduce the surrogate
        v = Tensor(rand(20, 10), requires_grad=True, dtype=np.float64)
        spec = SurrogateSpec(slope=2.0, mode="soft")
        engine.sum_all(engine.spike(v, 0.5, spec)).backward()

        def f():
            return float(engine.sum_all(
                engine.spike(Tensor(v.data, dtype=np.float64), 0.5, spec)).data)

        assert np.allclose(v.grad, fd_grad(f, v.data), atol=1e-8)


class TestSGD:
    def test_single_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.5], dtype=np.float32)
        SGD([p], lr=0.1, momentum=0.0).step()
        assert p.data[0] == pytest.approx(0.95)

    def test_zero_grad_keeps_params(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        SGD([p], lr=0.1, momentum=0.9).step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_momentum_recurrence(self):
        p = Tensor([0.0], requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9)
        for expected in (-0.1, -0.29):
            p.grad = np.ones(1, dtype=np.float32)
            opt.step()
            assert p.data[0] == pytest.approx(expected, abs=1e-6)

    def test_missing_gradient_rejected(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(RuntimeError, match="no gradient"):
            SGD([p], lr=0.1).step()

    def test_gradients_cleared_after_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.ones(1, dtype=np.float32)
        SGD([p], lr=0.1).step()
        assert p.grad is None


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4), dtype=np.float32))
        loss = engine.softmax_cross_entropy(logits, np.array([0, 3]))
        assert float(loss.data) == pytest.approx(np.log(4), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        z = Tensor(rand((3, 5), 11), requires_grad=True, dtype=np.float64)
        labels = np.array([0, 2, 4])
        engine.softmax_cross_entropy(z, labels).backward()

        def f():
            return float(engine.softmax_cross_entropy(
                Tensor(z.data, dtype=np.float64), labels).data)

        assert np.allclose(z.grad, fd_grad(f, z.data), atol=1e-8)

    def test_sum_reduction_scales(self):
        z = Tensor(rand((3, 5), 12), dtype=np.float64)
        mean = float(engine.softmax_cross_entropy(z, np.array([0, 1, 2]), "mean").data)
        total = float(engine.softmax_cross_entropy(z, np.array([0, 1, 2]), "sum").data)
        assert total == pytest.approx(3 * mean, rel=1e-12)


class TestReverseMode:
    def test_linearity_of_gradients(self):
        rng = np.random.default_rng(21)
        for trial in range(10):
            a, b = rng.uniform(-2, 2, 2)
            x0 = rng.standard_normal((4, 3))

            def grads(factor_a, factor_b):
                x = Tensor(x0, requires_grad=True, dtype=np.float64)
                l1 = engine.sum_all(engine.mul(x, x))
                l2 = engine.sum_all(engine.tanh(x))
                total = engine.add(engine.scale(l1, factor_a), engine.scale(l2, factor_b))
                total.backward()
                return x.grad

            combined = grads(a, b)
            ga = grads(1.0, 0.0)
            gb = grads(0.0, 1.0)
            assert np.allclose(combined, a * ga + b * gb, atol=1e-10)

    def test_repeated_use_accumulates(self):
        x = Tensor([2.0], requires_grad=True, dtype=np.float64)
        y = engine.add(engine.mul(x, x), x)  # x^2 + x -> grad 2x + 1
        engine.sum_all(y).backward()
        assert x.grad[0] == pytest.approx(5.0)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(33)
            x = Tensor(rng.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((6, 3)).astype(np.float32), requires_grad=True)
            out = engine.softmax_cross_entropy(engine.matmul(engine.tanh(x), w),
                                               np.array([0, 1, 2, 0]))
            out.backward()
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with engine.no_grad():
            y = engine.mul(x, x)
        assert y._backward is None and not y.requires_grad

    def test_clip_passthrough_gradient(self):
        x = Tensor([-1.0, 0.5, 2.0], requires_grad=True, dtype=np.float64)
        engine.sum_all(engine.clip(x, 0.0, 1.0)).backward()
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


class TestGradCheck:
    def test_quadratic(self):
        p = Tensor([3.0], requires_grad=True, dtype=np.float64)

        def loss():
            return engine.scale(engine.sum_all(engine.mul(p, p)), 0.5)

        assert grad_check(loss, [p], epsilon=1e-4) < 1e-8

    def test_constant_loss_zero_error(self):
        p = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        c = Tensor([4.0], dtype=np.float64)

        def loss():
            return engine.add(engine.scale(engine.sum_all(p), 0.0), engine.sum_all(c))

        assert grad_check(loss, [p], epsilon=1e-4) == 0.0
