import math

import numpy as np
import pytest

from larvae import autodiff as ad


def backward_of(build, *tensors):
    ad.zero_grad(tensors)
    with ad.Tape() as tape:
        out = build()
    tape.backward(out)
    return out


class TestForwardOps:
    def test_add_elementwise(self):
        out = ad.forward_op("add", ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_matmul_identity(self):
        a = np.arange(12.0).reshape(3, 4)
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a))
        assert np.array_equal(out.data, a)

    def test_logsumexp_direct_evaluation(self):
        # oracle: log(exp(0)+exp(0)+exp(0)) = log 3
        out = ad.logsumexp(ad.Tensor([0.0, 0.0, 0.0]), axis=0)
        assert out.item() == pytest.approx(math.log(3.0), rel=1e-12)

    def test_logsumexp_overflow_safe(self):
        out = ad.logsumexp(ad.Tensor([1000.0, 1000.0]), axis=0)
        assert out.item() == pytest.approx(1000.0 + math.log(2.0), rel=1e-12)
        assert np.isfinite(out.data).all()

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError) as exc:
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros(4)))
        assert "add" in str(exc.value)
        assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)

    def test_log_domain_error(self):
        with pytest.raises(ad.DomainError, match="log"):
            ad.log(ad.Tensor([1.0, -0.5]))

    def test_div_zero_denominator(self):
        with pytest.raises(ad.DomainError, match="div"):
            ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown op kind"):
            ad.forward_op("fft", ad.Tensor([1.0]))

    def test_trailing_broadcast(self):
        out = ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_middle_broadcast_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.add(ad.Tensor(np.ones((2, 1, 3))), ad.Tensor(np.ones((2, 4, 3))))

    def test_forward_values_finite_on_finite_inputs(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.normal(0, 50, (4, 5)))
        for kind in ("relu", "square", "sigmoid", "softplus"):
            assert np.isfinite(ad.forward_op(kind, x).data).all()
        assert np.isfinite(ad.logsumexp(x, axis=0).data).all()

    def test_exp_overflow_guarded(self):
        with pytest.raises(ad.DomainError, match="exp"):
            ad.exp(ad.Tensor([1000.0]))

    def test_slice_and_concat_roundtrip(self):
        x = ad.Tensor(np.arange(12.0).reshape(3, 4))
        a = ad.slice_last(x, 0, 1)
        b = ad.slice_last(x, 1, 4)
        assert np.array_equal(ad.concat_last(a, b).data, x.data)


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward_of(lambda: ad.tensor_sum(ad.square(x)), x)
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])

    def test_constant_root_gives_zero_grads(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.zero_grad([x])
        with ad.Tape() as tape:
            used = ad.tensor_sum(ad.square(x))  # on tape but not reaching root
            root = ad.scalar_mul(used, 0.0)
        tape.backward(root)
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_untouched_branch_gets_zeros(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = ad.Tensor([3.0], requires_grad=True)
        ad.zero_grad([x, y])
        with ad.Tape() as tape:
            ad.tensor_sum(ad.square(y))  # recorded, never used by root
            root = ad.tensor_sum(x)
        tape.backward(root)
        assert np.array_equal(x.grad, [1.0, 1.0])
        assert np.array_equal(y.grad, [0.0])

    def test_non_scalar_root_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            out = ad.square(x)
        with pytest.raises(ad.ShapeError, match="backward"):
            tape.backward(out)

    def test_grad_accumulates_across_uses(self):
        x = ad.Tensor([2.0], requires_grad=True)
        backward_of(lambda: ad.tensor_sum(ad.mul(x, x)), x)
        assert np.allclose(x.grad, [4.0])

    def test_linearity_of_backward(self):
        # grad(a*f + b*g) == a*grad(f) + b*grad(g) to 1e-12 relative
        rng = np.random.default_rng(7)
        for _ in range(5):
            x = ad.Tensor(rng.normal(size=6), requires_grad=True)
            a, b = rng.normal(), rng.normal()

            def f():
                return ad.tensor_sum(ad.mul(ad.square(x), ad.constant(rng_f)))

            def g():
                return ad.tensor_sum(ad.sigmoid(ad.scalar_mul(x, 1.3)))

            rng_f = rng.normal(size=6)
            backward_of(f, x)
            gf = x.grad.copy()
            backward_of(g, x)
            gg = x.grad.copy()
            backward_of(lambda: ad.add(ad.scalar_mul(f(), a), ad.scalar_mul(g(), b)), x)
            combo = x.grad.copy()
            expect = a * gf + b * gg
            assert np.allclose(combo, expect, rtol=1e-12, atol=1e-12)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            w = ad.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
            backward_of(lambda: ad.tensor_sum(ad.sigmoid(ad.matmul(x, w))), x, w)
            return x.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_quadratic_near_exact(self):
        w = ad.Tensor([2.0], requires_grad=True)
        report = ad.grad_check(lambda: ad.tensor_sum(ad.mul(w, w)), [w], step=1e-5)
        assert report.worst < 1e-8
        assert report.passed

    def test_every_op_kind_passes(self):
        # 20 random shapes/inputs per op kind at tol 1e-4
        from larvae.cli import _op_case

        for j, kind in enumerate(ad.op_kinds()):
            worst = 0.0
            for i in range(20):
                f, params = _op_case(kind, np.random.default_rng([11, j, i]))
                report = ad.grad_check(f, params, step=1e-5, tol=1e-4)
                worst = max(worst, report.worst)
            assert worst <= 1e-4, f"{kind}: {worst}"

    def test_non_finite_f_rejected(self):
        w = ad.Tensor([1.0], requires_grad=True)
        with pytest.raises(ad.DomainError, match="grad_check"):
            ad.grad_check(lambda: ad.scalar_mul(ad.log(w), float("nan")), [w])

    def test_restores_parameter_values(self):
        w = ad.Tensor([1.5, -0.5], requires_grad=True)
        before = w.data.copy()
        ad.grad_check(lambda: ad.tensor_sum(ad.square(w)), [w])
        assert np.array_equal(w.data, before)


class TestConv:
    def test_conv_identity_kernel(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        w = np.ones((1, 1, 1, 1))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w))
        assert np.array_equal(out.data, x)

    def test_conv_stride2_shape(self):
        out = ad.conv2d(ad.Tensor(np.zeros((2, 3, 16, 16))),
                        ad.Tensor(np.zeros((8, 3, 4, 4))), stride=2, padding=1)
        assert out.shape == (2, 8, 8, 8)

    def test_transposed_conv_inverts_shape(self):
        out = ad.conv_transpose2d(ad.Tensor(np.zeros((2, 8, 8, 8))),
                                  ad.Tensor(np.zeros((8, 3, 4, 4))), stride=2, padding=1)
        assert out.shape == (2, 3, 16, 16)

    def test_transposed_conv_is_adjoint_of_conv(self):
        # <conv(x), y> == <x, conv_T(y)> for exactly invertible geometry
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 4, 4))
        y = rng.normal(size=(2, 4, 3, 3))
        cx = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2, padding=1).data
        wt = ad.Tensor(np.ascontiguousarray(w))  # (Cout,Cin,k,k) read as (Cin,Cout,k,k)
        ty = ad.conv_transpose2d(ad.Tensor(y), wt, stride=2, padding=1).data
        assert np.sum(cx * y) == pytest.approx(np.sum(x * ty), rel=1e-12)

    def test_channel_mismatch_error(self):
        with pytest.raises(ad.ShapeError, match="conv2d"):
            ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 2, 2))))
