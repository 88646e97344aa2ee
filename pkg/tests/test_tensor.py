"""Tensor core: op semantics, Gaussian primitives, tape gradients."""
import math

import numpy as np
import pytest
from scipy import integrate, stats

from stgnp.tensor import (DiagGaussian, Tape, Tensor, backward, bounded_std,
                          concat, conv1d_causal, conv1x1, diag_gaussian_kl,
                          diag_gaussian_logpdf, exp, finite_diff_check, log,
                          narrow, reparameterize, softplus, sqrt, square,
                          tanh, tsum)


def conv_reference(x, kernel, bias, dilation):
    """Brute-force causal convolution, scalar loops only."""
    t_len, cin = x.shape
    k, _, cout = kernel.shape
    out = np.zeros((t_len, cout))
    for t in range(t_len):
        for s in range(k):
            src = t - dilation * s
            if src < 0:
                continue  # zero padding
            for ci in range(cin):
                for co in range(cout):
                    out[t, co] += kernel[s, ci, co] * x[src, ci]
    return out + bias


class TestConv1dCausal:
    def test_delta_kernel_is_identity(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
        kernel = Tensor(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1))
        out = conv1d_causal(x, kernel, Tensor(np.zeros(1)), dilation=1)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("dilation,expected", [
        (1, [1.0, 3.0, 6.0, 9.0]),
        (2, [1.0, 2.0, 4.0, 6.0]),
    ])
    def test_box_kernel(self, dilation, expected):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        kernel = np.ones((3, 1, 1))
        ref = conv_reference(x, kernel, np.zeros(1), dilation)
        np.testing.assert_allclose(ref[:, 0], expected)  # oracle agrees with the frozen values
        out = conv1d_causal(Tensor(x), Tensor(kernel), Tensor(np.zeros(1)),
                            dilation=dilation)
        np.testing.assert_allclose(out.data[:, 0], expected)

    def test_matches_reference_on_random_input(self):
        rng = np.random.default_rng(0)
        for dilation in (1, 2, 3):
            x = rng.normal(size=(10, 3))
            kernel = rng.normal(size=(3, 3, 2))
            bias = rng.normal(size=2)
            out = conv1d_causal(Tensor(x), Tensor(kernel), Tensor(bias),
                                dilation=dilation)
            np.testing.assert_allclose(out.data,
                                       conv_reference(x, kernel, bias, dilation),
                                       atol=1e-12)

    def test_causality_bitwise(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(12, 2))
        kernel = rng.normal(size=(3, 2, 2))
        bias = rng.normal(size=2)
        base = conv1d_causal(Tensor(x), Tensor(kernel), Tensor(bias), dilation=2).data
        for t_perturb in range(12):
            x2 = x.copy()
            x2[t_perturb] += 5.0
            out = conv1d_causal(Tensor(x2), Tensor(kernel), Tensor(bias), dilation=2).data
            assert np.array_equal(out[:t_perturb], base[:t_perturb])

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 2))
        kernel = Tensor(rng.normal(size=(3, 2, 3)))
        a, b = 1.7, -0.3

        def conv(v):
            return conv1d_causal(Tensor(v), kernel, dilation=1).data

        np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y),
                                   atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            conv1d_causal(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 3, 1))))

    def test_leading_batch_dims(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 7, 2))
        kernel = rng.normal(size=(2, 2, 3))
        bias = rng.normal(size=3)
        out = conv1d_causal(Tensor(x), Tensor(kernel), Tensor(bias), dilation=2)
        assert out.data.shape == (2, 5, 7, 3)
        np.testing.assert_allclose(out.data[1, 3],
                                   conv_reference(x[1, 3], kernel, bias, 2),
                                   atol=1e-12)


class TestConv1x1:
    def test_identity(self):
        out = conv1x1(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_sum_with_bias(self):
        out = conv1x1(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        np.testing.assert_allclose(out.data, [[4.0]])

    def test_zero_input_passes_bias(self):
        out = conv1x1(Tensor([[0.0, 0.0]]), Tensor([[5.0], [7.0]]), Tensor([3.0]))
        np.testing.assert_array_equal(out.data, [[3.0]])

    def test_equals_conv1d_with_k1(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        a = conv1x1(Tensor(x), Tensor(w), Tensor(b)).data
        c = conv1d_causal(Tensor(x), Tensor(w[None]), Tensor(b), dilation=1).data
        np.testing.assert_allclose(a, c, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            conv1x1(Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 2))))


class TestBoundedStd:
    def test_zero_raw(self):
        out = bounded_std(Tensor(np.zeros(1)), 1e-3)
        np.testing.assert_allclose(out.data, 1e-3 + math.log(2.0), rtol=1e-12)

    def test_underflow_floor(self):
        out = bounded_std(Tensor([-50.0]), 1e-3)
        np.testing.assert_allclose(out.data, 1e-3, atol=1e-12)

    def test_large_raw_is_linear(self):
        out = bounded_std(Tensor([50.0]), 1e-3)
        np.testing.assert_allclose(out.data, 50.001, rtol=1e-10)

    def test_strictly_positive(self):
        out = bounded_std(Tensor(np.linspace(-100, 100, 201)), 1e-3)
        assert np.all(out.data >= 1e-3)


class TestDiagGaussianLogpdf:
    def test_standard_normal_at_mean(self):
        g = DiagGaussian(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
        out = diag_gaussian_logpdf(np.zeros((1, 1)), g, np.ones((1, 1)))
        assert out.item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert out.item() == pytest.approx(-0.918939, abs=1e-6)

    def test_masked_entry_contributes_zero(self):
        g = DiagGaussian(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
        out = diag_gaussian_logpdf(np.full((1, 1), 5.0), g, np.zeros((1, 1)))
        assert out.item() == 0.0

    def test_unit_offset(self):
        g = DiagGaussian(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
        out = diag_gaussian_logpdf(np.ones((1, 1)), g, np.ones((1, 1)))
        assert out.item() == pytest.approx(-1.418939, abs=1e-6)

    def test_matches_scipy(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=(4, 3))
        mu = rng.normal(size=(4, 3))
        sigma = rng.uniform(0.5, 2.0, size=(4, 3))
        mask = (rng.uniform(size=(4, 3)) < 0.7).astype(float)
        g = DiagGaussian(Tensor(mu), Tensor(sigma))
        out = diag_gaussian_logpdf(y, g, mask)
        expected = (stats.norm.logpdf(y, mu, sigma) * mask).sum()
        assert out.item() == pytest.approx(expected, rel=1e-12)

    def test_masked_flip_invariance(self):
        rng = np.random.default_rng(6)
        y = rng.normal(size=(5, 2))
        mask = (rng.uniform(size=(5, 2)) < 0.5).astype(float)
        g = DiagGaussian(Tensor(rng.normal(size=(5, 2))),
                         Tensor(rng.uniform(0.5, 2, size=(5, 2))))
        base = diag_gaussian_logpdf(y, g, mask).item()
        y2 = y.copy()
        y2[mask == 0.0] = 1e6
        assert diag_gaussian_logpdf(y2, g, mask).item() == base

    def test_nonpositive_sigma_raises(self):
        g = DiagGaussian(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))))
        with pytest.raises(ValueError):
            diag_gaussian_logpdf(np.zeros((1, 1)), g, np.ones((1, 1)))


def kl_quadrature(mu_q, s_q, mu_p, s_p):
    """Independent oracle: numerically integrate q log(q/p)."""
    def integrand(x):
        lq = stats.norm.logpdf(x, mu_q, s_q)
        lp = stats.norm.logpdf(x, mu_p, s_p)
        return np.exp(lq) * (lq - lp)
    lo = mu_q - 12 * s_q
    hi = mu_q + 12 * s_q
    val, _err = integrate.quad(integrand, lo, hi, limit=200)
    return val


class TestDiagGaussianKl:
    def g(self, mu, sigma):
        return DiagGaussian(Tensor(np.full((1, 1), float(mu))),
                            Tensor(np.full((1, 1), float(sigma))))

    def test_identical_is_zero(self):
        assert diag_gaussian_kl(self.g(0, 1), self.g(0, 1)).item() == 0.0

    def test_mean_shift(self):
        val = diag_gaussian_kl(self.g(1, 1), self.g(0, 1)).item()
        assert val == pytest.approx(0.5, abs=1e-12)
        assert val == pytest.approx(kl_quadrature(1, 1, 0, 1), abs=1e-9)

    def test_scale_two(self):
        val = diag_gaussian_kl(self.g(0, 2), self.g(0, 1)).item()
        assert val == pytest.approx(0.5 * (4 - 1 - math.log(4.0)), abs=1e-12)
        assert val == pytest.approx(0.806853, abs=1e-6)
        assert val == pytest.approx(kl_quadrature(0, 2, 0, 1), abs=1e-9)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            q = self.g(rng.normal(), rng.uniform(0.1, 3))
            p = self.g(rng.normal(), rng.uniform(0.1, 3))
            assert diag_gaussian_kl(q, p).item() >= 0.0

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(8)
        mu = rng.normal(size=(3, 2))
        sigma = rng.uniform(0.5, 2, size=(3, 2))
        q = DiagGaussian(Tensor(mu), Tensor(sigma))
        p = DiagGaussian(Tensor(mu.copy()), Tensor(sigma.copy()))
        assert diag_gaussian_kl(q, p).item() == 0.0
        p2 = DiagGaussian(Tensor(mu + 1e-8), Tensor(sigma))
        assert diag_gaussian_kl(q, p2).item() > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            diag_gaussian_kl(
                DiagGaussian(Tensor(np.zeros((2, 1))), Tensor(np.ones((2, 1)))),
                DiagGaussian(Tensor(np.zeros((3, 1))), Tensor(np.ones((3, 1)))))


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        g = DiagGaussian(Tensor(np.full((1, 1), 3.0)), Tensor(np.full((1, 1), 1e-3)))
        out = reparameterize(g, np.zeros((1, 1)))
        assert out.data[0, 0] == 3.0

    def test_standardized_identity(self):
        g = DiagGaussian(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
        assert reparameterize(g, np.full((1, 1), 1.5)).data[0, 0] == 1.5

    def test_affine(self):
        g = DiagGaussian(Tensor(np.full((1, 1), 2.0)), Tensor(np.full((1, 1), 3.0)))
        assert reparameterize(g, np.full((1, 1), -1.0)).data[0, 0] == -1.0

    def test_gradient_skips_noise(self):
        mu = Tensor(np.zeros((2, 2)), requires_grad=True)
        sigma = Tensor(np.ones((2, 2)), requires_grad=True)
        noise = np.full((2, 2), 2.0)
        with Tape() as tape:
            out = tsum(reparameterize(DiagGaussian(mu, sigma), noise))
        backward(tape, out)
        np.testing.assert_array_equal(mu.grad, np.ones((2, 2)))
        np.testing.assert_array_equal(sigma.grad, noise)


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            loss = square(x)
        backward(tape, loss)
        assert x.grad == pytest.approx(6.0)

    def test_conv_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
        kernel = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
        bias = Tensor(rng.normal(size=2), requires_grad=True)

        def program(_):
            return tsum(conv1d_causal(x, kernel, bias, dilation=2))

        assert finite_diff_check(program, [x, kernel, bias], h=1e-5) < 1e-7

    def test_kl_gradient_closed_form(self):
        mu_q = Tensor(np.full((1, 1), 1.0), requires_grad=True)
        q = DiagGaussian(mu_q, Tensor(np.ones((1, 1))))
        p = DiagGaussian(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
        with Tape() as tape:
            loss = diag_gaussian_kl(q, p)
        backward(tape, loss)
        assert mu_q.grad[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_fanout_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        with Tape() as tape:
            loss = x * x + x * x  # two uses of the same product plus fan-out of x
        backward(tape, loss)
        assert x.grad == pytest.approx(8.0)

    def test_disconnected_loss_raises(self):
        x = Tensor(np.array(1.0))
        with Tape() as tape:
            loss = x * x
        with pytest.raises(ValueError):
            backward(tape, loss)

    def test_nonscalar_loss_raises(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ValueError):
            backward(tape, y)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        a = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)

        def program(_):
            return tsum(square(a) * 3.0 + a * 2.0)

        assert finite_diff_check(program, [a], h=1e-5) < 1e-7

    def test_constant_function(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def program(_):
            return Tensor(np.array(5.0)) + tsum(a) * 0.0

        assert finite_diff_check(program, [a], h=1e-5) == 0.0

    def test_nondeterministic_program_rejected(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        rng = np.random.default_rng(0)

        def program(_):
            return tsum(a * rng.normal())

        with pytest.raises(ValueError):
            finite_diff_check(program, [a])

    def test_every_op_composite(self):
        # one program threading every differentiable primitive
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        kernel = Tensor(rng.normal(size=(2, 3, 3)) * 0.3, requires_grad=True)
        noise = rng.normal(size=(5, 3))

        def program(_):
            h = conv1x1(x, w)
            h = conv1d_causal(h, kernel, dilation=1)
            h = tanh(h) + softplus(h) * 0.1
            g = DiagGaussian(narrow(h, 1, 0, 1),
                             bounded_std(narrow(h, 1, 1, 1), 1e-3))
            z = reparameterize(g, noise[:, :1])
            pieces = concat([z, exp(z * 0.1), sqrt(square(z) + 1.0)], axis=1)
            lp = diag_gaussian_logpdf(np.ones((5, 1)), g, np.ones((5, 1)))
            kl = diag_gaussian_kl(
                g, DiagGaussian(Tensor(np.zeros((5, 1))), Tensor(np.ones((5, 1)))))
            return tsum(pieces) + lp * 0.5 + kl + tsum(log(square(z) + 1.5))

        assert finite_diff_check(program, [x, w, kernel], h=1e-5) < 1e-5


class TestTensorInvariants:
    def test_grad_shape_matches(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(x * 2.0)
        backward(tape, loss)
        assert x.grad.shape == x.data.shape

    def test_finite_check_flag(self):
        from stgnp.tensor import set_finite_checks
        set_finite_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                log(Tensor([-1.0]))
        finally:
            set_finite_checks(False)

    def test_tape_clear(self):
        t = Tape()
        with t:
            x = Tensor(np.array(1.0), requires_grad=True)
            _ = x * x
        assert len(t) == 1
        t.clear()
        assert len(t) == 0
