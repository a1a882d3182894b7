"""Interval bound propagation: soundness, exactness at zero radius,
monotonicity, and differentiability of the bounds."""

import numpy as np
import pytest

import civet.tensor as T
from civet.intervals import (InputRegion, IntervalTensor, interval_activation,
                             interval_affine, interval_conv2d,
                             interval_conv2d_transpose, propagate_decoder,
                             propagate_encoder, region_to_interval)
from civet.gaussian import SupportSet, ProbabilityThreshold, find_support
from civet.model import encode, init_parameters, make_architecture
from civet.tensor import Tape, Tensor

from helpers import fd_gradcheck


def box(lo, hi):
    return IntervalTensor(lower=Tensor(lo), upper=Tensor(hi))


class TestRegionToInterval:
    def test_plain(self):
        iv = region_to_interval(InputRegion(center=[0.5], epsilon=0.1))
        assert iv.lower.data[0] == pytest.approx(0.4)
        assert iv.upper.data[0] == pytest.approx(0.6)

    def test_clamp_active(self):
        iv = region_to_interval(InputRegion(center=[0.05], epsilon=0.1))
        assert iv.lower.data[0] == 0.0
        assert iv.upper.data[0] == pytest.approx(0.15)

    def test_degenerate(self):
        iv = region_to_interval(InputRegion(center=[0.3, 0.7], epsilon=0.0))
        assert np.array_equal(iv.lower.data, iv.upper.data)

    def test_invalid_region(self):
        with pytest.raises(ValueError):
            InputRegion(center=[0.5], epsilon=-0.1)
        with pytest.raises(ValueError):
            InputRegion(center=[2.0], epsilon=0.1)  # outside clamp range


class TestIntervalAffine:
    def test_symmetric(self):
        out = interval_affine(box([0.0, 0.0], [1.0, 1.0]),
                              Tensor([[1.0, -1.0]]), Tensor([0.0]))
        assert out.lower.data == pytest.approx([-1.0])
        assert out.upper.data == pytest.approx([1.0])

    def test_scaling(self):
        out = interval_affine(box([-1.0], [1.0]), Tensor([[2.0]]), Tensor([1.0]))
        assert out.lower.data == pytest.approx([-1.0])
        assert out.upper.data == pytest.approx([3.0])

    def test_sampling_soundness(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((6, 4))
        b = rng.standard_normal(6)
        lo = rng.uniform(-1, 0, 4)
        hi = lo + rng.uniform(0, 2, 4)
        out = interval_affine(box(lo, hi), Tensor(w), Tensor(b))
        xs = lo + rng.random((1000, 4)) * (hi - lo)
        ys = xs @ w.T + b
        assert np.all(ys >= out.lower.data)
        assert np.all(ys <= out.upper.data)


class TestIntervalConv:
    def test_zero_kernel(self):
        out = interval_conv2d(box(np.zeros((1, 4, 4)), np.ones((1, 4, 4))),
                              Tensor(np.zeros((2, 1, 3, 3))), Tensor([3.0, -1.0]))
        assert np.all(out.lower.data[0] == 3.0)
        assert np.all(out.upper.data[0] == 3.0)
        assert np.all(out.lower.data[1] == -1.0)

    def test_nonnegative_kernel_endpoint_convolutions(self):
        # for an all-ones kernel the bounds are the convolutions of the endpoints
        k = np.ones((1, 1, 3, 3))
        lo = np.zeros((1, 4, 4))
        hi = np.ones((1, 4, 4))
        out = interval_conv2d(box(lo, hi), Tensor(k), Tensor([0.0]))
        want_lo = T.conv2d(Tensor(lo), Tensor(k), Tensor([0.0])).data
        want_hi = T.conv2d(Tensor(hi), Tensor(k), Tensor([0.0])).data
        assert np.allclose(out.lower.data, want_lo, atol=1e-12)
        assert np.allclose(out.upper.data, want_hi, atol=1e-12)

    def test_sampling_soundness(self):
        rng = np.random.default_rng(1)
        k = rng.standard_normal((2, 1, 3, 3))
        b = rng.standard_normal(2)
        lo = rng.uniform(-0.5, 0.0, (1, 5, 5))
        hi = lo + rng.uniform(0.0, 1.0, (1, 5, 5))
        out = interval_conv2d(box(lo, hi), Tensor(k), Tensor(b), stride=2, padding=1)
        for _ in range(300):
            x = lo + rng.random((1, 5, 5)) * (hi - lo)
            y = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
            assert np.all(y >= out.lower.data) and np.all(y <= out.upper.data)

    def test_transpose_sampling_soundness(self):
        rng = np.random.default_rng(2)
        k = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(3)
        lo = rng.uniform(-0.5, 0.0, (2, 3, 3))
        hi = lo + rng.uniform(0.0, 1.0, (2, 3, 3))
        out = interval_conv2d_transpose(box(lo, hi), Tensor(k), Tensor(b),
                                        stride=2, padding=1)
        for _ in range(300):
            x = lo + rng.random((2, 3, 3)) * (hi - lo)
            y = T.conv2d_transpose(Tensor(x), Tensor(k), Tensor(b),
                                   stride=2, padding=1).data
            assert np.all(y >= out.lower.data) and np.all(y <= out.upper.data)


class TestIntervalActivation:
    def test_relu(self):
        out = interval_activation(box([-1.0], [2.0]), "relu")
        assert (out.lower.data[0], out.upper.data[0]) == (0.0, 2.0)

    def test_sigmoid_degenerate(self):
        out = interval_activation(box([0.0], [0.0]), "sigmoid")
        assert out.lower.data[0] == out.upper.data[0] == 0.5

    def test_exp(self):
        out = interval_activation(box([0.0], [1.0]), "exp")
        assert out.lower.data[0] == pytest.approx(1.0)
        assert out.upper.data[0] == pytest.approx(np.e)


@pytest.fixture(scope="module")
def small_net():
    arch = make_architecture("synth")
    params = init_parameters(arch, np.random.default_rng(42))
    return arch, params


class TestPropagateEncoder:
    def test_zero_radius_collapses_to_forward(self, small_net):
        arch, params = small_net
        rng = np.random.default_rng(3)
        x = rng.random(arch.d_in)
        bounds = propagate_encoder(params, InputRegion(center=x, epsilon=0.0))
        dist = encode(params, Tensor(x))
        assert np.allclose(bounds.mu_lb.data, dist.mu.data, atol=1e-12)
        assert np.allclose(bounds.mu_ub.data, dist.mu.data, atol=1e-12)
        assert np.allclose(bounds.sigma_lb.data, dist.sigma.data, atol=1e-12)
        assert np.allclose(bounds.sigma_ub.data, dist.sigma.data, atol=1e-12)

    def test_sampling_soundness(self, small_net):
        arch, params = small_net
        rng = np.random.default_rng(4)
        x = rng.random(arch.d_in)
        region = InputRegion(center=x, epsilon=0.05)
        bounds = propagate_encoder(params, region)
        iv = region_to_interval(region)
        xs = iv.lower.data + rng.random((10_000, arch.d_in)) * (iv.upper.data - iv.lower.data)
        dist = encode(params, Tensor(xs))
        assert np.all(dist.mu.data >= bounds.mu_lb.data)
        assert np.all(dist.mu.data <= bounds.mu_ub.data)
        assert np.all(dist.sigma.data >= bounds.sigma_lb.data)
        assert np.all(dist.sigma.data <= bounds.sigma_ub.data)

    def test_monotone_in_epsilon(self, small_net):
        arch, params = small_net
        x = np.full(arch.d_in, 0.5)
        b1 = propagate_encoder(params, InputRegion(center=x, epsilon=0.01))
        b2 = propagate_encoder(params, InputRegion(center=x, epsilon=0.02))
        assert np.all(b2.mu_lb.data <= b1.mu_lb.data + 1e-15)
        assert np.all(b2.mu_ub.data >= b1.mu_ub.data - 1e-15)
        assert np.all(b2.sigma_ub.data >= b1.sigma_ub.data - 1e-15)

    def test_conv_architecture(self):
        arch = make_architecture("tiny_conv")
        params = init_parameters(arch, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        x = rng.random(arch.d_in)
        region = InputRegion(center=x, epsilon=0.03)
        bounds = propagate_encoder(params, region)
        iv = region_to_interval(region)
        xs = iv.lower.data + rng.random((2000, arch.d_in)) * (iv.upper.data - iv.lower.data)
        dist = encode(params, Tensor(xs))
        assert np.all(dist.mu.data >= bounds.mu_lb.data)
        assert np.all(dist.mu.data <= bounds.mu_ub.data)


def make_support(lo, hi):
    return SupportSet(lower=Tensor(lo), upper=Tensor(hi),
                      threshold=ProbabilityThreshold(0.05),
                      per_dim_p0=np.full(np.shape(lo)[-1], np.nan))


class TestPropagateDecoder:
    def test_point_support_degenerate(self, small_net):
        arch, params = small_net
        rng = np.random.default_rng(7)
        z = rng.standard_normal(arch.d_l)
        out = propagate_decoder(params, make_support(z, z))
        from civet.model import decode
        y = decode(params, Tensor(z)).data
        assert np.allclose(out.lower.data, y, atol=1e-12)
        assert np.allclose(out.upper.data, y, atol=1e-12)

    def test_sampling_soundness(self, small_net):
        arch, params = small_net
        rng = np.random.default_rng(8)
        lo = rng.standard_normal(arch.d_l)
        hi = lo + rng.uniform(0, 1, arch.d_l)
        out = propagate_decoder(params, make_support(lo, hi))
        from civet.model import decode
        zs = lo + rng.random((10_000, arch.d_l)) * (hi - lo)
        ys = decode(params, Tensor(zs)).data
        assert np.all(ys >= out.lower.data)
        assert np.all(ys <= out.upper.data)

    def test_nested_supports_monotone(self, small_net):
        arch, params = small_net
        rng = np.random.default_rng(9)
        lo = rng.standard_normal(arch.d_l)
        hi = lo + rng.uniform(0.1, 1, arch.d_l)
        inner = propagate_decoder(params, make_support(lo + 0.05, hi - 0.05))
        outer = propagate_decoder(params, make_support(lo, hi))
        assert np.all(outer.lower.data <= inner.lower.data + 1e-15)
        assert np.all(outer.upper.data >= inner.upper.data - 1e-15)

    def test_dim_mismatch(self, small_net):
        arch, params = small_net
        with pytest.raises(T.ShapeError, match="latent dims"):
            propagate_decoder(params, make_support(np.zeros(3), np.ones(3)))


class TestDifferentiability:
    def test_affine_width_gradient(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        lo = rng.uniform(-1, 0, 4)
        hi = lo + rng.uniform(0, 1, 4)

        def width_sum(wv, bv):
            out = interval_affine(box(lo, hi), wv, bv)
            return T.tsum(out.width())

        fd_gradcheck(width_sum, [w, b], rng=rng)

    def test_conv_width_gradient(self):
        rng = np.random.default_rng(11)
        k = rng.standard_normal((2, 1, 3, 3))
        b = rng.standard_normal(2)
        lo = rng.uniform(-1, 0, (1, 4, 4))
        hi = lo + rng.uniform(0, 1, (1, 4, 4))

        def width_sum(kv, bv):
            out = interval_conv2d(box(lo, hi), kv, bv, stride=1, padding=1)
            return T.tsum(out.width())

        fd_gradcheck(width_sum, [k, b], rng=rng)

    def test_encoder_bound_gradient(self, small_net):
        arch, _ = small_net
        rng = np.random.default_rng(12)
        params = init_parameters(arch, rng)
        x = rng.random(arch.d_in)
        region = InputRegion(center=x, epsilon=0.05)
        w0 = params["enc.0.weight"].data

        def bound_gap(wv):
            tensors = {n: (wv if n == "enc.0.weight" else t) for n, t in params.items()}
            p = T.ParameterSet(tensors, arch=arch)
            bounds = propagate_encoder(p, region)
            return T.tsum(T.add(T.sub(bounds.mu_ub, bounds.mu_lb),
                                T.sub(bounds.sigma_ub, bounds.sigma_lb)))

        fd_gradcheck(bound_gap, [w0], rng=rng)

    def test_support_box_gradient_through_decoder(self, small_net):
        """d(interval width)/d(weights) through encoder -> support -> decoder."""
        arch, _ = small_net
        rng = np.random.default_rng(13)
        params = init_parameters(arch, rng)
        x = rng.random(arch.d_in)
        region = InputRegion(center=x, epsilon=0.02)
        base_bounds = propagate_encoder(params, region)
        frozen = find_support(base_bounds, 0.05).quantiles
        w0 = params["dec.0.weight"].data

        def worst_gap(wv):
            tensors = {n: (wv if n == "dec.0.weight" else t) for n, t in params.items()}
            p = T.ParameterSet(tensors, arch=arch)
            bounds = propagate_encoder(p, region)
            half = T.mul(bounds.sigma_ub, Tensor(frozen))
            support = make_support(np.zeros(arch.d_l), np.zeros(arch.d_l))
            support.lower = T.sub(bounds.mu_lb, half)
            support.upper = T.add(bounds.mu_ub, half)
            out = propagate_decoder(p, support)
            return T.tsum(out.width())

        fd_gradcheck(worst_gap, [w0], rng=rng)


class TestIntervalInvariants:
    def test_ordering_enforced(self):
        with pytest.raises(Exception, match="lower exceeds upper"):
            IntervalTensor(lower=Tensor([1.0]), upper=Tensor([0.0]))

    def test_random_nets_preserve_ordering(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            w = rng.standard_normal((5, 5)) * 3
            lo = rng.uniform(-2, 2, 5)
            hi = lo + rng.uniform(0, 3, 5)
            out = interval_affine(box(lo, hi), Tensor(w))
            assert np.all(out.lower.data <= out.upper.data)
            act = interval_activation(out, "tanh")
            assert np.all(act.lower.data <= act.upper.data)
