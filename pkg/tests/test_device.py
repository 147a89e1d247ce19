import numpy as np
import pytest

from giftnn.device import Device, device_forward, set_device_params
from giftnn.model import (
    Architecture,
    NoiseModel,
    Params,
    RngStream,
    STREAM_DEVICE,
    forward_deterministic,
    forward_noisy,
    sample_noise,
)

from test_model import small_params


def identity_device(family, s, seed=0, d=2):
    arch = Architecture((d, d), "tanh")
    p = Params(arch, [np.eye(d)], [np.zeros(d)])
    return Device(arch, p, NoiseModel(family, s), seed=seed), p


def zero_weight_device(family, s, seed=0, d=1):
    arch = Architecture((d, d), "tanh")
    p = Params(arch, [np.zeros((d, d))], [np.zeros(d)])
    return Device(arch, p, NoiseModel(family, s), seed=seed), p


class TestForward:
    def test_matches_in_silico_stream(self):
        # gaussian device at slot j == forward_noisy with the device stream at index j
        p = small_params([3, 2], seed=1)
        dev = Device(p.arch, p, NoiseModel("gaussian_additive", 0.3), seed=11)
        x = np.array([0.5, -0.2, 0.1])
        out = dev.forward(x, noise_slot=4)
        draw = sample_noise(p.arch, NoiseModel("gaussian_additive", 0.3),
                            RngStream(11, STREAM_DEVICE), index=4)
        ref = forward_noisy(p, x, draw).activations[-1]
        assert np.array_equal(out, ref)

    def test_same_seed_same_outputs(self):
        p = small_params([2, 2], seed=2)
        model = NoiseModel("gaussian_additive", 0.2)
        a = Device(p.arch, p, model, seed=5)
        b = Device(p.arch, p, model, seed=5)
        x = np.array([0.1, 0.2])
        assert np.array_equal(a.forward(x), b.forward(x))

    def test_fresh_calls_use_fresh_noise(self):
        dev, _ = identity_device("gaussian_additive", 0.5)
        x = np.zeros(2)
        assert not np.array_equal(dev.forward(x), dev.forward(x))

    def test_shared_slot_reproduces_noise(self):
        dev, p = identity_device("gaussian_additive", 0.5)
        x = np.array([0.3, -0.3])
        slot = dev.new_slot()
        a = dev.forward(x, noise_slot=slot)
        b = dev.forward(x, noise_slot=slot)
        assert np.array_equal(a, b)

    def test_shape_check(self):
        dev, _ = identity_device("gaussian_additive", 0.1)
        with pytest.raises(ValueError):
            dev.forward(np.zeros(3))

    def test_batch_consistent_with_loop(self):
        dev, _ = identity_device("gaussian_additive", 0.4, seed=3)
        X = RngStream(4, 1).generator(0).standard_normal((5, 2))
        slot = dev.new_slot()
        batch = dev.forward_batch(X, noise_slot=slot)
        assert batch.shape == (5, 2)
        again = dev.forward_batch(X, noise_slot=slot)
        assert np.array_equal(batch, again)


class TestQueryCounter:
    def test_increments_per_forward(self):
        dev, _ = identity_device("gaussian_additive", 0.1)
        assert dev.query_count == 0
        dev.forward(np.zeros(2))
        assert dev.query_count == 1
        dev.forward_batch(np.zeros((7, 2)))
        assert dev.query_count == 8


class TestFamilies:
    def test_uniform_site_variance(self):
        # W=0 isolates the output-site noise: Var = s^2/3 per component
        s = 0.6
        dev, _ = zero_weight_device("uniform", s, d=1)
        outs = dev.forward_batch(np.zeros((10**5, 1)))
        assert abs(outs.var() / (s**2 / 3) - 1.0) < 0.05

    def test_uniform_identity_net_total_variance(self):
        # identity net passes input-site noise through: Var = 2 s^2/3
        s = 0.6
        dev, _ = identity_device("uniform", s, d=1)
        outs = dev.forward_batch(np.zeros((10**5, 1)))
        assert abs(outs.var() / (2 * s**2 / 3) - 1.0) < 0.05

    def test_laplace_excess_kurtosis(self):
        dev, _ = zero_weight_device("laplace", 0.5, d=1)
        outs = dev.forward_batch(np.zeros((2 * 10**5, 1))).ravel()
        m2 = (outs**2).mean()
        m4 = (outs**4).mean()
        assert abs(m4 / m2**2 - 3.0 - 3.0) < 0.4

    def test_laplace_scale_parameterization(self):
        # level is the Laplace scale b: Var = 2 b^2
        b = 0.3
        dev, _ = zero_weight_device("laplace", b, d=1)
        outs = dev.forward_batch(np.zeros((2 * 10**5, 1)))
        assert abs(outs.var() / (2 * b**2) - 1.0) < 0.05

    def test_multiplicative_zero_input_is_biasless(self):
        # x=0 through zero weights: output = b*(1+sg) terms vanish -> exactly 0
        dev, _ = zero_weight_device("gaussian_multiplicative", 0.3, d=2)
        outs = dev.forward_batch(np.zeros((100, 2)))
        assert np.allclose(outs, 0.0)

    def test_multiplicative_scales_with_signal(self):
        s = 0.2
        dev, _ = identity_device("gaussian_multiplicative", s, d=1)
        x = np.full((10**5, 1), 2.0)
        outs = dev.forward_batch(x)
        assert abs(outs.mean() - 2.0) < 0.02
        assert outs.var() > 0.5 * s**2 * 4.0


class TestSetParams:
    def test_replaces_params(self):
        dev, p = identity_device("gaussian_additive", 1e-9, d=2)
        q = p.copy()
        q.weights[0][:] = 2 * np.eye(2)
        set_device_params(dev, q)
        x = np.array([1.0, -1.0])
        assert np.allclose(dev.forward(x), 2 * x, atol=1e-6)

    def test_tiny_level_matches_deterministic(self):
        p = small_params([3, 3, 2], seed=6)
        dev = Device(p.arch, p, NoiseModel("gaussian_additive", 1e-9), seed=0)
        x = np.array([0.2, 0.4, -0.5])
        assert np.allclose(dev.forward(x), forward_deterministic(p, x), atol=1e-7)

    def test_dims_mismatch_rejected(self):
        dev, _ = identity_device("gaussian_additive", 0.1, d=2)
        with pytest.raises(ValueError):
            set_device_params(dev, small_params([3, 2]))

    def test_does_not_reset_counter(self):
        dev, p = identity_device("gaussian_additive", 0.1)
        dev.forward(np.zeros(2))
        set_device_params(dev, p.copy())
        assert dev.query_count == 1


class TestOpacity:
    def test_no_trace_or_noise_leaks(self):
        dev, _ = identity_device("gaussian_additive", 0.1)
        exposed = [a for a in dir(dev) if not a.startswith("_")]
        for attr in exposed:
            assert "trace" not in attr.lower()
            assert "noise_draw" not in attr.lower()
        out = dev.forward(np.zeros(2))
        assert isinstance(out, np.ndarray) and out.shape == (2,)

    def test_output_is_a_copy(self):
        dev, _ = identity_device("gaussian_additive", 0.1)
        out = dev.forward(np.zeros(2))
        out[:] = 99.0
        again = dev.forward(np.zeros(2))
        assert not np.array_equal(out, again)


def test_device_forward_helper():
    dev, _ = identity_device("gaussian_additive", 1e-9)
    x = np.array([0.7, -0.7])
    assert np.allclose(device_forward(dev, x), x, atol=1e-6)
