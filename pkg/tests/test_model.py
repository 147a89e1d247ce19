import numpy as np
import pytest

from giftnn.model import (
    Architecture,
    Hyperrectangle,
    NoiseDraw,
    NoiseModel,
    Params,
    RngStream,
    apply_step,
    forward_deterministic,
    forward_noisy,
    load_params,
    project,
    sample_noise,
    sample_noise_batch,
    save_params,
    zero_noise,
)


def small_params(dims, seed=0, scale=0.7):
    arch = Architecture(tuple(dims), "tanh")
    gen = RngStream(seed, 1).generator(0)
    ws = [gen.uniform(-scale, scale, (dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    bs = [gen.uniform(-0.3, 0.3, dims[i + 1]) for i in range(len(dims) - 1)]
    return Params(arch, ws, bs)


class TestArchitecture:
    def test_requires_two_dims(self):
        with pytest.raises(ValueError):
            Architecture((4,), "tanh")

    def test_requires_positive_dims(self):
        with pytest.raises(ValueError):
            Architecture((4, 0, 2), "tanh")

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            Architecture((2, 2), "relu")

    def test_n_layers(self):
        assert Architecture((3, 4, 2), "tanh").n_layers == 2


class TestParams:
    def test_shape_mismatch_rejected(self):
        arch = Architecture((2, 3), "tanh")
        with pytest.raises(ValueError):
            Params(arch, [np.zeros((3, 3))], [np.zeros(3)])

    def test_nonfinite_rejected(self):
        arch = Architecture((2, 1), "tanh")
        with pytest.raises(ValueError):
            Params(arch, [np.array([[np.inf, 0.0]])], [np.zeros(1)])

    def test_vector_round_trip(self):
        p = small_params([3, 4, 2])
        q = Params.from_vector(p.arch, p.to_vector())
        for a, b in zip(p.weights, q.weights):
            assert np.array_equal(a, b)
        for a, b in zip(p.biases, q.biases):
            assert np.array_equal(a, b)

    def test_copy_is_independent(self):
        p = small_params([2, 2])
        q = p.copy()
        q.weights[0][0, 0] += 1.0
        assert p.weights[0][0, 0] != q.weights[0][0, 0]


class TestNoiseModel:
    def test_zero_level_rejected(self):
        for family in ("gaussian_additive", "uniform", "laplace", "gaussian_multiplicative"):
            with pytest.raises(ValueError):
                NoiseModel(family, 0.0)

    def test_negative_level_rejected(self):
        with pytest.raises(ValueError):
            NoiseModel("gaussian_additive", -0.1)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            NoiseModel("poisson", 0.1)


class TestSampleNoise:
    def test_two_l_vectors_with_matching_dims(self):
        arch = Architecture((3, 5, 4, 2), "tanh")
        draw = sample_noise(arch, NoiseModel("gaussian_additive", 0.5), RngStream(0, 3))
        assert len(draw.act) == 3       # a_0 .. a_{L-1}
        assert len(draw.weigh) == 3     # w_1 .. w_L
        assert [v.shape[0] for v in draw.act] == [3, 5, 4]
        assert [v.shape[0] for v in draw.weigh] == [5, 4, 2]

    def test_same_seed_bitwise_identical(self):
        arch = Architecture((2, 3), "tanh")
        model = NoiseModel("gaussian_additive", 1.0)
        a = sample_noise(arch, model, RngStream(7, 3), index=5)
        b = sample_noise(arch, model, RngStream(7, 3), index=5)
        for u, v in zip(a.act + a.weigh, b.act + b.weigh):
            assert np.array_equal(u, v)

    def test_gaussian_moments(self):
        # law of large numbers on one site: mean within 4 sigma/sqrt(n), var within 5%
        arch = Architecture((2, 4), "tanh")
        model = NoiseModel("gaussian_additive", 1.0)
        n = 10**5
        batch = sample_noise_batch(arch, model, RngStream(1, 3), 0, n)
        site = batch.weigh[0]
        assert site.shape == (n, 4)
        assert abs(site.mean()) < 4.0 / np.sqrt(n * 4)
        assert abs(site.var() - 1.0) < 0.05

    def test_batch_matches_sequence_distribution(self):
        arch = Architecture((2, 2), "tanh")
        model = NoiseModel("uniform", 0.3)
        batch = sample_noise_batch(arch, model, RngStream(2, 3), 0, 10_000)
        assert np.all(np.abs(batch.act[0]) <= 0.3)
        assert abs(batch.act[0].var() - 0.3**2 / 3) < 0.002


class TestForward:
    def test_affine_example(self):
        # L=1, W=[[2]], b=[1], x=[3], zero noise -> [7]
        arch = Architecture((1, 1), "tanh")
        p = Params(arch, [np.array([[2.0]])], [np.array([1.0])])
        trace = forward_noisy(p, np.array([3.0]), zero_noise(arch))
        assert np.allclose(trace.activations[-1], [7.0])
        assert np.allclose(forward_deterministic(p, np.array([3.0])), [7.0])

    def test_identity_composition(self):
        # L=2 identity chain: output tanh(0.5)
        arch = Architecture((1, 1, 1), "tanh")
        p = Params(arch, [np.eye(1), np.eye(1)], [np.zeros(1), np.zeros(1)])
        out = forward_deterministic(p, np.array([0.5]))
        assert abs(out[0] - 0.46211715726) < 1e-10

    def test_straight_line_oracle(self):
        # independent reimplementation of the noisy recursion, 1e-12 relative
        p = small_params([3, 4, 2], seed=5)
        arch = p.arch
        draw = sample_noise(arch, NoiseModel("gaussian_additive", 0.4), RngStream(6, 3))
        x = RngStream(7, 3).generator(0).standard_normal(3)
        trace = forward_noisy(p, x, draw)

        a = x + draw.act[0]
        for l in range(arch.n_layers):
            z = p.weights[l] @ a + p.biases[l] + draw.weigh[l]
            if l < arch.n_layers - 1:
                a = np.tanh(z) + draw.act[l + 1]
            else:
                a = z
        assert np.allclose(trace.activations[-1], a, rtol=1e-12, atol=1e-14)

    def test_trace_invariants_recompute(self):
        p = small_params([2, 3, 3, 1], seed=9)
        arch = p.arch
        draw = sample_noise(arch, NoiseModel("gaussian_additive", 0.2), RngStream(8, 3))
        x = np.array([0.3, -0.8])
        trace = forward_noisy(p, x, draw)
        assert np.array_equal(trace.activations[0], x + draw.act[0])
        for l in range(arch.n_layers):
            z = p.weights[l] @ trace.activations[l] + p.biases[l] + draw.weigh[l]
            assert np.allclose(trace.pre_activations[l], z, rtol=1e-12)
            if l < arch.n_layers - 1:
                assert np.allclose(trace.activations[l + 1], np.tanh(z) + draw.act[l + 1], rtol=1e-12)
            else:
                assert np.array_equal(trace.activations[l + 1], trace.pre_activations[l])

    def test_zero_noise_equals_deterministic_exactly(self):
        p = small_params([4, 3, 2], seed=11)
        x = RngStream(12, 3).generator(0).standard_normal(4)
        trace = forward_noisy(p, x, zero_noise(p.arch))
        det = forward_deterministic(p, x)
        assert np.array_equal(trace.activations[-1], det)

    def test_linear_net_reproduces_vx(self):
        V = np.array([[0.3, -0.2]])
        arch = Architecture((2, 1), "tanh")
        p = Params(arch, [V.copy()], [np.zeros(1)])
        x = np.array([1.5, -2.0])
        assert np.allclose(forward_deterministic(p, x), V @ x)

    def test_shape_mismatch(self):
        p = small_params([3, 2])
        with pytest.raises(ValueError):
            forward_deterministic(p, np.zeros(4))

    def test_multiplicative_rejected_in_forward_noisy(self):
        arch = Architecture((2, 2), "tanh")
        p = small_params([2, 2])
        draw = sample_noise(arch, NoiseModel("gaussian_multiplicative", 0.1), RngStream(0, 3))
        with pytest.raises(ValueError):
            forward_noisy(p, np.zeros(2), draw)

    def test_l1_output_variance_closed_form(self):
        # out = W(x + Na0) + b + Nw: var per component = s^2 (1 + ||W row||^2)
        arch = Architecture((3, 2), "tanh")
        W = np.array([[0.5, -1.0, 0.25], [2.0, 0.0, -0.5]])
        p = Params(arch, [W], [np.zeros(2)])
        s = 0.3
        model = NoiseModel("gaussian_additive", s)
        x = np.array([0.1, 0.2, -0.3])
        n = 10**5
        draws = sample_noise_batch(arch, model, RngStream(21, 3), 0, n)
        outs = (x + draws.act[0]) @ W.T + draws.weigh[0]
        expected = s**2 * (1.0 + (W**2).sum(axis=1))
        assert np.all(np.abs(outs.var(axis=0) / expected - 1.0) < 0.05)


class TestProject:
    def test_fixed_point_inside(self):
        p = small_params([2, 2], scale=0.4)
        h = Hyperrectangle(-1.0, 1.0, -1.0, 1.0)
        q = project(p, h)
        for a, b in zip(p.weights, q.weights):
            assert np.array_equal(a, b)

    def test_clamps_weight(self):
        arch = Architecture((1, 1), "tanh")
        p = Params(arch, [np.array([[5.0]])], [np.array([0.0])])
        q = project(p, Hyperrectangle(-1.0, 1.0, -1.0, 1.0))
        assert q.weights[0][0, 0] == 1.0

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            Hyperrectangle(1.0, -1.0, 0.0, 1.0)


class TestApplyStep:
    def test_linear_combination(self):
        p = small_params([2, 2])
        dw = [np.ones_like(w) for w in p.weights]
        db = [np.ones_like(b) for b in p.biases]
        q = apply_step(p, -0.5, dw, db)
        assert np.allclose(q.weights[0], p.weights[0] - 0.5)
        assert np.allclose(q.biases[0], p.biases[0] - 0.5)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        p = small_params([3, 5, 2], seed=3)
        path = tmp_path / "params.npz"
        save_params(p, path)
        q = load_params(path)
        assert q.arch.layer_dims == p.arch.layer_dims
        for a, b in zip(p.weights, q.weights):
            assert np.array_equal(a, b)
        for a, b in zip(p.biases, q.biases):
            assert np.array_equal(a, b)

    def test_save_is_deterministic(self, tmp_path):
        p = small_params([2, 2])
        save_params(p, tmp_path / "a.npz")
        save_params(p, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


class TestRngStream:
    def test_distinct_streams_differ(self):
        a = RngStream(0, 1).generator(0).standard_normal(8)
        b = RngStream(0, 2).generator(0).standard_normal(8)
        assert not np.allclose(a, b)

    def test_index_advances_counter(self):
        a = RngStream(0, 1).generator(0).standard_normal(4)
        b = RngStream(0, 1).generator(1).standard_normal(4)
        assert not np.allclose(a, b)

    def test_child_streams_are_stable(self):
        assert RngStream(3, 1).child(2) == RngStream(3, 1).child(2)
        assert RngStream(3, 1).child(2) != RngStream(3, 1).child(3)
