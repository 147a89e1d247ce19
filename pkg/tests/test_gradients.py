import numpy as np
import pytest

from giftnn.gradients import backward, batch_gradient, batch_loss
from giftnn.model import (
    Architecture,
    NoiseModel,
    Params,
    RngStream,
    forward_noisy,
    sample_noise,
    zero_noise,
)

from test_model import small_params


def test_zero_residual_gives_zero_gradients():
    p = small_params([2, 3, 2], seed=1)
    draw = sample_noise(p.arch, NoiseModel("gaussian_additive", 0.3), RngStream(2, 3))
    trace = forward_noisy(p, np.array([0.4, -0.1]), draw)
    g = backward(trace, trace.activations[-1].copy(), p)
    for dw in g.d_weights:
        assert np.all(dw == 0.0)
    for db in g.d_biases:
        assert np.all(db == 0.0)


def test_l1_linear_hand_expansion():
    # dW = -2 (y - Wx - b) x^T, db = -2 (y - Wx - b) at zero noise
    arch = Architecture((2, 1), "tanh")
    W = np.array([[0.7, -0.2]])
    b = np.array([0.3])
    p = Params(arch, [W.copy()], [b.copy()])
    x = np.array([1.5, -0.5])
    y = np.array([2.0])
    trace = forward_noisy(p, x, zero_noise(arch))
    g = backward(trace, y, p)
    r = y - (W @ x + b)
    assert np.allclose(g.d_weights[0], -2.0 * np.outer(r, x), rtol=1e-12)
    assert np.allclose(g.d_biases[0], -2.0 * r, rtol=1e-12)


def test_residual_recursion_shapes_and_values():
    p = small_params([3, 4, 2], seed=4)
    draw = sample_noise(p.arch, NoiseModel("gaussian_additive", 0.2), RngStream(5, 3))
    x = np.array([0.2, -0.6, 1.0])
    y = np.array([0.5, -0.5])
    trace = forward_noisy(p, x, draw)
    g = backward(trace, y, p)
    r2 = y - trace.activations[-1]
    sig = 1.0 - np.tanh(trace.pre_activations[0]) ** 2
    r1 = (p.weights[1].T @ r2) * sig
    assert np.allclose(g.residuals[1], r2, rtol=1e-12)
    assert np.allclose(g.residuals[0], r1, rtol=1e-12)
    assert np.allclose(g.d_weights[0], -2.0 * np.outer(r1, trace.activations[0]), rtol=1e-12)


def test_fd_agreement_fixed_noise():
    # every component of a [3,4,2] tanh net matches central differences < 1e-5 rel
    p = small_params([3, 4, 2], seed=6)
    arch = p.arch
    draw = sample_noise(arch, NoiseModel("gaussian_additive", 0.3), RngStream(7, 3))
    x = RngStream(8, 3).generator(0).standard_normal(3) * 0.8
    y = np.array([0.3, -0.7])
    trace = forward_noisy(p, x, draw)
    g = backward(trace, y, p)

    def loss_at(vec):
        q = Params.from_vector(arch, vec)
        t = forward_noisy(q, x, draw)
        return float(((y - t.activations[-1]) ** 2).sum())

    v0 = p.to_vector()
    analytic = np.concatenate([w.ravel() for w in g.d_weights] + [b.ravel() for b in g.d_biases])
    h = 1e-6
    for i in range(v0.size):
        e = np.zeros_like(v0)
        e[i] = h
        fd = (loss_at(v0 + e) - loss_at(v0 - e)) / (2 * h)
        denom = max(abs(analytic[i]), abs(fd), 1e-8)
        assert abs(fd - analytic[i]) / denom < 1e-5


def test_ones_activation_ties_dw_rows_to_db():
    # when A^(l-1) is all ones, each dW row is constant and equals the db entry
    arch = Architecture((3, 2), "tanh")
    p = Params(arch, [np.zeros((2, 3))], [np.zeros(2)])
    x = np.ones(3)
    y = np.array([1.0, -2.0])
    trace = forward_noisy(p, x, zero_noise(arch))
    g = backward(trace, y, p)
    for j in range(2):
        assert np.allclose(g.d_weights[0][j], g.d_biases[0][j])


def test_target_shape_mismatch():
    p = small_params([2, 2])
    trace = forward_noisy(p, np.zeros(2), zero_noise(p.arch))
    with pytest.raises(ValueError):
        backward(trace, np.zeros(3), p)


def test_batch_of_one_equals_single():
    p = small_params([2, 3, 1], seed=9)
    x = np.array([[0.1, 0.9]])
    y = np.array([[0.4]])
    rng = RngStream(10, 3)
    g_batch = batch_gradient(p, (x, y), 0.25, rng, index=3)
    model = NoiseModel("gaussian_additive", 0.25)
    from giftnn.model import sample_noise_batch

    draws = sample_noise_batch(p.arch, model, rng, 3, 1)
    single = sample_noise(p.arch, model, rng, 3)  # same index, first row
    trace = forward_noisy(p, x[0], type(draws)(
        act=[v[0] for v in draws.act], weigh=[v[0] for v in draws.weigh],
        multiplicative=False, level=0.25))
    g_one = backward(trace, y[0], p)
    for a, b in zip(g_batch.d_weights, g_one.d_weights):
        assert np.allclose(a, b, rtol=1e-12)
    del single


def test_batch_mean_is_average_of_members():
    p = small_params([2, 2], seed=12)
    gen = RngStream(13, 3).generator(0)
    X = gen.standard_normal((6, 2))
    Y = gen.standard_normal((6, 2))
    g = batch_gradient(p, (X, Y), 0.2, RngStream(14, 3), index=0)

    from giftnn.model import sample_noise_batch

    draws = sample_noise_batch(p.arch, NoiseModel("gaussian_additive", 0.2), RngStream(14, 3), 0, 6)
    acc_w = np.zeros_like(p.weights[0])
    for i in range(6):
        d = type(draws)(act=[v[i] for v in draws.act], weigh=[v[i] for v in draws.weigh],
                        multiplicative=False, level=0.2)
        trace = forward_noisy(p, X[i], d)
        acc_w += backward(trace, Y[i], p).d_weights[0]
    assert np.allclose(g.d_weights[0], acc_w / 6, rtol=1e-10)


def test_empty_batch_rejected():
    p = small_params([2, 2])
    with pytest.raises(ValueError):
        batch_gradient(p, (np.zeros((0, 2)), np.zeros((0, 2))), 0.1, RngStream(0, 3))


def test_mean_gradient_matches_fd_of_mc_objective():
    # E[batch_gradient] ~ grad of J_s0 on a 3-parameter net, within 3 SE
    arch = Architecture((2, 1), "tanh")
    V = np.array([[0.3, -0.2]])
    p = Params(arch, [np.array([[0.2, -0.1]])], [np.array([0.05])])
    s0 = 0.4
    gen = RngStream(20, 3).generator(0)
    X = gen.standard_normal((512, 2))
    Y = X @ V.T

    n_reps = 400
    samples = np.empty((n_reps, 3))
    for r in range(n_reps):
        g = batch_gradient(p, (X, Y), s0, RngStream(21, 3), index=r)
        samples[r] = np.concatenate([g.d_weights[0].ravel(), g.d_biases[0]])
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_reps)

    # closed form for the empirical distribution: J = mean((Vx-Wx-b)^2) + s^2(||W||^2+1)
    W, b = p.weights[0], p.biases[0]
    resid = Y[:, 0] - X @ W[0] - b[0]
    gw = -2.0 * (resid[:, None] * X).mean(axis=0) + 2.0 * s0**2 * W[0]
    gb = np.array([-2.0 * resid.mean() + 0.0])
    target = np.concatenate([gw, gb])
    assert np.all(np.abs(mean - target) < 3.0 * se + 1e-9)


def test_batch_loss_matches_residuals():
    p = small_params([2, 2], seed=30)
    gen = RngStream(31, 3).generator(0)
    X = gen.standard_normal((5, 2))
    Y = gen.standard_normal((5, 2))
    g = batch_gradient(p, (X, Y), 0.3, RngStream(32, 3), index=1)
    loss = batch_loss(g)
    assert np.isfinite(loss) and loss > 0
    assert np.isclose(loss, np.mean(np.sum(g.residuals[-1] ** 2, axis=1)))
