"""Backpropagation of the squared loss through a stored noisy forward pass.

The backward recursion reuses the exact forward realization: derivatives of the
activation are taken at the stored pre-activations z(l), which already contain
the weighing noise of that pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ACTIVATIONS,
    ForwardTrace,
    NoiseModel,
    Params,
    RngStream,
    forward_noisy,
    sample_noise_batch,
)


@dataclass
class GradSample:
    """Loss gradients per layer plus the backprop vectors that produced them.

    residuals[l-1] holds R(l); R(L) = y - A(L). Gradients carry the explicit
    -2 of the squared loss: dW(l) = -2 R(l) A(l-1)^T, db(l) = -2 R(l).
    """

    d_weights: list
    d_biases: list
    residuals: list


def residual_stack(trace: ForwardTrace, target, params: Params) -> list:
    """Backprop vectors R(1)..R(L) for a trace; rows are samples when batched."""
    act_deriv = ACTIVATIONS[params.arch.activation][1]
    L = params.arch.n_layers
    y = np.asarray(target, dtype=float)
    out = trace.activations[-1]
    if y.shape != out.shape:
        raise ValueError(f"target shape {y.shape}, output shape {out.shape}")
    R = [None] * L
    R[L - 1] = y - out
    for l in range(L - 1, 0, -1):
        # R(l) = (W(l+1)^T R(l+1)) .* act'(z(l)); row form: R(l+1) @ W(l+1)
        R[l - 1] = (R[l] @ params.weights[l]) * act_deriv(trace.pre_activations[l - 1])
    return R


def backward(trace: ForwardTrace, target, params: Params) -> GradSample:
    """Gradient of (y - output)^2 holding the trace's noise fixed.

    A 1-D trace yields the per-sample gradient; a 2-D (batched) trace yields the
    mean gradient over rows.
    """
    if trace.noise.multiplicative:
        raise ValueError("backward requires a trace from an additive-noise forward pass")
    L = params.arch.n_layers
    R = residual_stack(trace, target, params)
    batched = trace.activations[-1].ndim == 2
    d_weights, d_biases = [], []
    for l in range(L):
        A_prev = trace.activations[l]
        if batched:
            n = A_prev.shape[0]
            d_weights.append((-2.0 / n) * (R[l].T @ A_prev))
            d_biases.append(-2.0 * R[l].mean(axis=0))
        else:
            d_weights.append(-2.0 * np.outer(R[l], A_prev))
            d_biases.append(-2.0 * R[l])
    return GradSample(d_weights=d_weights, d_biases=d_biases, residuals=R)


def _stack_batch(batch):
    """Accept a (X, Y) array pair or a sequence of (x, y) pairs."""
    if isinstance(batch, tuple) and len(batch) == 2 and not np.isscalar(batch[0]):
        X = np.asarray(batch[0], dtype=float)
        Y = np.asarray(batch[1], dtype=float)
        if X.ndim == 2 and Y.ndim == 2:
            return X, Y
    pairs = list(batch)
    if len(pairs) == 0:
        raise ValueError("batch must be nonempty")
    X = np.stack([np.asarray(x, dtype=float) for x, _ in pairs])
    Y = np.stack([np.asarray(y, dtype=float) for _, y in pairs])
    return X, Y


def batch_gradient(params: Params, batch, s0: float, rng: RngStream, index: int = 0) -> GradSample:
    """Mean gradient over a batch, each sample under an independent level-s0 Gaussian draw."""
    X, Y = _stack_batch(batch)
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    noise = sample_noise_batch(params.arch, NoiseModel("gaussian_additive", s0), rng, index, X.shape[0])
    trace = forward_noisy(params, X, noise)
    return backward(trace, Y, params)


def batch_loss(grad: GradSample) -> float:
    """Mean squared-error loss of the batch that produced grad."""
    R_L = grad.residuals[-1]
    if R_L.ndim == 1:
        return float(np.sum(R_L**2))
    return float(np.mean(np.sum(R_L**2, axis=1)))
