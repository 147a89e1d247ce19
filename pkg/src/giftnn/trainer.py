"""In-silico training: projected SGD under the presumed noise level s0."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import epoch_batches
from .gradients import batch_gradient, batch_loss
from .model import (
    Architecture,
    Hyperrectangle,
    Params,
    RngStream,
    STREAM_INIT,
    STREAM_SHUFFLE,
    STREAM_TRAIN_NOISE,
    apply_step,
    project,
)


class TrainingDiverged(RuntimeError):
    """Raised when the running loss leaves the finite/bounded regime."""


@dataclass
class TrainConfig:
    """SGD schedule eps_k = eps0 / (1 + k/tau)^p with p in (0.5, 1].

    That exponent range keeps sum(eps_k) divergent and sum(eps_k^2) finite.
    Projection is optional and off by default.
    """

    s0: float
    epochs: int = 10
    batch_size: int = 64
    eps0: float = 0.05
    decay_p: float = 0.75
    tau: float = 1000.0
    projection: Hyperrectangle | None = None
    seed: int = 0
    max_steps: int | None = None
    loss_guard: float = 1e6

    def __post_init__(self):
        if not self.s0 > 0:
            raise ValueError("s0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not 0.5 < self.decay_p <= 1.0:
            raise ValueError(f"decay exponent must be in (0.5, 1], got {self.decay_p}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")


def step_size(config: TrainConfig, k: int) -> float:
    return config.eps0 / (1.0 + k / config.tau) ** config.decay_p


@dataclass
class LossHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def smoothed(self, alpha: float = 0.05) -> np.ndarray:
        """Exponentially smoothed running loss."""
        out = np.empty(len(self.losses))
        acc = self.losses[0] if self.losses else 0.0
        for i, v in enumerate(self.losses):
            acc = (1 - alpha) * acc + alpha * v
            out[i] = acc
        return out


def init_params(arch: Architecture, scheme: str = "uniform_scaled", rng: RngStream | None = None) -> Params:
    """Weights ~ Uniform(-a, a) with a = 1/sqrt(d_in); biases exactly zero.

    Both accepted scheme names produce this one initialization.
    """
    if scheme not in ("uniform_scaled", "zeros_bias"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = rng or RngStream(0, STREAM_INIT)
    gen = rng.generator(0)
    dims = arch.layer_dims
    ws, bs = [], []
    for l in range(arch.n_layers):
        a = 1.0 / np.sqrt(dims[l])
        ws.append(gen.uniform(-a, a, (dims[l + 1], dims[l])))
        bs.append(np.zeros(dims[l + 1]))
    return Params(arch, ws, bs)


def train(arch: Architecture, config: TrainConfig, data, init: Params | None = None):
    """Projected SGD on the mean squared error under fresh level-s0 noise per sample.

    Returns (params, LossHistory). Aborts with TrainingDiverged when the batch
    loss becomes non-finite or exceeds config.loss_guard.
    """
    if len(data) < 1:
        raise ValueError("dataset must be nonempty")
    X, Y = data.inputs, data.targets
    params = init.copy() if init is not None else init_params(arch, rng=RngStream(config.seed, STREAM_INIT))

    shuffle_rng = RngStream(config.seed, STREAM_SHUFFLE)
    noise_rng = RngStream(config.seed, STREAM_TRAIN_NOISE)
    history = LossHistory()
    k = 0
    for epoch in range(config.epochs):
        for idx in epoch_batches(len(data), config.batch_size, shuffle_rng, epoch):
            grad = batch_gradient(params, (X[idx], Y[idx]), config.s0, noise_rng, index=k)
            loss = batch_loss(grad)
            if not np.isfinite(loss) or loss > config.loss_guard:
                raise TrainingDiverged(
                    f"loss {loss:.6g} at step {k} (epoch {epoch}); guard {config.loss_guard:g}"
                )
            params = apply_step(params, -step_size(config, k), grad.d_weights, grad.d_biases)
            if config.projection is not None:
                params = project(params, config.projection)
            history.steps.append(k)
            history.epochs.append(epoch)
            history.eps.append(step_size(config, k))
            history.losses.append(loss)
            k += 1
            if config.max_steps is not None and k >= config.max_steps:
                return params, history
    return params, history
