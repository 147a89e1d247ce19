"""Forward-only noisy device simulator.

The device is the in-silico model driven by its own (true) noise family and
level, wrapped so that callers get output vectors and a query count, nothing
else: no traces, no gradients, no noise values.
"""

from __future__ import annotations

import numpy as np

from .model import (
    Architecture,
    NoiseModel,
    Params,
    RngStream,
    STREAM_DEVICE,
    _forward,
    sample_noise,
    sample_noise_batch,
)


class Device:
    """Opaque noisy forward oracle with a monotone query counter.

    Noise for slot j is exactly the draw an in-silico sampler would produce at
    stream (seed, STREAM_DEVICE) index j. Passing the same slot to two calls of
    identical batch shape replays the same noise (common random numbers);
    slot-less calls consume fresh slots.
    """

    def __init__(self, arch: Architecture, params: Params, noise: NoiseModel, seed: int):
        if params.arch.layer_dims != arch.layer_dims:
            raise ValueError(f"params dims {params.arch.layer_dims} do not match device {arch.layer_dims}")
        self._arch = arch
        self._params = params.copy()
        self._noise = noise
        self._stream = RngStream(seed, STREAM_DEVICE)
        self._next_slot = 0
        self.query_count = 0

    @property
    def arch(self) -> Architecture:
        return self._arch

    @property
    def seed(self) -> int:
        return self._stream.seed

    def new_slot(self) -> int:
        slot = self._next_slot
        self._next_slot += 1
        return slot

    def forward(self, x, noise_slot: int | None = None) -> np.ndarray:
        """One noisy inference; returns only the output vector."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != self._arch.layer_dims[0]:
            raise ValueError(f"input shape {x.shape}, want ({self._arch.layer_dims[0]},)")
        slot = self.new_slot() if noise_slot is None else noise_slot
        draw = sample_noise(self._arch, self._noise, self._stream, index=slot)
        self.query_count += 1
        return _forward(self._params, x, draw).activations[-1].copy()

    def forward_batch(self, X, noise_slot: int | None = None) -> np.ndarray:
        """n noisy inferences with independent per-row noise; counts n queries."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self._arch.layer_dims[0]:
            raise ValueError(f"input shape {X.shape}, want (n, {self._arch.layer_dims[0]})")
        slot = self.new_slot() if noise_slot is None else noise_slot
        draw = sample_noise_batch(self._arch, self._noise, self._stream, slot, X.shape[0])
        self.query_count += X.shape[0]
        return _forward(self._params, X, draw).activations[-1].copy()


def device_forward(device: Device, x) -> np.ndarray:
    return device.forward(x)


def set_device_params(device: Device, params: Params) -> Device:
    """Map new parameters onto the device; the query counter is untouched."""
    if params.arch.layer_dims != device.arch.layer_dims:
        raise ValueError(
            f"params dims {params.arch.layer_dims} do not match device {device.arch.layer_dims}"
        )
    device._params = params.copy()
    return device
