"""Noisy feed-forward model: architecture, parameters, noise draws, forward passes.

The model computes, for L weight layers,

    A0 = x + Na0
    zl = W(l) A(l-1) + b(l) + Nw(l)          l = 1..L
    Al = act(zl) + Na(l)                     l = 1..L-1
    AL = zL

with every noise vector drawn i.i.d. per component at level s. Exactly 2L noise
vectors exist: activation noise a_0..a_{L-1} and weighing noise w_1..w_L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}

NOISE_FAMILIES = ("gaussian_additive", "uniform", "gaussian_multiplicative", "laplace")

# Stream ids keep independent random roles from colliding under one seed.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_TRAIN_NOISE = 3
STREAM_DATA = 4
STREAM_ESTIMATE = 5
STREAM_EVAL = 6
STREAM_DEVICE = 7
STREAM_THEORY = 8

_U64 = 2**64


def mix64(x: int) -> int:
    """splitmix64 finalizer; spreads structured integers over 64 bits."""
    x = (x + 0x9E3779B97F4A7C15) % _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) % _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) % _U64
    return (x ^ (x >> 31)) % _U64


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: (seed, stream_id, index) fixes every draw.

    Each index addresses a disjoint 2^128-draw block of a Philox stream, so
    results do not depend on scheduling or worker count.
    """

    seed: int
    stream_id: int = 0

    def generator(self, index: int = 0) -> np.random.Generator:
        key = np.array([self.seed % _U64, self.stream_id % _U64], dtype=np.uint64)
        counter = np.array([0, 0, index % _U64, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def child(self, salt: int) -> "RngStream":
        return RngStream(self.seed, mix64((self.stream_id % _U64) ^ mix64(salt)))


@dataclass(frozen=True)
class Architecture:
    """Layer dimensions [d0, ..., dL] and the hidden activation."""

    layer_dims: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least [d0, d1] (one weight layer)")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"layer dims must be >= 1, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class Params:
    """Tunable weights: weights[l] is W(l+1) with shape (d_{l+1}, d_l), biases[l] is b(l+1)."""

    arch: Architecture
    weights: list
    biases: list

    def __post_init__(self):
        dims = self.arch.layer_dims
        L = self.arch.n_layers
        if len(self.weights) != L or len(self.biases) != L:
            raise ValueError(f"expected {L} weight layers, got {len(self.weights)}/{len(self.biases)}")
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for l in range(L):
            want = (dims[l + 1], dims[l])
            if self.weights[l].shape != want:
                raise ValueError(f"W[{l + 1}] shape {self.weights[l].shape}, want {want}")
            if self.biases[l].shape != (dims[l + 1],):
                raise ValueError(f"b[{l + 1}] shape {self.biases[l].shape}, want {(dims[l + 1],)}")
        if not all(np.isfinite(W).all() for W in self.weights) or not all(
            np.isfinite(b).all() for b in self.biases
        ):
            raise ValueError("params contain non-finite entries")

    def copy(self) -> "Params":
        return Params(self.arch, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(W.size for W in self.weights) + sum(b.size for b in self.biases)

    def to_vector(self) -> np.ndarray:
        parts = [W.ravel() for W in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    @staticmethod
    def from_vector(arch: Architecture, vec) -> "Params":
        vec = np.asarray(vec, dtype=float)
        dims = arch.layer_dims
        ws, bs, k = [], [], 0
        for l in range(arch.n_layers):
            n = dims[l + 1] * dims[l]
            ws.append(vec[k:k + n].reshape(dims[l + 1], dims[l]))
            k += n
        for l in range(arch.n_layers):
            n = dims[l + 1]
            bs.append(vec[k:k + n])
            k += n
        if k != vec.size:
            raise ValueError(f"vector length {vec.size}, architecture needs {k}")
        return Params(arch, ws, bs)


@dataclass(frozen=True)
class Hyperrectangle:
    """Box constraint: weights clamped to [w_min, w_max], biases to [b_min, b_max]."""

    w_min: float
    w_max: float
    b_min: float
    b_max: float

    def __post_init__(self):
        if not (self.w_min < self.w_max):
            raise ValueError("w_min must be < w_max")
        if not (self.b_min < self.b_max):
            raise ValueError("b_min must be < b_max")


@dataclass(frozen=True)
class NoiseModel:
    """Noise family plus its level s (> 0)."""

    family: str
    level: float

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if not (self.level > 0.0 and np.isfinite(self.level)):
            raise ValueError(f"noise level must be positive, got {self.level}")


@dataclass
class NoiseDraw:
    """One realization of the 2L noise vectors.

    act[l] perturbs A(l) for l = 0..L-1; weigh[l] perturbs the layer-(l+1)
    pre-activation. Arrays are (d,) or (n, d) for batched draws. Multiplicative
    draws hold standard-normal values g applied as v -> v * (1 + level * g) at
    the same sites; only the device simulator consumes those.
    """

    act: list
    weigh: list
    multiplicative: bool = False
    level: float = 0.0


@dataclass
class ForwardTrace:
    """Activations A(0..L), pre-activations z(1..L), and the noise used."""

    activations: list
    pre_activations: list
    noise: NoiseDraw


def _site_dims(arch: Architecture):
    """Noise sites in draw order: (a,0), (w,1), (a,1), ..., (w,L)."""
    dims = arch.layer_dims
    L = arch.n_layers
    order = [("a", 0, dims[0])]
    for l in range(1, L + 1):
        order.append(("w", l, dims[l]))
        if l < L:
            order.append(("a", l, dims[l]))
    return order


def _draw_site(gen: np.random.Generator, family: str, s: float, shape):
    if family == "gaussian_additive":
        return s * gen.standard_normal(shape)
    if family == "uniform":
        return gen.uniform(-s, s, shape)
    if family == "laplace":
        return gen.laplace(0.0, s, shape)
    if family == "gaussian_multiplicative":
        return gen.standard_normal(shape)
    raise ValueError(f"unknown noise family {family!r}")


def _sample(arch: Architecture, model: NoiseModel, gen: np.random.Generator, n) -> NoiseDraw:
    L = arch.n_layers
    act = [None] * L
    weigh = [None] * L
    for kind, l, d in _site_dims(arch):
        shape = (d,) if n is None else (n, d)
        v = _draw_site(gen, model.family, model.level, shape)
        if kind == "a":
            act[l] = v
        else:
            weigh[l - 1] = v
    mult = model.family == "gaussian_multiplicative"
    return NoiseDraw(act=act, weigh=weigh, multiplicative=mult, level=model.level if mult else 0.0)


def sample_noise(arch: Architecture, model: NoiseModel, rng: RngStream, index: int = 0) -> NoiseDraw:
    """Draw one NoiseDraw; identical (seed, stream, index) gives identical values."""
    return _sample(arch, model, rng.generator(index), None)


def sample_noise_batch(
    arch: Architecture, model: NoiseModel, rng: RngStream, index: int, n: int
) -> NoiseDraw:
    """Draw n independent realizations as (n, d) arrays per site, from one stream index."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    return _sample(arch, model, rng.generator(index), n)


def zero_noise(arch: Architecture) -> NoiseDraw:
    dims = arch.layer_dims
    L = arch.n_layers
    return NoiseDraw(
        act=[np.zeros(dims[l]) for l in range(L)],
        weigh=[np.zeros(dims[l]) for l in range(1, L + 1)],
    )


def _check_noise_dims(arch: Architecture, noise: NoiseDraw):
    dims = arch.layer_dims
    L = arch.n_layers
    if len(noise.act) != L or len(noise.weigh) != L:
        raise ValueError(f"noise draw has {len(noise.act)}+{len(noise.weigh)} vectors, want {L}+{L}")
    for l in range(L):
        if noise.act[l].shape[-1] != dims[l]:
            raise ValueError(f"activation noise {l}: last dim {noise.act[l].shape[-1]}, want {dims[l]}")
        if noise.weigh[l].shape[-1] != dims[l + 1]:
            raise ValueError(f"weighing noise {l + 1}: last dim {noise.weigh[l].shape[-1]}, want {dims[l + 1]}")


def _forward(params: Params, x, noise: NoiseDraw) -> ForwardTrace:
    """Shared noisy forward recursion; handles additive and multiplicative draws."""
    arch = params.arch
    act_fn = ACTIVATIONS[arch.activation][0]
    L = arch.n_layers
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != arch.layer_dims[0]:
        raise ValueError(f"input last dim {x.shape[-1]}, want {arch.layer_dims[0]}")
    _check_noise_dims(arch, noise)
    mult = noise.multiplicative
    s = noise.level

    a = x * (1.0 + s * noise.act[0]) if mult else x + noise.act[0]
    activations = [a]
    pre_activations = []
    for l in range(1, L + 1):
        z = activations[-1] @ params.weights[l - 1].T + params.biases[l - 1]
        z = z * (1.0 + s * noise.weigh[l - 1]) if mult else z + noise.weigh[l - 1]
        pre_activations.append(z)
        if l < L:
            a = act_fn(z)
            a = a * (1.0 + s * noise.act[l]) if mult else a + noise.act[l]
        else:
            a = z
        activations.append(a)
    return ForwardTrace(activations=activations, pre_activations=pre_activations, noise=noise)


def forward_noisy(params: Params, x, noise: NoiseDraw) -> ForwardTrace:
    """One noisy forward pass under an additive-family draw; returns the full trace.

    Multiplicative draws are rejected here; only the device simulator applies them.
    """
    if noise.multiplicative:
        raise ValueError("forward_noisy takes additive draws; the device applies multiplicative noise")
    return _forward(params, x, noise)


def forward_deterministic(params: Params, x) -> np.ndarray:
    """Noise-free output; equals forward_noisy with an all-zero draw."""
    return _forward(params, x, zero_noise(params.arch)).activations[-1]


def project(params: Params, h: Hyperrectangle) -> Params:
    """Euclidean projection onto the box: componentwise clamp (exact for a box)."""
    ws = [np.clip(W, h.w_min, h.w_max) for W in params.weights]
    bs = [np.clip(b, h.b_min, h.b_max) for b in params.biases]
    return Params(params.arch, ws, bs)


def apply_step(params: Params, coef: float, d_weights, d_biases) -> Params:
    """params + coef * (d_weights, d_biases), as a new Params."""
    ws = [W + coef * dW for W, dW in zip(params.weights, d_weights)]
    bs = [b + coef * db for b, db in zip(params.biases, d_biases)]
    return Params(params.arch, ws, bs)


PARAMS_FORMAT_VERSION = 1


def save_params(params: Params, path):
    """Binary params document (npz) with an explicit format-version field."""
    arrays = {
        "format_version": np.array(PARAMS_FORMAT_VERSION, dtype=np.int64),
        "layer_dims": np.array(params.arch.layer_dims, dtype=np.int64),
        "activation": np.array(params.arch.activation),
    }
    for l, (W, b) in enumerate(zip(params.weights, params.biases), start=1):
        arrays[f"W{l}"] = W
        arrays[f"b{l}"] = b
    np.savez(path, **arrays)


def load_params(path) -> Params:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(f"params format version {version}, supported {PARAMS_FORMAT_VERSION}")
        arch = Architecture(tuple(int(d) for d in data["layer_dims"]), str(data["activation"]))
        ws = [data[f"W{l}"] for l in range(1, arch.n_layers + 1)]
        bs = [data[f"b{l}"] for l in range(1, arch.n_layers + 1)]
    return Params(arch, ws, bs)
