"""Fine-tuning against the device: direction estimation, in-situ scoring, line search.

The search direction D is the hierarchical sample mean of
noise_weight_factor(N) * (R(l) A(l-1)^T, R(l)) over K1 data pairs times K2
level-s0 draws. Its mean is (-s0/2) times the s-derivative of the average-loss
gradient; the bidirectional line search absorbs that sign and scale, so no
constant is applied here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .device import Device, set_device_params
from .gradients import residual_stack
from .model import (
    NoiseDraw,
    NoiseModel,
    Params,
    RngStream,
    apply_step,
    forward_noisy,
    sample_noise_batch,
)

# Rows processed per accumulation block; fixed so results never depend on memory.
CHUNK_ROWS = 8192

STOP_RULES = ("either_worse", "both_worse")


@dataclass
class Direction:
    """Params-shaped search direction."""

    d_weights: list
    d_biases: list

    def __post_init__(self):
        if not all(np.isfinite(W).all() for W in self.d_weights) or not all(
            np.isfinite(b).all() for b in self.d_biases
        ):
            raise ValueError("direction contains non-finite entries")

    def norm(self) -> float:
        sq = sum(float((W**2).sum()) for W in self.d_weights)
        sq += sum(float((b**2).sum()) for b in self.d_biases)
        return np.sqrt(sq)

    def scaled(self, c: float) -> "Direction":
        return Direction([c * W for W in self.d_weights], [c * b for b in self.d_biases])


@dataclass
class GiftConfig:
    """Line-search settings: step scale eta, eval sample sizes K1/K2, stop rule.

    eta = 0 is allowed and degenerates to returning the initial weights: all
    candidates coincide, shared noise makes scores exactly equal, and the
    baseline wins the tie.
    """

    eta: float
    k1: int
    k2: int
    max_steps: int = 10
    stop_rule: str = "either_worse"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")


@dataclass
class EvalReport:
    """In-situ score: mean squared device error with hierarchical standard errors."""

    loss: float
    loss_se: float
    accuracy: float
    accuracy_se: float
    k1: int
    k2: int
    noise_slot: int


@dataclass
class GiftTrace:
    """Everything a line search visited. selected == (0, 0) means the baseline.

    Candidate i,sign has params w0 + sign*i*eta*D; w_f is the argmin over all
    recorded scores including the baseline, so improvement is never negative.
    """

    baseline: EvalReport
    records: list
    selected: tuple
    w_f: Params
    improvement: float
    steps_taken: int
    queries: int
    stop_reason: str
    eta: float
    direction_norm: float


def noise_weight_factor(noise: NoiseDraw, s0: float):
    """sum over the 2L noise vectors of (||N||^2 / s0^2 - d); zero-mean at level s0.

    Scalar for single draws, (n,) array for batched draws.
    """
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    if noise.multiplicative:
        raise ValueError("factor is defined for additive draws")
    total = 0.0
    for v in list(noise.act) + list(noise.weigh):
        total = total + (v**2).sum(axis=-1) / s0**2 - v.shape[-1]
    return total


def estimate_direction(params: Params, data, s0: float, k1: int, k2: int, rng: RngStream) -> Direction:
    """Hierarchical mean over K1 data pairs x K2 level-s0 draws of factor-weighted residual terms.

    Per draw the contribution is factor(N) * R(l) A(l-1)^T for weights and
    factor(N) * R(l) for biases. See the module docstring for the scale
    convention relative to the s-derivative of the gradient.
    """
    if len(data) < 1:
        raise ValueError("data sampler must be nonempty")
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    arch = params.arch
    L = arch.n_layers
    model = NoiseModel("gaussian_additive", s0)
    gen = rng.generator(0)
    data_idx = gen.integers(0, len(data), size=k1)

    dw_sum = [np.zeros_like(W) for W in params.weights]
    db_sum = [np.zeros_like(b) for b in params.biases]
    points_per_chunk = max(1, CHUNK_ROWS // k2)
    chunk_index = 0
    for start in range(0, k1, points_per_chunk):
        idx = data_idx[start:start + points_per_chunk]
        X = np.repeat(data.inputs[idx], k2, axis=0)
        Y = np.repeat(data.targets[idx], k2, axis=0)
        noise = sample_noise_batch(arch, model, rng, 1 + chunk_index, X.shape[0])
        chunk_index += 1
        trace = forward_noisy(params, X, noise)
        R = residual_stack(trace, Y, params)
        f = noise_weight_factor(noise, s0)
        for l in range(L):
            Rw = R[l] * f[:, None]
            dw_sum[l] += Rw.T @ trace.activations[l]
            db_sum[l] += Rw.sum(axis=0)
    n = k1 * k2
    return Direction([W / n for W in dw_sum], [b / n for b in db_sum])


def eval_in_situ(
    device: Device,
    params: Params,
    data,
    k1: int,
    k2: int,
    rng: RngStream,
    data_indices=None,
    noise_slot: int | None = None,
) -> EvalReport:
    """Mean over K1 data pairs of K2 device queries each of the squared output error.

    Also reports argmax-vs-argmax accuracy. Standard errors come from the K1
    per-data-point means. data_indices/noise_slot pin the subsample and the
    device noise so several calls can share random numbers.
    """
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    if len(data) < 1:
        raise ValueError("data sampler must be nonempty")
    set_device_params(device, params)
    if data_indices is None:
        data_indices = rng.generator(0).integers(0, len(data), size=k1)
    else:
        data_indices = np.asarray(data_indices)
        if data_indices.shape != (k1,):
            raise ValueError(f"data_indices shape {data_indices.shape}, want ({k1},)")
    slot = device.new_slot() if noise_slot is None else noise_slot

    X = np.repeat(data.inputs[data_indices], k2, axis=0)
    Y = np.repeat(data.targets[data_indices], k2, axis=0)
    out = device.forward_batch(X, noise_slot=slot)

    sq = ((Y - out) ** 2).sum(axis=1).reshape(k1, k2)
    per_point = sq.mean(axis=1)
    loss = float(per_point.mean())
    loss_se = float(per_point.std(ddof=1) / np.sqrt(k1)) if k1 > 1 else 0.0

    hits = (np.argmax(out, axis=1) == np.argmax(Y, axis=1)).reshape(k1, k2)
    per_point_acc = hits.mean(axis=1)
    accuracy = float(per_point_acc.mean())
    accuracy_se = float(per_point_acc.std(ddof=1) / np.sqrt(k1)) if k1 > 1 else 0.0

    return EvalReport(
        loss=loss,
        loss_se=loss_se,
        accuracy=accuracy,
        accuracy_se=accuracy_se,
        k1=k1,
        k2=k2,
        noise_slot=slot,
    )


def gift_run(
    device: Device,
    w0: Params,
    direction: Direction,
    config: GiftConfig,
    data,
    rng: RngStream,
) -> GiftTrace:
    """Symmetric line search from w0 along the direction, scored on the device.

    Candidates w0 +- i*eta*D share one data subsample and one device noise slot,
    so their scores differ only through the parameters. Stops per stop_rule
    (either_worse: one side at or above the baseline; both_worse: both sides)
    or at max_steps; returns the argmin over everything visited, baseline
    included.
    """
    dn = direction.norm()
    if not np.isfinite(dn) or dn == 0.0:
        raise ValueError("direction must be finite and nonzero")
    gen = rng.generator(0)
    data_indices = gen.integers(0, len(data), size=config.k1)
    slot = int(gen.integers(1 << 62))

    q_before = device.query_count
    ev = lambda p: eval_in_situ(
        device, p, data, config.k1, config.k2, rng, data_indices=data_indices, noise_slot=slot
    )
    baseline = ev(w0)
    records = []
    stop_reason = "max_steps"
    steps_taken = 0
    for i in range(1, config.max_steps + 1):
        coef = i * config.eta
        r_plus = ev(apply_step(w0, +coef, direction.d_weights, direction.d_biases))
        r_minus = ev(apply_step(w0, -coef, direction.d_weights, direction.d_biases))
        records.append((i, +1, r_plus))
        records.append((i, -1, r_minus))
        steps_taken = i
        if config.stop_rule == "either_worse":
            if max(r_plus.loss, r_minus.loss) >= baseline.loss:
                stop_reason = "either_worse"
                break
        else:
            if min(r_plus.loss, r_minus.loss) >= baseline.loss:
                stop_reason = "both_worse"
                break

    selected = (0, 0)
    best_loss = baseline.loss
    for i, sign, rep in records:
        if rep.loss < best_loss:
            best_loss = rep.loss
            selected = (i, sign)
    if selected == (0, 0):
        w_f = w0.copy()
    else:
        w_f = apply_step(w0, selected[0] * selected[1] * config.eta, direction.d_weights, direction.d_biases)

    return GiftTrace(
        baseline=baseline,
        records=records,
        selected=selected,
        w_f=w_f,
        improvement=baseline.loss - best_loss,
        steps_taken=steps_taken,
        queries=device.query_count - q_before,
        stop_reason=stop_reason,
        eta=config.eta,
        direction_norm=dn,
    )
