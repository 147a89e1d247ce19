"""Noise-aware training of feed-forward networks and gradient-informed
fine-tuning against a forward-only noisy device simulator."""

from .model import (
    Architecture,
    ForwardTrace,
    Hyperrectangle,
    NoiseDraw,
    NoiseModel,
    Params,
    RngStream,
    forward_deterministic,
    forward_noisy,
    load_params,
    project,
    sample_noise,
    sample_noise_batch,
    save_params,
    zero_noise,
)
from .gradients import GradSample, backward, batch_gradient
from .trainer import TrainConfig, TrainingDiverged, init_params, train
from .gift import (
    Direction,
    EvalReport,
    GiftConfig,
    GiftTrace,
    estimate_direction,
    eval_in_situ,
    gift_run,
    noise_weight_factor,
)
from .device import Device, device_forward, set_device_params
from .data import Dataset, load_idx, load_mnist, synthetic_linear, synthetic_teacher, to_dataset

__version__ = "0.1.0"
