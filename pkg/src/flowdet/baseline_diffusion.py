"""Simplified DiffusionDet-style baseline on the same decoder.

Training corrupts flow-space boxes with the closed-form forward process
and the decoder predicts the clean signal x1; sampling runs a
deterministic DDIM update over an S-point subschedule, with optional
box renewal (re-drawing low-confidence proposals between steps).  Only
exists to reproduce the flow-vs-diffusion step-efficiency comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch

from .data import pad_gt_boxes
from .errors import ShapeMismatchError
from .losses import LossBreakdown, LossWeights, combine, set_prediction_losses
from .model import VelocityModel
from .sampler import DetectionSet, ModelField, SamplerStats, detection_set_from_flow


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative-alpha schedule; index 0 is the least noisy step."""

    T: int
    alphas_cumprod: np.ndarray

    def __post_init__(self):
        a = self.alphas_cumprod
        if len(a) != self.T:
            raise ShapeMismatchError("schedule length != T")
        if not ((a > 0).all() and (a <= 1).all() and (np.diff(a) < 0).all()):
            raise ValueError("alphas_cumprod must be strictly decreasing in (0, 1]")


def cosine_schedule(total_steps: int = 1000, s: float = 0.008) -> NoiseSchedule:
    t = np.arange(total_steps + 1, dtype=np.float64)
    f = np.cos(((t / total_steps) + s) / (1.0 + s) * np.pi / 2.0) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    return NoiseSchedule(T=total_steps, alphas_cumprod=np.cumprod(1.0 - betas))


def q_sample(x1, step: int, noise, sched: NoiseSchedule):
    """Closed-form forward corruption sqrt(a)*x1 + sqrt(1-a)*noise."""
    if not (0 <= step < sched.T):
        raise ValueError(f"step {step} outside [0, {sched.T})")
    a = float(sched.alphas_cumprod[step])
    return np.sqrt(a) * x1 + np.sqrt(1.0 - a) * noise


@dataclass(frozen=True)
class DiffusionSamplerConfig:
    n_proposals: int = 120
    steps: int = 3
    noise_seed: int = 0
    total_steps: int = 1000
    signal_scale: float = 2.0
    box_renewal: bool = False
    renewal_threshold: float = 0.5

    kind = "ddim"


def _subschedule(total_steps: int, s: int) -> list[int]:
    idx = np.round(np.linspace(total_steps - 1, 0, s)).astype(int)
    steps = sorted(set(int(i) for i in idx), reverse=True)
    return steps


def ddim_sample(model: ModelField, features: Any, s: int,
                cfg: DiffusionSamplerConfig,
                stats: SamplerStats | None = None) -> DetectionSet:
    """Deterministic DDIM over an S-point subschedule of the cosine
    schedule, decoding the predicted signal back to boxes at the end."""
    sched = cosine_schedule(cfg.total_steps)
    rng = np.random.default_rng(cfg.noise_seed)
    z = rng.standard_normal((cfg.n_proposals, 4))

    steps = _subschedule(cfg.total_steps, s)
    logits: np.ndarray | None = None
    for i, k_now in enumerate(steps):
        k_next = steps[i + 1] if i + 1 < len(steps) else -1
        x1_hat, logits = model(z / cfg.signal_scale, features, k_now / cfg.total_steps)
        if stats is not None:
            stats.decoder_calls += 1
        x1_hat = np.asarray(x1_hat, dtype=np.float64)
        logits = np.asarray(logits, dtype=np.float64)
        y1 = cfg.signal_scale * x1_hat
        a_now = float(sched.alphas_cumprod[k_now])
        eps = (z - np.sqrt(a_now) * y1) / np.sqrt(1.0 - a_now)
        a_next = float(sched.alphas_cumprod[k_next]) if k_next >= 0 else 1.0
        z = np.sqrt(a_next) * y1 + np.sqrt(1.0 - a_next) * eps
        if cfg.box_renewal and k_next >= 0:
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            weak = probs[:, :-1].max(axis=1) < cfg.renewal_threshold
            if weak.any():
                z[weak] = rng.standard_normal((int(weak.sum()), 4))

    assert logits is not None
    return detection_set_from_flow(z / cfg.signal_scale, logits)


def diffusion_loss_from_features(features: torch.Tensor,
                                 gt_lists: Sequence[Sequence],
                                 model: VelocityModel, weights: LossWeights,
                                 rng: np.random.Generator, n_prop: int = 12,
                                 total_steps: int = 1000,
                                 signal_scale: float = 2.0,
                                 sched: NoiseSchedule | None = None) -> LossBreakdown:
    """Signal-prediction objective: same set-prediction loss on the
    predicted x1, no flow term."""
    sched = sched or cosine_schedule(total_steps)
    dtype = next(model.parameters()).dtype

    z_rows, times = [], []
    for gts in gt_lists:
        x1_i, _ = pad_gt_boxes(gts, n_prop)
        step = int(rng.integers(0, sched.T))
        noise = rng.standard_normal((n_prop, 4))
        z_rows.append(q_sample(signal_scale * x1_i, step, noise, sched))
        times.append(step / sched.T)

    z = torch.as_tensor(np.stack(z_rows), dtype=dtype)
    t = torch.as_tensor(times, dtype=dtype)
    x1_hat, logits = model.decode(z / signal_scale, features, t)

    cls, l1, giou, _ = set_prediction_losses(x1_hat, logits, gt_lists, weights)
    flow = torch.zeros((), dtype=dtype)
    return combine(cls, l1, giou, flow, weights)


def diffusion_training_loss_batch(images: np.ndarray, gt_lists, model,
                                  weights: LossWeights, rng: np.random.Generator,
                                  n_prop: int = 12, total_steps: int = 1000,
                                  signal_scale: float = 2.0,
                                  sched: NoiseSchedule | None = None) -> LossBreakdown:
    dtype = next(model.parameters()).dtype
    imgs = torch.as_tensor(np.asarray(images), dtype=dtype)[:, None]
    features = model.encode_image(imgs)
    return diffusion_loss_from_features(features, gt_lists, model, weights, rng,
                                        n_prop=n_prop, total_steps=total_steps,
                                        signal_scale=signal_scale, sched=sched)
