"""The trainable velocity field: image encoder + cascaded box decoder.

The decoder takes flow-space box states, pooled image features, and a
continuous time embedding, and emits per-box velocities (flow-space
units per unit time) plus class logits with the background class last.
Stages share weights; each stage refines an internal box estimate used
for feature pooling, and only the final heads feed the ODE.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeMismatchError
from .geometry import W_MIN


@dataclass(frozen=True)
class ModelConfig:
    feat_channels: int = 64
    hidden_dim: int = 128
    pool_size: int = 7
    stages: int = 6
    num_classes: int = 2          # foreground classes first, background last
    time_dim: int = 64
    context_grid: int = 4
    stride: int = 8
    max_params: int = 5_000_000

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


class TimeEmbedding(nn.Module):
    """Sinusoidal encoding of t in [0, 1] followed by a small projection.

    Frequencies span ~5 decades below TIME_FREQ_MAX so the slowest
    channel is monotone over [0, 1] (injectivity) while the embedding
    stays Lipschitz-smooth.
    """

    TIME_FREQ_MAX = 30.0

    def __init__(self, time_dim: int, out_dim: int):
        super().__init__()
        half = time_dim // 2
        freqs = self.TIME_FREQ_MAX * (1e-4 ** (torch.arange(half, dtype=torch.float64) / (half - 1)))
        self.register_buffer("freqs", freqs)
        self.proj = nn.Sequential(
            nn.Linear(2 * half, out_dim),
            nn.SiLU(),
            nn.Linear(out_dim, out_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < -1e-9) or torch.any(t > 1.0 + 1e-9):
            raise ValueError(f"time outside [0, 1]: {t}")
        t = t.clamp(0.0, 1.0)
        arg = t[:, None] * self.freqs[None, :].to(t.dtype)
        emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
        return self.proj(emb)


class ImageEncoder(nn.Module):
    """4-block convolutional encoder, total stride 8, trained from scratch."""

    def __init__(self, out_channels: int):
        super().__init__()
        chans = [16, 32, 64, out_channels]
        blocks = []
        c_in = 1
        for i, c_out in enumerate(chans):
            stride = 2 if i < 3 else 1
            blocks += [
                nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
                nn.GroupNorm(4, c_out),
                nn.SiLU(),
            ]
            c_in = c_out
        self.net = nn.Sequential(*blocks)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 1:
            raise ShapeMismatchError(f"expected (B, 1, H, W), got {tuple(images.shape)}")
        if images.shape[2] % 8 != 0 or images.shape[3] % 8 != 0:
            raise ShapeMismatchError(f"image dims must be divisible by 8: {tuple(images.shape)}")
        return self.net(images)


def flow_to_boxes(flow: torch.Tensor) -> torch.Tensor:
    """Differentiable flow-space -> normalized cxcywh, clamped into the
    valid box domain (same convention as geometry.decode_flow_array)."""
    cx = ((flow[..., 0] + 1.0) / 2.0).clamp(0.0, 1.0)
    cy = ((flow[..., 1] + 1.0) / 2.0).clamp(0.0, 1.0)
    w = flow[..., 2].clamp(math.log(W_MIN), 0.0).exp()
    h = flow[..., 3].clamp(math.log(W_MIN), 0.0).exp()
    return torch.stack([cx, cy, w, h], dim=-1)


def _box_grid(boxes: torch.Tensor, pool: int) -> torch.Tensor:
    """Sampling grid of pool x pool points inside each box.

    boxes: (B, N, 4) normalized cxcywh; returns (B, N*pool, pool, 2)
    grid_sample coordinates in [-1, 1].
    """
    b, n, _ = boxes.shape
    offs = (torch.arange(pool, dtype=boxes.dtype, device=boxes.device) + 0.5) / pool
    x1 = boxes[..., 0] - boxes[..., 2] / 2.0
    y1 = boxes[..., 1] - boxes[..., 3] / 2.0
    xs = x1[..., None] + offs[None, None, :] * boxes[..., 2:3]   # (B, N, P)
    ys = y1[..., None] + offs[None, None, :] * boxes[..., 3:4]
    gx = (2.0 * xs - 1.0)[:, :, None, :].expand(b, n, pool, pool)
    gy = (2.0 * ys - 1.0)[:, :, :, None].expand(b, n, pool, pool)
    return torch.stack([gx, gy], dim=-1).reshape(b, n * pool, pool, 2)


def pool_box_features(features: torch.Tensor, boxes: torch.Tensor, pool: int) -> torch.Tensor:
    """Bilinear fixed-grid pooling inside each box; fully differentiable
    w.r.t. both features and box coordinates.  Returns (B, N, C*P*P)."""
    b, c = features.shape[:2]
    n = boxes.shape[1]
    grid = _box_grid(boxes, pool)
    sampled = F.grid_sample(features, grid, mode="bilinear",
                            padding_mode="zeros", align_corners=False)
    return (sampled.reshape(b, c, n, pool, pool)
            .permute(0, 2, 1, 3, 4)
            .reshape(b, n, c * pool * pool))


class BoxDecoder(nn.Module):
    """Shared-weight cascade: pool -> fuse with time + global context ->
    refine the internal box estimate; final heads emit velocity and
    class logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, d, p, g = cfg.feat_channels, cfg.hidden_dim, cfg.pool_size, cfg.context_grid
        self.time_embed = TimeEmbedding(cfg.time_dim, d)
        self.in_proj = nn.Linear(c * p * p, d)
        self.ctx_proj = nn.Linear(c * g * g, d)
        self.box_proj = nn.Linear(4, d)
        self.ln_in = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.ln_ff = nn.LayerNorm(d)
        self.reg_head = nn.Linear(d, 4)
        self.vel_head = nn.Linear(d, 4)
        self.cls_head = nn.Linear(d, cfg.num_classes)
        # Zero-init refinement and velocity so the initial field is ~0 and
        # boxes stay near the prior early in training.
        nn.init.zeros_(self.reg_head.weight)
        nn.init.zeros_(self.reg_head.bias)
        nn.init.zeros_(self.vel_head.weight)
        nn.init.zeros_(self.vel_head.bias)
        # Bias foreground logits low so early classification is mostly
        # background (focal-loss convention).
        with torch.no_grad():
            self.cls_head.bias[:-1] = -2.0
            self.cls_head.bias[-1] = 2.0

    def forward(self, boxes_flow: torch.Tensor, features: torch.Tensor,
                t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if boxes_flow.dim() != 3 or boxes_flow.shape[-1] != 4:
            raise ShapeMismatchError(f"expected (B, N, 4) boxes, got {tuple(boxes_flow.shape)}")
        if not torch.isfinite(boxes_flow).all():
            raise NumericError("non-finite input box state", stage=-1)
        b = boxes_flow.shape[0]
        cfg = self.cfg

        temb = self.time_embed(t)                                    # (B, D)
        ctx_raw = F.adaptive_avg_pool2d(features, cfg.context_grid)  # (B, C, G, G)
        ctx = self.ctx_proj(ctx_raw.reshape(b, -1))                  # (B, D)
        base = (temb + ctx)[:, None, :]

        h = torch.zeros(b, boxes_flow.shape[1], cfg.hidden_dim,
                        dtype=boxes_flow.dtype, device=boxes_flow.device)
        z = boxes_flow
        for stage in range(cfg.stages):
            pooled = pool_box_features(features, flow_to_boxes(z), cfg.pool_size)
            u = self.in_proj(pooled) + self.box_proj(z) + base
            h = self.ln_in(h + u)
            h = self.ln_ff(h + self.ff(h))
            if not torch.isfinite(h).all():
                raise NumericError("non-finite decoder state", stage=stage)
            z = z + self.reg_head(h)
        return self.vel_head(h), self.cls_head(h)


class VelocityModel(nn.Module):
    """Encoder + decoder pair behind the sampler's evaluator interface."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = ImageEncoder(self.cfg.feat_channels)
        self.decoder = BoxDecoder(self.cfg)
        n_params = self.parameter_count()
        if n_params >= self.cfg.max_params:
            raise ValueError(
                f"model has {n_params} parameters, exceeding the "
                f"{self.cfg.max_params} budget")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def config_hash(self) -> str:
        return self.cfg.config_hash()

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, boxes_flow: torch.Tensor, features: torch.Tensor,
               t: torch.Tensor | float) -> tuple[torch.Tensor, torch.Tensor]:
        t_vec = self._as_time(t, boxes_flow.shape[0], boxes_flow)
        return self.decoder(boxes_flow, features, t_vec)

    @staticmethod
    def _as_time(t, batch: int, like: torch.Tensor) -> torch.Tensor:
        if isinstance(t, (int, float)):
            return torch.full((batch,), float(t), dtype=like.dtype, device=like.device)
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
        if t.dim() == 0:
            t = t.expand(batch)
        return t

    # -- numpy-facing conveniences used by the sampler ---------------------

    def _param_dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @torch.no_grad()
    def encode_features(self, image: np.ndarray) -> torch.Tensor:
        """Encode one (H, W) intensity grid; runs once per image."""
        tensor = torch.as_tensor(np.asarray(image), dtype=self._param_dtype())
        if tensor.dim() != 2:
            raise ShapeMismatchError(f"expected (H, W) image, got {tuple(tensor.shape)}")
        return self.encoder(tensor[None, None])

    def as_field(self):
        """Evaluator closure for the sampler: numpy in, numpy out."""

        def field(x: np.ndarray, features: torch.Tensor, t: float):
            with torch.no_grad():
                xb = torch.as_tensor(x, dtype=self._param_dtype())[None]
                v, logits = self.decode(xb, features, float(t))
            return v[0].cpu().numpy(), logits[0].cpu().numpy()

        return field
