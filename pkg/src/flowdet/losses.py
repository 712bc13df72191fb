"""Set-prediction training objective.

Per image: pad ground truth to the proposal count, draw a path sample,
run the decoder, extrapolate the predicted data endpoint, Hungarian-match
predictions to the real ground truths, and assemble the weighted loss:

    total = lambda_cls * cls + lambda_l1 * l1 + lambda_giou * giou
            + lambda_flow * flow

L1 acts on flow-space coordinates (scale-balanced), GIoU on decoded
normalized boxes, the flow term on matched proposals' velocities, and
focal classification on all proposals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from . import flowpath, geometry
from .data import pad_gt_boxes
from .errors import InfeasibleMatchError, InvalidStateError, ShapeMismatchError
from .geometry import NormalizedBox
from .model import VelocityModel, flow_to_boxes
from .sampler import draw_prior

FOREGROUND_CLASS = 0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 2.0
    lambda_giou: float = 5.0
    lambda_flow: float = 0.1

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_l1", "lambda_giou", "lambda_flow"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    cls: torch.Tensor | float
    l1: torch.Tensor | float
    giou: torch.Tensor | float
    flow: torch.Tensor | float
    total: torch.Tensor | float

    def floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(getattr(self, f)) for f in
                               ("cls", "l1", "giou", "flow", "total")))


def combine(cls, l1, giou, flow, weights: LossWeights) -> LossBreakdown:
    total = (weights.lambda_cls * cls + weights.lambda_l1 * l1
             + weights.lambda_giou * giou + weights.lambda_flow * flow)
    return LossBreakdown(cls=cls, l1=l1, giou=giou, flow=flow, total=total)


@dataclass(frozen=True)
class MatchResult:
    """Injective ground-truth -> prediction assignment."""

    assignment: dict[int, int]
    unmatched_preds: tuple[int, ...]


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Exact minimum-cost assignment of G ground truths to P predictions."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeMismatchError(f"cost must be 2-D, got shape {cost.shape}")
    g, p = cost.shape
    if g > p:
        raise InfeasibleMatchError(f"{g} ground truths but only {p} predictions")
    if np.isnan(cost).any():
        raise InvalidStateError("cost matrix contains NaN")
    rows, cols = linear_sum_assignment(cost)
    assignment = {int(r): int(c) for r, c in zip(rows, cols)}
    matched = set(assignment.values())
    unmatched = tuple(i for i in range(p) if i not in matched)
    return MatchResult(assignment=assignment, unmatched_preds=unmatched)


def match_cost(pred_flow: np.ndarray, pred_logits: np.ndarray,
               gts: Sequence[NormalizedBox], weights: LossWeights) -> np.ndarray:
    """(G, P) matching cost mirroring the loss terms with the same weights."""
    pred_flow = np.asarray(pred_flow, dtype=np.float64)
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    gt_cxcywh = np.array([[b.cx, b.cy, b.w, b.h] for b in gts], dtype=np.float64)
    gt_flow = geometry.encode_flow_array(gt_cxcywh)

    shifted = pred_logits - pred_logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    cls_cost = 1.0 - probs[:, FOREGROUND_CLASS]                      # (P,)

    l1 = np.abs(gt_flow[:, None, :] - pred_flow[None, :, :]).sum(-1)  # (G, P)
    pred_corners = geometry.cxcywh_to_corners_array(geometry.decode_flow_array(pred_flow))
    gt_corners = geometry.cxcywh_to_corners_array(gt_cxcywh)
    giou_cost = 1.0 - geometry.pairwise_giou(gt_corners, pred_corners)

    return (weights.lambda_cls * cls_cost[None, :]
            + weights.lambda_l1 * l1
            + weights.lambda_giou * giou_cost)


def focal_loss(logits: torch.Tensor, target: torch.Tensor,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
               background_index: int | None = None) -> torch.Tensor:
    """Focal classification loss, averaged over proposals.

    Foreground targets weigh alpha, background targets (1 - alpha).
    """
    if background_index is None:
        background_index = logits.shape[-1] - 1
    logp = F.log_softmax(logits, dim=-1)
    logpt = logp.gather(-1, target[:, None]).squeeze(-1)
    pt = logpt.exp()
    alpha_t = torch.where(target == background_index,
                          torch.as_tensor(1.0 - alpha, dtype=logits.dtype),
                          torch.as_tensor(alpha, dtype=logits.dtype))
    return (-alpha_t * (1.0 - pt) ** gamma * logpt).mean()


def flow_matching_loss(v_pred, u):
    """Mean per-box squared L2 distance between predicted and target
    velocities; works on numpy arrays and torch tensors."""
    if tuple(v_pred.shape) != tuple(u.shape):
        raise ShapeMismatchError(
            f"velocity shapes differ: {tuple(v_pred.shape)} vs {tuple(u.shape)}")
    d = v_pred - u
    return (d * d).sum(-1).mean()


def elementwise_giou(a_xyxy: torch.Tensor, b_xyxy: torch.Tensor) -> torch.Tensor:
    """Row-paired differentiable GIoU for (N, 4) corner tensors."""
    area_a = (a_xyxy[:, 2] - a_xyxy[:, 0]) * (a_xyxy[:, 3] - a_xyxy[:, 1])
    area_b = (b_xyxy[:, 2] - b_xyxy[:, 0]) * (b_xyxy[:, 3] - b_xyxy[:, 1])
    lt = torch.maximum(a_xyxy[:, :2], b_xyxy[:, :2])
    rb = torch.minimum(a_xyxy[:, 2:], b_xyxy[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=1e-12)
    elt = torch.minimum(a_xyxy[:, :2], b_xyxy[:, :2])
    erb = torch.maximum(a_xyxy[:, 2:], b_xyxy[:, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclosure = (ewh[:, 0] * ewh[:, 1]).clamp(min=1e-12)
    return iou - (enclosure - union) / enclosure


def boxes_to_corners(boxes: torch.Tensor) -> torch.Tensor:
    half = boxes[..., 2:] / 2.0
    return torch.cat([boxes[..., :2] - half, boxes[..., :2] + half], dim=-1)


def set_prediction_losses(pred_x1_flow: torch.Tensor, logits: torch.Tensor,
                          gt_lists: Sequence[Sequence[NormalizedBox]],
                          weights: LossWeights):
    """Classification + regression terms shared by the flow and diffusion
    objectives.

    pred_x1_flow: (B, N, 4) predicted data endpoints in flow space.
    Returns (cls, l1, giou, matches) where matches[i] is the per-image
    list of (gt_index, pred_index) pairs.
    """
    b, n = pred_x1_flow.shape[:2]
    device, dtype = pred_x1_flow.device, pred_x1_flow.dtype
    background = logits.shape[-1] - 1
    targets = torch.full((b, n), background, dtype=torch.long, device=device)

    matches: list[list[tuple[int, int]]] = []
    matched_pred_rows: list[torch.Tensor] = []
    matched_gt_flow: list[np.ndarray] = []
    matched_gt_boxes: list[np.ndarray] = []
    for i, gts in enumerate(gt_lists):
        if len(gts) == 0:
            matches.append([])
            continue
        cost = match_cost(pred_x1_flow[i].detach().cpu().numpy(),
                          logits[i].detach().cpu().numpy(), gts, weights)
        result = hungarian_match(cost)
        pairs = sorted(result.assignment.items())
        matches.append(pairs)
        for g, p in pairs:
            targets[i, p] = FOREGROUND_CLASS
            matched_pred_rows.append(pred_x1_flow[i, p])
            box = gts[g]
            arr = np.array([box.cx, box.cy, box.w, box.h], dtype=np.float64)
            matched_gt_boxes.append(arr)
            matched_gt_flow.append(geometry.encode_flow_array(arr))

    cls = focal_loss(logits.reshape(b * n, -1), targets.reshape(-1))

    if matched_pred_rows:
        pred_m = torch.stack(matched_pred_rows)                       # (M, 4)
        gt_flow_m = torch.as_tensor(np.stack(matched_gt_flow), dtype=dtype, device=device)
        gt_box_m = torch.as_tensor(np.stack(matched_gt_boxes), dtype=dtype, device=device)
        l1 = (pred_m - gt_flow_m).abs().sum(-1).mean()
        giou_vals = elementwise_giou(boxes_to_corners(flow_to_boxes(pred_m)),
                                     boxes_to_corners(gt_box_m))
        giou = (1.0 - giou_vals).mean()
    else:
        l1 = torch.zeros((), dtype=dtype, device=device)
        giou = torch.zeros((), dtype=dtype, device=device)
    return cls, l1, giou, matches


def flow_loss_from_features(features: torch.Tensor,
                            gt_lists: Sequence[Sequence[NormalizedBox]],
                            model: VelocityModel, weights: LossWeights,
                            rng: np.random.Generator, n_prop: int = 12,
                            prior: str = "standard-normal") -> LossBreakdown:
    """The full objective given precomputed image features."""
    dtype = next(model.parameters()).dtype
    b = features.shape[0]

    x1_rows, x0_rows, xt_rows, u_rows, times = [], [], [], [], []
    for gts in gt_lists:
        x1_i, _ = pad_gt_boxes(gts, n_prop)
        x0_i = draw_prior(rng, n_prop, prior)
        t_i = float(rng.uniform())
        x1_rows.append(x1_i)
        x0_rows.append(x0_i)
        xt_rows.append(flowpath.interpolate(x0_i, x1_i, t_i))
        u_rows.append(flowpath.target_velocity(x0_i, x1_i))
        times.append(t_i)

    xt = torch.as_tensor(np.stack(xt_rows), dtype=dtype)
    u = torch.as_tensor(np.stack(u_rows), dtype=dtype)
    t = torch.as_tensor(times, dtype=dtype)

    v_pred, logits = model.decode(xt, features, t)
    x1_hat = xt + (1.0 - t)[:, None, None] * v_pred   # extrapolate_to_data per image

    cls, l1, giou, matches = set_prediction_losses(x1_hat, logits, gt_lists, weights)

    matched_v, matched_u = [], []
    for i, pairs in enumerate(matches):
        for _, p in pairs:
            matched_v.append(v_pred[i, p])
            matched_u.append(u[i, p])
    if matched_v:
        flow = flow_matching_loss(torch.stack(matched_v), torch.stack(matched_u))
    else:
        flow = torch.zeros((), dtype=dtype)
    return combine(cls, l1, giou, flow, weights)


def training_loss_batch(images: np.ndarray,
                        gt_lists: Sequence[Sequence[NormalizedBox]],
                        model: VelocityModel, weights: LossWeights,
                        rng: np.random.Generator, n_prop: int = 12,
                        prior: str = "standard-normal") -> LossBreakdown:
    """Objective for a batch of (H, W) images."""
    dtype = next(model.parameters()).dtype
    imgs = torch.as_tensor(np.asarray(images), dtype=dtype)[:, None]
    features = model.encode_image(imgs)
    return flow_loss_from_features(features, gt_lists, model, weights, rng,
                                   n_prop=n_prop, prior=prior)


def training_loss(image: np.ndarray, gt_boxes: Sequence[NormalizedBox],
                  model: VelocityModel, weights: LossWeights,
                  rng: np.random.Generator, n_prop: int = 12,
                  prior: str = "standard-normal") -> LossBreakdown:
    """Single-image objective (batch of one)."""
    return training_loss_batch(np.asarray(image)[None], [gt_boxes], model,
                               weights, rng, n_prop=n_prop, prior=prior)
