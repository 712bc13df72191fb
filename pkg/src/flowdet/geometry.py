"""Box representations, coordinate transforms, IoU/GIoU, and NMS.

Boxes live in three spaces:
  * normalized (cx, cy, w, h) fractions of the image, all in [0, 1];
  * corner tuples (x1, y1, x2, y2), also fractions;
  * flow space (a, b, lw, lh) = (2*cx - 1, 2*cy - 1, log w, log h),
    the unconstrained 4-vector in which interpolation and ODE
    integration happen.  Centers are mapped affinely to [-1, 1];
    only the scales go through log.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBoxError, InvalidStateError

logger = logging.getLogger(__name__)

# Minimum box scale (fraction of image) so log(w), log(h) stay finite.
W_MIN = 1e-3

Corners = tuple[float, float, float, float]


@dataclass(frozen=True)
class NormalizedBox:
    """Axis-aligned box as fractions of the image: center + size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise InvalidBoxError(f"non-finite box: {self}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise InvalidBoxError(f"center outside [0,1]: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise InvalidBoxError(f"size outside (0,1]: {self}")


@dataclass(frozen=True)
class FlowVector:
    """A single box in unconstrained flow space."""

    a: float
    b: float
    lw: float
    lh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.a, self.b, self.lw, self.lh)):
            raise InvalidStateError(f"non-finite flow vector: {self}")


@dataclass(frozen=True)
class Detection:
    """A decoded box with a confidence score and class index."""

    box: NormalizedBox
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidBoxError(f"score outside [0,1]: {self.score}")


def to_corners(box: NormalizedBox) -> Corners:
    """(cx, cy, w, h) -> (x1, y1, x2, y2)."""
    return (
        box.cx - box.w / 2.0,
        box.cy - box.h / 2.0,
        box.cx + box.w / 2.0,
        box.cy + box.h / 2.0,
    )


def _validate_corners(c: Corners) -> None:
    x1, y1, x2, y2 = c
    if x2 < x1 or y2 < y1:
        raise InvalidBoxError(f"malformed corners (x2 < x1 or y2 < y1): {c}")


def _area(c: Corners) -> float:
    return (c[2] - c[0]) * (c[3] - c[1])


def iou(a: Corners, b: Corners) -> float:
    """Intersection over union of two corner boxes; 0 for disjoint or
    zero-area pairs."""
    _validate_corners(a)
    _validate_corners(b)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, ix) * max(0.0, iy)
    union = _area(a) + _area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Corners, b: Corners) -> float:
    """Generalized IoU: IoU minus the normalized excess area of the
    smallest enclosing box.  Range (-1, 1]."""
    _validate_corners(a)
    _validate_corners(b)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, ix) * max(0.0, iy)
    union = _area(a) + _area(b) - inter
    ex = max(a[2], b[2]) - min(a[0], b[0])
    ey = max(a[3], b[3]) - min(a[1], b[1])
    enclosure = ex * ey
    iou_val = inter / union if union > 0.0 else 0.0
    if enclosure <= 0.0:
        return iou_val
    return iou_val - (enclosure - union) / enclosure


def encode_flow_space(box: NormalizedBox) -> FlowVector:
    """Map a normalized box to flow space.

    Widths/heights below W_MIN are clamped (logged, not fatal) so the
    log stays finite.
    """
    w, h = box.w, box.h
    if w < W_MIN or h < W_MIN:
        logger.warning("box scale below %g clamped: w=%g h=%g", W_MIN, w, h)
        w = max(w, W_MIN)
        h = max(h, W_MIN)
    return FlowVector(2.0 * box.cx - 1.0, 2.0 * box.cy - 1.0, math.log(w), math.log(h))


def decode_flow_space(v: FlowVector) -> NormalizedBox:
    """Inverse of encode_flow_space, clamping back into the valid box
    domain (centers to [0,1], scales to [W_MIN, 1])."""
    # FlowVector construction already rejects non-finite components.
    cx = min(max((v.a + 1.0) / 2.0, 0.0), 1.0)
    cy = min(max((v.b + 1.0) / 2.0, 0.0), 1.0)
    w = min(max(math.exp(v.lw), W_MIN), 1.0)
    h = min(max(math.exp(v.lh), W_MIN), 1.0)
    return NormalizedBox(cx, cy, w, h)


# ---------------------------------------------------------------------------
# Array versions used by the sampler, losses, and metrics.  Rows are
# (cx, cy, w, h) or flow vectors; shape (N, 4).
# ---------------------------------------------------------------------------

def encode_flow_array(boxes_cxcywh: np.ndarray) -> np.ndarray:
    """Vectorized encode_flow_space on an (N, 4) cxcywh array."""
    boxes = np.asarray(boxes_cxcywh, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = 2.0 * boxes[..., 0] - 1.0
    out[..., 1] = 2.0 * boxes[..., 1] - 1.0
    out[..., 2] = np.log(np.maximum(boxes[..., 2], W_MIN))
    out[..., 3] = np.log(np.maximum(boxes[..., 3], W_MIN))
    return out


def decode_flow_array(flow: np.ndarray) -> np.ndarray:
    """Vectorized decode_flow_space on an (N, 4) flow array."""
    flow = np.asarray(flow, dtype=np.float64)
    if not np.isfinite(flow).all():
        raise InvalidStateError("non-finite flow state")
    out = np.empty_like(flow)
    out[..., 0] = np.clip((flow[..., 0] + 1.0) / 2.0, 0.0, 1.0)
    out[..., 1] = np.clip((flow[..., 1] + 1.0) / 2.0, 0.0, 1.0)
    out[..., 2] = np.clip(np.exp(flow[..., 2]), W_MIN, 1.0)
    out[..., 3] = np.clip(np.exp(flow[..., 3]), W_MIN, 1.0)
    return out


def cxcywh_to_corners_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def pairwise_iou(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """IoU matrix between (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a_xyxy, dtype=np.float64)
    b = np.asarray(b_xyxy, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def pairwise_giou(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """GIoU matrix between (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a_xyxy, dtype=np.float64)
    b = np.asarray(b_xyxy, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou_mat = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = np.clip(erb - elt, 0.0, None)
    enclosure = ewh[..., 0] * ewh[..., 1]
    excess = np.where(enclosure > 0.0,
                      (enclosure - union) / np.where(enclosure > 0.0, enclosure, 1.0),
                      0.0)
    return iou_mat - excess


def nms(dets: list[Detection], iou_thresh: float, conf_thresh: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Detections below conf_thresh are dropped; the rest are processed in
    descending score order (ties broken by input index) and any box with
    IoU strictly above iou_thresh against an already-kept box is
    suppressed.
    """
    if not (0.0 <= iou_thresh <= 1.0 and 0.0 <= conf_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    candidates = [d for d in dets if d.score >= conf_thresh]
    # Stable sort keeps input order for equal scores.
    candidates.sort(key=lambda d: -d.score)
    kept: list[Detection] = []
    kept_corners: list[Corners] = []
    for det in candidates:
        c = to_corners(det.box)
        if all(iou(c, kc) <= iou_thresh for kc in kept_corners):
            kept.append(det)
            kept_corners.append(c)
    return kept
