"""Slice-wise detection evaluation: AP over IoU thresholds 10-50%,
precision/recall at confidence operating points, and the combined
AP_10:50 score.

Matching is greedy in descending score order: each detection claims the
unmatched ground truth of highest IoU if that IoU clears the threshold
(IoU ties broken by ground-truth index, score ties by input order).
AP uses all-points interpolation over the score-ranked detection list.
Slices without ground truth are excluded from every metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry
from .errors import UndefinedMetricError
from .geometry import Detection


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    conf_thresholds: tuple[float, ...] = (0.3, 0.4, 0.5)
    nms_iou: float = 0.1
    nms_conf: float = 0.5

    def __post_init__(self):
        for v in (*self.iou_thresholds, *self.conf_thresholds, self.nms_iou, self.nms_conf):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"threshold outside [0,1]: {v}")


@dataclass
class MatchLabels:
    """Greedy matching outcome for one image at one IoU threshold."""

    order: np.ndarray        # prediction indices in descending-score order
    tp: np.ndarray           # bool per ordered prediction
    fp: np.ndarray
    matched_gt: np.ndarray   # matched GT index per ordered prediction, -1 if FP
    fn: int


@dataclass
class OperatingPoint:
    ap: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    ap: dict[float, float]                                  # IoU -> AP (post-NMS, unfiltered)
    ap_10_50: float
    operating: dict[float, dict[float, OperatingPoint]]     # tau_c -> IoU -> point
    n_images: int = 0
    n_gt: int = 0

    def to_json_dict(self) -> dict:
        return {
            "ap": {f"{k:g}": v for k, v in self.ap.items()},
            "ap_10_50": self.ap_10_50,
            "operating": {
                f"{tc:g}": {
                    f"{iou:g}": {
                        "ap": op.ap, "precision": op.precision, "recall": op.recall,
                        "tp": op.tp, "fp": op.fp, "fn": op.fn,
                    }
                    for iou, op in by_iou.items()
                }
                for tc, by_iou in self.operating.items()
            },
            "n_images": self.n_images,
            "n_gt": self.n_gt,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        return cls(
            ap={float(k): v for k, v in d["ap"].items()},
            ap_10_50=d["ap_10_50"],
            operating={
                float(tc): {
                    float(iou): OperatingPoint(**op) for iou, op in by_iou.items()
                }
                for tc, by_iou in d["operating"].items()
            },
            n_images=d.get("n_images", 0),
            n_gt=d.get("n_gt", 0),
        )

    def to_text_table(self) -> str:
        ious = sorted(self.ap)
        lines = [
            "AP_10:50 = {:.4f}   ({} images, {} ground truths)".format(
                self.ap_10_50, self.n_images, self.n_gt),
            "per-IoU AP: " + "  ".join(f"AP{int(t * 100)}={self.ap[t]:.4f}" for t in ious),
            "",
        ]
        header = ["tau_c"]
        for t in ious:
            pct = int(t * 100)
            header += [f"AP{pct}", f"P{pct}", f"R{pct}"]
        lines.append(" ".join(f"{h:>8}" for h in header))
        for tc in sorted(self.operating):
            row = [f"{tc:.2f}"]
            for t in ious:
                op = self.operating[tc][t]
                row += [f"{op.ap:.4f}", f"{op.precision:.4f}", f"{op.recall:.4f}"]
            lines.append(" ".join(f"{c:>8}" for c in row))
        return "\n".join(lines) + "\n"


def _det_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    if len(dets) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    corners = np.array([geometry.to_corners(d.box) for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return corners, scores


def _gt_corners(gts: Sequence) -> np.ndarray:
    if len(gts) == 0:
        return np.zeros((0, 4))
    return np.array([geometry.to_corners(b) for b in gts], dtype=np.float64)


def match_detections(preds: Sequence[Detection], gts: Sequence,
                     iou_thresh: float) -> MatchLabels:
    """Greedy one-to-one matching of score-sorted predictions to GTs."""
    corners, scores = _det_arrays(preds)
    gt = _gt_corners(gts)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    matched_gt = np.full(len(order), -1, dtype=int)
    taken = np.zeros(len(gt), dtype=bool)
    if len(gt):
        ious = geometry.pairwise_iou(corners, gt)
        for rank, idx in enumerate(order):
            row = np.where(taken, -1.0, ious[idx])
            best = int(np.argmax(row)) if len(row) else -1
            if best >= 0 and row[best] >= iou_thresh:
                tp[rank] = True
                matched_gt[rank] = best
                taken[best] = True
    return MatchLabels(order=order, tp=tp, fp=~tp, matched_gt=matched_gt,
                       fn=int(len(gt) - taken.sum()))


def _nonempty(preds_per_image, gts_per_image):
    pairs = [(p, g) for p, g in zip(preds_per_image, gts_per_image) if len(g) > 0]
    if not pairs:
        raise UndefinedMetricError("no images with ground truth: AP undefined")
    return pairs


def average_precision(preds_per_image: Sequence[Sequence[Detection]],
                      gts_per_image: Sequence[Sequence], iou_thresh: float) -> float:
    """All-points interpolated AP over the score-ranked detection list."""
    pairs = _nonempty(preds_per_image, gts_per_image)
    n_gt = sum(len(g) for _, g in pairs)

    entries = []   # (score, image_idx, det_idx)
    for img_idx, (preds, _) in enumerate(pairs):
        for det_idx, det in enumerate(preds):
            entries.append((det.score, img_idx, det_idx))
    if not entries:
        return 0.0
    scores = np.array([e[0] for e in entries])
    order = np.argsort(-scores, kind="stable")

    taken = [np.zeros(len(g), dtype=bool) for _, g in pairs]
    gt_corner = [_gt_corners(g) for _, g in pairs]
    det_corner = [_det_arrays(p)[0] for p, _ in pairs]

    tp_flags = np.zeros(len(order), dtype=bool)
    for rank, e_idx in enumerate(order):
        _, img_idx, det_idx = entries[e_idx]
        gt = gt_corner[img_idx]
        if len(gt) == 0:
            continue
        ious = geometry.pairwise_iou(det_corner[img_idx][det_idx:det_idx + 1], gt)[0]
        ious = np.where(taken[img_idx], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            tp_flags[rank] = True
            taken[img_idx][best] = True

    cum_tp = np.cumsum(tp_flags)
    cum_fp = np.cumsum(~tp_flags)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)

    # All-points interpolation: running max of precision from the right.
    mpre = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, mpre):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate(preds_per_image: Sequence[Sequence[Detection]],
             gts_per_image: Sequence[Sequence],
             cfg: EvalConfig | None = None) -> EvalReport:
    """Full report over the (tau_c, IoU) grid; NMS must already be applied."""
    cfg = cfg or EvalConfig()
    pairs = _nonempty(preds_per_image, gts_per_image)
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]

    ap = {t: average_precision(preds, gts, t) for t in cfg.iou_thresholds}
    operating: dict[float, dict[float, OperatingPoint]] = {}
    for tc in cfg.conf_thresholds:
        filtered = [[d for d in p if d.score >= tc] for p in preds]
        by_iou: dict[float, OperatingPoint] = {}
        for t in cfg.iou_thresholds:
            tp = fp = fn = 0
            for p, g in zip(filtered, gts):
                labels = match_detections(p, g, t)
                tp += int(labels.tp.sum())
                fp += int(labels.fp.sum())
                fn += labels.fn
            by_iou[t] = OperatingPoint(
                ap=average_precision(filtered, gts, t),
                precision=tp / (tp + fp) if tp + fp else 0.0,
                recall=tp / (tp + fn) if tp + fn else 0.0,
                tp=tp, fp=fp, fn=fn,
            )
        operating[tc] = by_iou

    return EvalReport(
        ap=ap,
        ap_10_50=float(np.mean([ap[t] for t in cfg.iou_thresholds])),
        operating=operating,
        n_images=len(pairs),
        n_gt=sum(len(g) for g in gts),
    )
