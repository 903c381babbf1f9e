"""Mask AP (COCO-style), keypoint PCK and contour-only evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .contour import points_to_mask
from .errors import CountError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Prediction:
    class_id: int
    score: float
    mask: np.ndarray


@dataclass
class GroundTruth:
    class_id: int
    mask: np.ndarray


@dataclass
class EvalReport:
    mask_ap: float = 0.0
    ap50: float = 0.0
    keypoint_pck: float = 0.0
    contour_only_ap: float = 0.0
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def mask_iou_matrix(pred_masks, gt_masks):
    if not pred_masks or not gt_masks:
        return np.zeros((len(pred_masks), len(gt_masks)))
    P = np.stack([m.ravel() for m in pred_masks]).astype(np.float64)
    G = np.stack([m.ravel() for m in gt_masks]).astype(np.float64)
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _average_precision(tp, n_gt):
    """101-point interpolated AP from a score-ordered true-positive flag vector."""
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    # precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _evaluate_class(preds, gts, thresholds):
    """``preds``: list of (image, score, mask); ``gts``: {image: [mask, ...]}."""
    n_gt = sum(len(v) for v in gts.values())
    order = np.argsort([-p[1] for p in preds], kind="stable")
    preds = [preds[i] for i in order]
    ious = {}
    for img in {p[0] for p in preds}:
        rows = [p[2] for p in preds if p[0] == img]
        ious[img] = mask_iou_matrix(rows, gts.get(img, []))
    out = []
    for t in thresholds:
        used = {img: np.zeros(len(g), dtype=bool) for img, g in gts.items()}
        row_of = {}
        tp = []
        for img, _score, _mask in preds:
            r = row_of.get(img, 0)
            row_of[img] = r + 1
            iou = ious[img][r] if ious[img].size else np.zeros(0)
            best, best_iou = -1, t
            for j, v in enumerate(iou):
                if not used[img][j] and v >= best_iou:
                    best, best_iou = j, v
            if best >= 0:
                used[img][best] = True
            tp.append(best >= 0)
        out.append(_average_precision(tp, n_gt))
    return out


def mask_ap(predictions, ground_truths, thresholds=IOU_THRESHOLDS):
    """COCO-style mask AP.

    ``predictions`` and ``ground_truths`` are per-image lists of
    :class:`Prediction` / :class:`GroundTruth`. Classes without ground truth
    are skipped. Returns ``{"mask_ap", "ap50", "per_class", "per_threshold"}``.
    """
    thresholds = tuple(float(t) for t in thresholds)
    classes = sorted({g.class_id for img in ground_truths for g in img})
    per_class, table = {}, []
    for c in classes:
        gts = {i: [g.mask for g in img if g.class_id == c] for i, img in enumerate(ground_truths)}
        gts = {i: v for i, v in gts.items() if v}
        preds = [
            (i, float(p.score), p.mask)
            for i, img in enumerate(predictions)
            for p in img
            if p.class_id == c
        ]
        aps = _evaluate_class(preds, gts, thresholds)
        table.append(aps)
        per_class[c] = float(np.mean(aps))
    if not table:
        return {"mask_ap": 0.0, "ap50": 0.0, "per_class": {}, "per_threshold": {}}
    table = np.asarray(table)
    per_threshold = {t: float(table[:, i].mean()) for i, t in enumerate(thresholds)}
    ap50 = per_threshold.get(0.5, 0.0)
    return {"mask_ap": float(table.mean()), "ap50": ap50, "per_class": per_class, "per_threshold": per_threshold}


def keypoint_pck(pred_points, gt_points, radius):
    """Fraction of predicted points within ``radius`` (scalar or per-point) of their match."""
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise CountError(f"{len(pred)} predicted points vs {len(gt)} ground-truth points")
    if len(pred) == 0:
        return 0.0
    dist = np.hypot(*(pred - gt).T)
    return float(np.mean(dist <= np.broadcast_to(radius, dist.shape)))


def contour_only_eval(pred_points, ground_truths, thresholds=IOU_THRESHOLDS):
    """AP of masks rebuilt purely from predicted contour points.

    ``pred_points`` is a per-image list of ``(class_id, score, points)``;
    the image size is taken from the ground-truth masks.
    """
    predictions = []
    for img_preds, img_gts in zip(pred_points, ground_truths):
        shape = _image_shape(img_gts, ground_truths)
        predictions.append(
            [Prediction(c, s, points_to_mask(pts, *shape)) for c, s, pts in img_preds]
        )
    return mask_ap(predictions, ground_truths, thresholds)


def _image_shape(img_gts, all_gts):
    for g in img_gts:
        return g.mask.shape
    for img in all_gts:
        for g in img:
            return g.mask.shape
    raise ValueError("cannot infer image size without ground-truth masks")
