"""Jittered-GT training proposals, target assignment and the inference box grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .contour import PIXEL_CENTER, encode_points
from .errors import MissingLabels
from .geometry import box_iou, clip_box, encode_box_deltas

log = logging.getLogger(__name__)


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (n, 4) top, left, height, width
    labels: np.ndarray  # class id, or num_classes for background
    matched_gt: np.ndarray  # GT index, -1 for background
    jitter_seed: int = 0
    skipped_negatives: int = 0


@dataclass
class RoiTargets:
    boxes: np.ndarray
    classes: np.ndarray  # (n,), background = num_classes
    fg: np.ndarray  # indices of foreground RoIs
    box_deltas: np.ndarray  # (n_fg, 4)
    masks: np.ndarray  # (n_fg, N, N) float
    heatmaps: np.ndarray | None  # (n_fg, K, M, M) uint8
    clamped_points: int = 0
    stats: dict = field(default_factory=dict)


def _jitter(box, rng, amplitude):
    top, left, h, w = box
    cy, cx = top + h / 2, left + w / 2
    cy += rng.uniform(-amplitude, amplitude) * h
    cx += rng.uniform(-amplitude, amplitude) * w
    if amplitude > 0:
        sh, sw = rng.uniform(0.85, 1.18, size=2)
    else:
        sh = sw = 1.0
    return (cy - h * sh / 2, cx - w * sw / 2, h * sh, w * sw)


def sample_proposals(gt_boxes, image_size, per_gt=2, negatives=4, seed=0, jitter=0.15,
                     num_classes=None, gt_classes=None, negative_sizes=(16.0, 48.0)):
    """Jittered copies of each GT box (IoU >= 0.5) plus random background boxes (IoU < 0.5).

    ``jitter`` bounds the center shift as a fraction of box size; scale
    factors stay in [0.85, 1.18]. ``jitter=0`` reproduces the GT boxes.
    """
    if per_gt < 1:
        raise ValueError("per_gt must be >= 1")
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    rng = np.random.default_rng(seed)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    bg_label = num_classes if num_classes is not None else -1
    boxes, labels, matched = [], [], []
    for g, gt in enumerate(gts):
        for _ in range(per_gt):
            cand = tuple(gt)
            for _attempt in range(50):
                b = clip_box(_jitter(gt, rng, jitter), H, W)
                if box_iou(b, gt)[0, 0] >= 0.5:
                    cand = b
                    break
            boxes.append(cand)
            labels.append(int(gt_classes[g]) if gt_classes is not None else 0)
            matched.append(g)

    skipped = 0
    lo, hi = negative_sizes
    for n in range(negatives):
        for _attempt in range(200):
            size_h, size_w = rng.uniform(lo, hi, size=2)
            if len(gts) and n % 2 == 0:
                # near-miss around a random GT
                ref = gts[rng.integers(len(gts))]
                cy = ref[0] + ref[2] / 2 + rng.uniform(-1, 1) * ref[2]
                cx = ref[1] + ref[3] / 2 + rng.uniform(-1, 1) * ref[3]
            else:
                cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            b = clip_box((cy - size_h / 2, cx - size_w / 2, size_h, size_w), H, W)
            if not len(gts) or box_iou(b, gts).max() < 0.5:
                boxes.append(b)
                labels.append(bg_label)
                matched.append(-1)
                break
        else:
            skipped += 1
    if skipped:
        log.warning("skipped %d negatives after 200 attempts each", skipped)
    return ProposalSet(
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(labels, dtype=np.int64),
        np.asarray(matched, dtype=np.int64),
        jitter_seed=seed,
        skipped_negatives=skipped,
    )


def crop_mask_target(mask, box, size):
    """Nearest-neighbour sample of ``mask`` at the ``size`` x ``size`` bin centers of ``box``."""
    top, left, h, w = box
    H, W = mask.shape
    offs = (np.arange(size) + 0.5) / size
    rows = np.floor(top + offs * h).astype(int)
    cols = np.floor(left + offs * w).astype(int)
    valid_r = (rows >= 0) & (rows < H)
    valid_c = (cols >= 0) & (cols < W)
    out = mask[np.clip(rows, 0, H - 1)][:, np.clip(cols, 0, W - 1)].astype(np.float64)
    out[~valid_r] = 0
    out[:, ~valid_c] = 0
    return out


def clamp_points(points, box):
    """Move pixel-index points into ``box``; returns the points and how many moved."""
    top, left, h, w = box
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    clamped = pts.copy()
    clamped[:, 0] = np.clip(pts[:, 0], top - PIXEL_CENTER, top + h - PIXEL_CENTER)
    clamped[:, 1] = np.clip(pts[:, 1], left - PIXEL_CENTER, left + w - PIXEL_CENTER)
    moved = int(np.any(clamped != pts, axis=1).sum())
    return clamped, moved


def assign_targets(proposals, annotations, fusion, num_classes, need_keypoints=None):
    """Per-RoI training targets for one image.

    ``annotations`` are :class:`InstanceAnnotation` objects indexed like the
    proposals' ``matched_gt``. Keypoint targets are built when
    ``need_keypoints`` (default: ``fusion.alpha > 0``).
    """
    if need_keypoints is None:
        need_keypoints = fusion.alpha > 0
    labels = np.where(proposals.matched_gt >= 0, proposals.labels, num_classes)
    fg = np.flatnonzero(proposals.matched_gt >= 0)
    if need_keypoints:
        for idx in fg:
            if annotations[proposals.matched_gt[idx]].contour_points is None:
                raise MissingLabels(f"annotation {proposals.matched_gt[idx]} has no contour points")

    mask_size = fusion.mask_out_size
    base = 28
    deltas, masks, heatmaps = [], [], []
    clamped = 0
    for idx in fg:
        box = tuple(proposals.boxes[idx])
        ann = annotations[proposals.matched_gt[idx]]
        deltas.append(encode_box_deltas(box, ann.box))
        m = crop_mask_target(ann.mask, box, base)
        if mask_size != base:
            m = np.repeat(np.repeat(m, mask_size // base, axis=0), mask_size // base, axis=1)
        masks.append(m)
        if need_keypoints:
            cps = ann.contour_points
            pts = cps.all_points() if fusion.use_center else np.asarray(cps.points, dtype=np.float64)
            if len(pts) != fusion.channels:
                raise MissingLabels(f"labels carry {len(pts)} points, model expects {fusion.channels}")
            pts, moved = clamp_points(pts, box)
            clamped += moved
            heatmaps.append(encode_points(pts, box, fusion.keypoint_size))
    n = len(fg)
    N, M, K = mask_size, fusion.keypoint_size, fusion.channels
    return RoiTargets(
        boxes=proposals.boxes,
        classes=labels.astype(np.int64),
        fg=fg,
        box_deltas=np.asarray(deltas, dtype=np.float64).reshape(n, 4),
        masks=np.asarray(masks, dtype=np.float64).reshape(n, N, N),
        heatmaps=np.asarray(heatmaps, dtype=np.uint8).reshape(n, K, M, M) if need_keypoints else None,
        clamped_points=clamped,
    )


def grid_boxes(image_size, scales=(18.0, 28.0, 42.0), stride=6):
    """Square candidate boxes centered on a regular grid, clipped to the image."""
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    centers_r = np.arange(stride / 2, H, stride)
    centers_c = np.arange(stride / 2, W, stride)
    out = []
    for s in scales:
        for cy in centers_r:
            for cx in centers_c:
                out.append(clip_box((cy - s / 2, cx - s / 2, s, s), H, W))
    return np.asarray(out, dtype=np.float64)
