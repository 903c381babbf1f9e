"""Grayscale heatmap export for keypoint and mask head outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .train import infer


def normalize(score_map):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    a = np.asarray(score_map, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def to_gray(score_map):
    """8-bit grayscale where darker means a higher score."""
    return np.round(255 * (1.0 - normalize(score_map))).astype(np.uint8)


def save_map(score_map, path):
    try:
        Image.fromarray(to_gray(score_map), mode="L").save(path)
    except OSError as exc:
        raise OSError(f"cannot write heatmap {path}: {exc}") from exc
    return Path(path)


def export_heatmaps(model, image, out_dir, detections=None, infer_config=None):
    """Write one keypoint-map / mask-logit PNG pair per detection; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    det = detections if detections is not None else infer(model, image, infer_config)
    paths = []
    for i in range(len(det)):
        kp = det.keypoint_sums[i] if det.keypoint_sums and det.keypoint_sums[i] is not None else None
        if kp is None:
            kp = np.zeros_like(det.mask_logits[i])
        paths.append(save_map(kp, out / f"det{i:02d}_keypoints.png"))
        paths.append(save_map(det.mask_logits[i], out / f"det{i:02d}_mask.png"))
    return paths
