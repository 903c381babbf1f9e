"""Small shared geometry helpers (boxes, polygon containment)."""

from __future__ import annotations

import numpy as np


def polygon_contains(poly, rows, cols):
    """Even-odd containment of points ``(rows, cols)`` in the closed polygon ``poly``.

    ``poly`` is an (n, 2) array of (row, col) vertices. ``rows``/``cols`` are
    broadcastable arrays. Points exactly on an edge may land on either side.
    """
    poly = np.asarray(poly, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    inside = np.zeros(np.broadcast(rows, cols).shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        y0, x0 = poly[i]
        y1, x1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > rows) != (y1 > rows)
        x_at = x0 + (rows - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (cols < x_at)
    return inside


def box_iou(a, b):
    """IoU matrix between (n, 4) and (m, 4) arrays of (top, left, height, width) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    top = np.maximum(a[:, None, 0], b[None, :, 0])
    left = np.maximum(a[:, None, 1], b[None, :, 1])
    bottom = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    right = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(bottom - top, 0, None) * np.clip(right - left, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def tight_box(mask):
    """(top, left, height, width) of the smallest pixel-aligned box around ``mask``."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def clip_box(box, height, width, min_size=1.0):
    top, left, h, w = (float(v) for v in box)
    bottom = min(top + h, float(height))
    right = min(left + w, float(width))
    top = max(top, 0.0)
    left = max(left, 0.0)
    h = max(bottom - top, min_size)
    w = max(right - left, min_size)
    top = min(top, height - h)
    left = min(left, width - w)
    return (top, left, h, w)


def encode_box_deltas(proposal, target):
    """Regression target (tx, ty, tw, th) that maps ``proposal`` onto ``target``."""
    pt, pl, ph, pw = proposal
    gt, gl, gh, gw = target
    tx = ((gl + gw / 2) - (pl + pw / 2)) / pw
    ty = ((gt + gh / 2) - (pt + ph / 2)) / ph
    return np.array([tx, ty, np.log(gw / pw), np.log(gh / ph)])


def decode_box_deltas(proposal, deltas, max_log=4.0):
    pt, pl, ph, pw = proposal
    tx, ty, tw, th = (float(d) for d in deltas)
    w = pw * np.exp(min(tw, max_log))
    h = ph * np.exp(min(th, max_log))
    cx = pl + pw / 2 + tx * pw
    cy = pt + ph / 2 + ty * ph
    return (cy - h / 2, cx - w / 2, h, w)
