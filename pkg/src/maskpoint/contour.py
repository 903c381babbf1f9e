"""Contour-point labels: tracing, sampling, heatmap encoding and polygon refill.

Coordinates are (row, col) pairs in pixel-index units. Heatmap grids are
stored channels-first, shape ``(channels, M, M)``.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegeneratePolygon, EmptyMask, OutOfBox
from .geometry import polygon_contains

log = logging.getLogger(__name__)

# Running tally of label-time anomalies (multi-component masks, ...).
warning_counts: Counter = Counter()

# Clockwise ring (rows grow downward), starting at west.
_RING = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


@dataclass
class ContourPointSet:
    points: np.ndarray  # (k, 2) float
    k: int
    sampling: str
    pad_count: int = 0
    seed: int = 0
    center: tuple[float, float] | None = None
    # arc-length position of each point along the contour (uniform sampling only)
    arc_positions: np.ndarray | None = field(default=None, repr=False)

    @property
    def channels(self):
        return self.k + (1 if self.center is not None else 0)

    def all_points(self):
        """Contour points followed by the center point when present."""
        if self.center is None:
            return np.asarray(self.points, dtype=np.float64)
        return np.vstack([self.points, np.asarray(self.center, dtype=np.float64)[None]])


@dataclass
class HeatmapLabel:
    grid: np.ndarray  # (channels, M, M) uint8 one-hot
    box: tuple[float, float, float, float]
    M: int = 56


def _as_mask(mask):
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not m.any():
        raise EmptyMask("mask has no foreground pixels")
    return m


def largest_component(mask):
    m = _as_mask(mask)
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=int))
    if n == 1:
        return m
    sizes = np.bincount(labels.ravel())[1:]
    warning_counts["multi_component"] += 1
    log.warning("mask has %d components; tracing the largest", n)
    # labels are numbered in raster order, so argmax breaks ties topmost-leftmost
    return labels == (int(np.argmax(sizes)) + 1)


def trace_contour(mask):
    """Clockwise Moore-neighbour boundary of the largest 8-connected component.

    Starts at the topmost, then leftmost, foreground pixel. Returns a list of
    (row, col) integer tuples without repeating the start at the end.
    """
    comp = largest_component(mask)
    H, W = comp.shape
    rows, cols = np.nonzero(comp)
    start = (int(rows[0]), int(cols[0]))

    def step(p, back):
        for i in range(1, 9):
            d = (back + i) % 8
            q = (p[0] + _RING[d][0], p[1] + _RING[d][1])
            if 0 <= q[0] < H and 0 <= q[1] < W and comp[q]:
                prev = _RING[(d - 1) % 8]
                rel = (p[0] + prev[0] - q[0], p[1] + prev[1] - q[1])
                return q, _RING_INDEX[rel]
        return None, back

    contour = [start]
    p, back = start, 0
    for _ in range(4 * H * W + 8):
        q, back = step(p, back)
        if q is None:
            return contour
        if p == start and len(contour) > 1 and q == contour[1]:
            contour.pop()
            return contour
        contour.append(q)
        p = q
    raise RuntimeError("contour tracing did not terminate")


def _pad(base, k, seed):
    """Fill ``base`` up to ``k`` entries with seeded duplicates placed beside their source."""
    n = len(base)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, n, size=k - n)
    repeats = 1 + np.bincount(picks, minlength=n)
    return np.repeat(base, repeats, axis=0), repeats


def _closed(contour):
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    return np.vstack([pts, pts[:1]])


def uniform_sample(contour, k, seed=0):
    """Sample ``k`` points at equal arc-length spacing along the closed contour."""
    if k < 1:
        raise ValueError("k must be >= 1")
    closed = _closed(contour)
    n = len(closed) - 1
    seg = np.diff(closed, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])

    if n < k:
        cum = np.concatenate([[0.0], np.cumsum(seglen)])[:n]
        points, repeats = _pad(closed[:n], k, seed)
        arcs = np.repeat(cum, repeats)
        return ContourPointSet(points, k, "uniform", pad_count=k - n, seed=seed, arc_positions=arcs)

    perimeter = float(seglen.sum())
    points = np.empty((k, 2))
    arcs = np.empty(k)
    j, walked = 0, 0.0  # current segment and arc length at its start
    for i in range(k):
        s = i * perimeter / k
        while j < n - 1 and walked + seglen[j] <= s:
            walked += seglen[j]
            j += 1
        t = (s - walked) / seglen[j] if seglen[j] > 0 else 0.0
        points[i] = closed[j] + t * seg[j]
        arcs[i] = s
    return ContourPointSet(points, k, "uniform", pad_count=0, seed=seed, arc_positions=arcs)


def _point_segment_distance(pts, a, b):
    ab = b - a
    if not ab.any():
        return np.hypot(*(pts - a).T)
    # perpendicular distance to the infinite line through a, b
    cross = ab[0] * (pts[:, 1] - a[1]) - ab[1] * (pts[:, 0] - a[0])
    return np.abs(cross) / math.hypot(*ab)


def rdp_closed(contour, epsilon):
    """Ramer-Douglas-Peucker on a closed contour.

    The loop is split at the start and at the vertex farthest from it, and
    each half is simplified as an open polyline. Returns ``(indices,
    deviations)``: retained vertex indices in contour order and the deviation
    each was selected at (both anchors are ``inf``).
    """
    closed = _closed(contour)
    n = len(closed) - 1
    deviation = {0: math.inf}
    far = int(np.argmax(np.hypot(*(closed[:n] - closed[0]).T)))
    if far == 0:
        return [0], [math.inf]
    deviation[far] = math.inf
    stack = [(far, n), (0, far)]
    while stack:
        i0, i1 = stack.pop()
        if i1 - i0 < 2:
            continue
        inner = closed[i0 + 1 : i1]
        d = _point_segment_distance(inner, closed[i0], closed[i1])
        j = int(np.argmax(d))
        if d[j] > epsilon:
            idx = i0 + 1 + j
            deviation[idx] = float(d[j])
            stack.append((idx, i1))
            stack.append((i0, idx))
    idx = sorted(deviation)
    return idx, [deviation[i] for i in idx]


def corner_sample(contour, k, epsilon=2.0, seed=0):
    """Up to ``k`` corner points from an RDP simplification, padded if fewer."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    idx, dev = rdp_closed(pts, epsilon)
    if len(idx) > k:
        # largest deviation first, earlier contour position on ties
        order = sorted(range(len(idx)), key=lambda i: (-dev[i], idx[i]))[:k]
        idx = sorted(idx[i] for i in order)
    base = pts[idx]
    if len(base) < k:
        points, _ = _pad(base, k, seed)
        return ContourPointSet(points, k, "corner", pad_count=k - len(base), seed=seed)
    return ContourPointSet(base.copy(), k, "corner", pad_count=0, seed=seed)


def centroid(mask):
    m = _as_mask(mask)
    rows, cols = np.nonzero(m)
    return (float(rows.mean()), float(cols.mean()))


def make_contour_points(mask, k, sampling="uniform", epsilon=2.0, use_center=True, seed=0):
    """Full label pipeline for one instance mask."""
    contour = trace_contour(mask)
    if sampling == "uniform":
        cps = uniform_sample(contour, k, seed)
    elif sampling == "corner":
        cps = corner_sample(contour, k, epsilon, seed)
    else:
        raise ValueError(f"unknown sampling {sampling!r}")
    if use_center:
        cps.center = centroid(mask)
    return cps


# Points are pixel indices: pixel (r, c) covers [r, r + 1) x [c, c + 1) in the
# edge coordinates boxes use, so its position inside a box is taken at r + 0.5.
PIXEL_CENTER = 0.5


def _cells(points, box, M):
    top, left, height, width = box
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) + PIXEL_CENTER
    r = np.floor((pts[:, 0] - top) / height * M).astype(int)
    c = np.floor((pts[:, 1] - left) / width * M).astype(int)
    return np.clip(r, 0, M - 1), np.clip(c, 0, M - 1)


def encode_points(points, box, M=56, tol=1e-9):
    """One-hot (len(points), M, M) grid for raw (row, col) points inside ``box``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    top, left, height, width = box
    edge = pts + PIXEL_CENTER
    outside = (
        (edge[:, 0] < top - tol)
        | (edge[:, 0] > top + height + tol)
        | (edge[:, 1] < left - tol)
        | (edge[:, 1] > left + width + tol)
    )
    if outside.any():
        bad = pts[np.argmax(outside)]
        raise OutOfBox(f"point {tuple(bad)} outside box {tuple(box)}")
    r, c = _cells(pts, box, M)
    grid = np.zeros((len(pts), M, M), dtype=np.uint8)
    grid[np.arange(len(pts)), r, c] = 1
    return grid


def encode_heatmaps(points, box, M=56):
    """Heatmap targets for a :class:`ContourPointSet` (center last) or raw point array."""
    pts = points.all_points() if isinstance(points, ContourPointSet) else points
    return HeatmapLabel(encode_points(pts, box, M), tuple(float(v) for v in box), M)


def decode_heatmaps(grid, box):
    """Per-channel argmax (row-major first on ties) mapped to cell centers in image space."""
    grid = np.asarray(grid)
    K, M, M2 = grid.shape
    flat = grid.reshape(K, -1).argmax(axis=1)
    r, c = np.divmod(flat, M2)
    top, left, height, width = box
    rows = top + (r + 0.5) * height / M - PIXEL_CENTER
    cols = left + (c + 0.5) * width / M2 - PIXEL_CENTER
    return np.stack([rows, cols], axis=1)


def points_to_mask(points, height, width):
    """Rasterize the closed polygon through ``points`` (even-odd fill plus its edges)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegeneratePolygon(f"need at least 3 points, got {len(pts)}")
    out = np.zeros((height, width), dtype=bool)
    r0 = max(int(np.floor(pts[:, 0].min())), 0)
    r1 = min(int(np.ceil(pts[:, 0].max())) + 1, height)
    c0 = max(int(np.floor(pts[:, 1].min())), 0)
    c1 = min(int(np.ceil(pts[:, 1].max())) + 1, width)
    if r0 < r1 and c0 < c1:
        rr, cc = np.mgrid[r0:r1, c0:c1]
        out[r0:r1, c0:c1] = polygon_contains(pts, rr, cc)

    # edges: every pixel within half a pixel of a segment
    nxt = np.roll(pts, -1, axis=0)
    for a, b in zip(pts, nxt):
        lo = np.floor(np.minimum(a, b) - 0.5).astype(int)
        hi = np.ceil(np.maximum(a, b) + 0.5).astype(int) + 1
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, (height, width))
        if (lo >= hi).any():
            continue
        rr, cc = np.mgrid[lo[0] : hi[0], lo[1] : hi[1]]
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0 else np.clip(((rr - a[0]) * ab[0] + (cc - a[1]) * ab[1]) / denom, 0.0, 1.0)
        d2 = (rr - a[0] - t * ab[0]) ** 2 + (cc - a[1] - t * ab[1]) ** 2
        out[lo[0] : hi[0], lo[1] : hi[1]] |= d2 <= 0.25 + 1e-12
    return out


def flip_point_set(cps, width):
    """Mirror a point set horizontally in an image ``width`` pixels wide.

    Point order is reversed to stay clockwise, then rotated so the topmost-
    leftmost point comes first. Returns the new set and the permutation
    ``perm`` with ``new.points[i] == mirror(old.points[perm[i]])``.
    """
    pts = np.asarray(cps.points, dtype=np.float64)
    mirrored = pts.copy()
    mirrored[:, 1] = (width - 1) - mirrored[:, 1]
    perm = np.arange(len(pts))[::-1]
    rev = mirrored[perm]
    start = int(np.lexsort((rev[:, 1], rev[:, 0]))[0])
    perm = np.roll(perm, -start)
    center = None
    if cps.center is not None:
        center = (cps.center[0], (width - 1) - cps.center[1])
    new = ContourPointSet(
        mirrored[perm], cps.k, cps.sampling, pad_count=cps.pad_count, seed=cps.seed, center=center
    )
    return new, perm
