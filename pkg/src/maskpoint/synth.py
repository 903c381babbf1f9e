"""Deterministic synthetic instance-segmentation scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .contour import ContourPointSet, make_contour_points
from .errors import PlacementFailed, ShapeOutOfBounds
from .geometry import polygon_contains, tight_box

KINDS = ("circle", "rectangle", "triangle", "star")
CONVEX_KINDS = ("circle", "rectangle", "triangle")


@dataclass
class ShapeSpec:
    """One analytic shape.

    ``scale`` is a radius-like half extent; a ``(height, width)`` pair gives
    full extents instead (used for non-square rectangles and ellipses).
    """

    kind: str
    center: tuple[float, float]
    scale: float | tuple[float, float]
    rotation: float = 0.0
    class_id: int = 0

    def half_extents(self):
        if isinstance(self.scale, (tuple, list)):
            h, w = self.scale
            return float(h) / 2, float(w) / 2
        return float(self.scale), float(self.scale)


@dataclass(eq=False)
class InstanceAnnotation:
    class_id: int
    box: tuple[int, int, int, int]  # top, left, height, width
    mask: np.ndarray
    contour_points: ContourPointSet | None = None

    def __eq__(self, other):
        if not isinstance(other, InstanceAnnotation):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and tuple(self.box) == tuple(other.box)
            and np.array_equal(self.mask, other.mask)
            and _points_equal(self.contour_points, other.contour_points)
        )


def _points_equal(a, b):
    if a is None or b is None:
        return a is b
    return (
        a.k == b.k
        and a.sampling == b.sampling
        and a.pad_count == b.pad_count
        and a.seed == b.seed
        and np.array_equal(a.points, b.points)
        and (a.center is None) == (b.center is None)
        and (a.center is None or tuple(a.center) == tuple(b.center))
    )


@dataclass(eq=False)
class SceneRecord:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1], multiples of 1/255
    instances: list[InstanceAnnotation]
    scene_id: int
    seed: int

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.seed == other.seed
            and np.array_equal(self.image, other.image)
            and self.instances == other.instances
        )

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass
class SceneConfig:
    size: int = 128
    min_instances: int = 1
    max_instances: int = 4
    num_classes: int = 4
    overlap: bool = False
    noise: float = 0.05
    scale_range: tuple[float, float] = (8.0, 18.0)
    max_attempts: int = 1000
    palette: list = field(default_factory=lambda: [
        (0.95, 0.35, 0.30), (0.30, 0.85, 0.40), (0.35, 0.45, 0.95), (0.95, 0.85, 0.30),
        (0.85, 0.40, 0.90), (0.35, 0.90, 0.90), (0.95, 0.60, 0.25), (0.80, 0.80, 0.80),
    ])


def _outline(spec):
    """Vertices (row, col) of a polygonal shape, or None for circles."""
    cy, cx = spec.center
    hy, hx = spec.half_extents()
    if spec.kind == "rectangle":
        local = [(-hy, -hx), (-hy, hx), (hy, hx), (hy, -hx)]
    elif spec.kind == "triangle":
        local = [(-hy * math.cos(a), hx * math.sin(a)) for a in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)]
    elif spec.kind == "star":
        local = []
        for i in range(10):
            a = i * math.pi / 5
            rad = 1.0 if i % 2 == 0 else 0.45
            local.append((-hy * rad * math.cos(a), hx * rad * math.sin(a)))
    else:
        return None
    theta = math.fmod(spec.rotation, 2 * math.pi)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([(cy + y * c - x * s, cx + y * s + x * c) for y, x in local])


def shape_extent(spec):
    """(min_row, min_col, max_row, max_col) of the analytic shape."""
    poly = _outline(spec)
    if poly is None:
        hy, hx = spec.half_extents()
        cy, cx = spec.center
        return cy - hy, cx - hx, cy + hy, cx + hx
    return poly[:, 0].min(), poly[:, 1].min(), poly[:, 0].max(), poly[:, 1].max()


def rasterize_shape(spec, height, width):
    """Foreground iff the pixel center ``(r + 0.5, c + 0.5)`` lies inside the shape."""
    hy, hx = spec.half_extents()
    if hy <= 0 or hx <= 0:
        raise ValueError("scale must be > 0")
    r0, c0, r1, c1 = shape_extent(spec)
    if r0 < 0 or c0 < 0 or r1 > height or c1 > width:
        raise ShapeOutOfBounds(f"{spec.kind} at {spec.center} exceeds {height}x{width}")
    rr, cc = np.mgrid[0:height, 0:width]
    py, px = rr + 0.5, cc + 0.5
    poly = _outline(spec)
    if poly is None:
        cy, cx = spec.center
        mask = ((py - cy) / hy) ** 2 + ((px - cx) / hx) ** 2 <= 1.0
    else:
        mask = polygon_contains(poly, py, px)
    if not mask.any():
        raise ShapeOutOfBounds(f"{spec.kind} at {spec.center} covers no pixel centers")
    return mask


def _random_spec(rng, cfg):
    class_id = int(rng.integers(cfg.num_classes))
    kind = KINDS[class_id % len(KINDS)]
    s = float(rng.uniform(*cfg.scale_range))
    if kind == "rectangle":
        aspect = float(rng.uniform(0.75, 1.33))
        scale = (2 * s * math.sqrt(aspect), 2 * s / math.sqrt(aspect))
    else:
        scale = s
    rotation = float(rng.uniform(0, 2 * math.pi)) if kind != "circle" else 0.0
    margin = s * 1.5 + 1
    center = (float(rng.uniform(margin, cfg.size - margin)), float(rng.uniform(margin, cfg.size - margin)))
    return ShapeSpec(kind, center, scale, rotation, class_id)


def generate_scene(config, scene_id, seed):
    """Build one scene; identical ``(config, scene_id, seed)`` gives identical output."""
    rng = np.random.default_rng([seed, scene_id])
    H = W = config.size
    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    bg_level = rng.uniform(0.05, 0.3, size=3)
    canvas = np.broadcast_to(bg_level, (H, W, 3)).copy()

    placed = []  # (class_id, mask)
    union = np.zeros((H, W), dtype=bool)
    for _ in range(n):
        for _attempt in range(config.max_attempts):
            spec = _random_spec(rng, config)
            try:
                mask = rasterize_shape(spec, H, W)
            except ShapeOutOfBounds:
                continue
            if not config.overlap and (mask & union).any():
                continue
            break
        else:
            raise PlacementFailed(f"scene {scene_id}: no placement after {config.max_attempts} attempts")
        color = config.palette[int(rng.integers(len(config.palette)))]
        canvas[mask] = color
        placed = [(cid, m & ~mask) for cid, m in placed]
        placed.append((spec.class_id, mask))
        union |= mask

    noise = rng.uniform(-config.noise, config.noise, size=(H, W, 3))
    image = np.round(np.clip(canvas + noise, 0.0, 1.0) * 255).astype(np.uint8) / 255.0

    instances = [
        InstanceAnnotation(cid, tight_box(m), m)
        for cid, m in placed
        if m.any()
    ]
    return SceneRecord(image, instances, scene_id, seed)


def generate_dataset(config, scenes, seed, start_id=0):
    return [generate_scene(config, start_id + i, seed) for i in range(scenes)]


def label_records(records, k, sampling="uniform", epsilon=2.0, use_center=True, seed=0):
    """Attach contour-point labels to every instance in place; returns ``records``."""
    for rec in records:
        for j, inst in enumerate(rec.instances):
            inst.contour_points = make_contour_points(
                inst.mask, k, sampling, epsilon, use_center, seed=seed + 1000 * rec.scene_id + j
            )
    return records
