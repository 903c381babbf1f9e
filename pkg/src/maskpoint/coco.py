"""COCO-style JSON interchange for scenes and contour-point labels."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .contour import ContourPointSet, make_contour_points, points_to_mask, trace_contour
from .errors import FormatError
from .geometry import tight_box
from .synth import KINDS, InstanceAnnotation, SceneRecord

INDEX_NAME = "index.json"


def rle_encode(mask):
    """Uncompressed COCO RLE: column-major run lengths, starting with a zero run."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"counts": counts, "size": [int(mask.shape[0]), int(mask.shape[1])]}


def rle_decode(rle):
    h, w = rle["size"]
    values = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for n in rle["counts"]:
        values[pos : pos + n] = val
        pos += n
        val = not val
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return values.reshape((h, w), order="F")


def encode_segmentation(mask):
    """Polygon through the traced outline when it refills the mask exactly, RLE otherwise."""
    try:
        contour = trace_contour(mask)
    except ValueError:
        return rle_encode(mask)
    if len(contour) >= 3:
        pts = np.asarray(contour, dtype=np.float64)
        if np.array_equal(points_to_mask(pts, *mask.shape), mask):
            # COCO polygons are flat [x0, y0, x1, y1, ...]
            return [pts[:, ::-1].ravel().tolist()]
    return rle_encode(mask)


def decode_segmentation(seg, height, width):
    if isinstance(seg, dict):
        mask = rle_decode(seg)
        if mask.shape != (height, width):
            raise ValueError(f"RLE size {mask.shape} != image size {(height, width)}")
        return mask
    mask = np.zeros((height, width), dtype=bool)
    for poly in seg:
        xy = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        mask |= points_to_mask(xy[:, ::-1], height, width)
    return mask


def points_to_json(cps):
    out = {
        "contour_points": np.asarray(cps.points).tolist(),
        "center": None if cps.center is None else [float(cps.center[0]), float(cps.center[1])],
        "contour_meta": {"k": cps.k, "sampling": cps.sampling, "pad_count": cps.pad_count, "seed": cps.seed},
    }
    return out


def points_from_json(ann):
    if "contour_points" not in ann:
        return None
    pts = np.asarray(ann["contour_points"], dtype=np.float64).reshape(-1, 2)
    meta = ann.get("contour_meta", {})
    center = ann.get("center")
    return ContourPointSet(
        pts,
        int(meta.get("k", len(pts))),
        meta.get("sampling", "uniform"),
        pad_count=int(meta.get("pad_count", 0)),
        seed=int(meta.get("seed", 0)),
        center=None if center is None else (float(center[0]), float(center[1])),
    )


def to_coco(records, image_names=None):
    images, annotations = [], []
    categories = set()
    ann_id = 1
    for i, rec in enumerate(records):
        name = image_names[i] if image_names else f"images/{rec.scene_id:06d}.png"
        images.append(
            {"id": rec.scene_id, "file_name": name, "height": rec.height, "width": rec.width, "seed": rec.seed}
        )
        for inst in rec.instances:
            top, left, h, w = inst.box
            ann = {
                "id": ann_id,
                "image_id": rec.scene_id,
                "category_id": int(inst.class_id),
                "bbox": [left, top, w, h],
                "area": int(inst.mask.sum()),
                "iscrowd": 0,
                "segmentation": encode_segmentation(inst.mask),
            }
            if inst.contour_points is not None:
                ann.update(points_to_json(inst.contour_points))
            annotations.append(ann)
            categories.add(int(inst.class_id))
            ann_id += 1
    cats = [{"id": c, "name": KINDS[c % len(KINDS)]} for c in sorted(categories)]
    return {"images": images, "annotations": annotations, "categories": cats}


def write_dataset(records, path):
    """Write ``index.json`` plus ``images/*.png`` under directory ``path``."""
    ids = [rec.scene_id for rec in records]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise FormatError("duplicate scene id", record_id=dup)
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    doc = to_coco(records)
    for rec, entry in zip(records, doc["images"]):
        pixels = np.round(rec.image * 255).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(root / entry["file_name"])
    with open(root / INDEX_NAME, "w") as fh:
        json.dump(doc, fh)
    return root / INDEX_NAME


def _load_index(path):
    p = Path(path)
    index = p / INDEX_NAME if p.is_dir() else p
    try:
        with open(index) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON in {index}: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot read {index}: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise FormatError(f"{index} lacks 'images'/'annotations'")
    return index, doc


def read_dataset(path):
    """Inverse of :func:`write_dataset`; ``path`` is the directory or its index file."""
    index, doc = _load_index(path)
    by_image = {}
    for ann in doc["annotations"]:
        by_image.setdefault(ann.get("image_id"), []).append(ann)

    records = []
    for entry in doc["images"]:
        rid = entry.get("id")
        try:
            H, W = int(entry["height"]), int(entry["width"])
            img_path = index.parent / entry["file_name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad image entry: {exc}", rid) from exc
        if not img_path.exists():
            raise FormatError(f"missing image file {img_path}", rid)
        pixels = np.asarray(Image.open(img_path).convert("RGB"))
        if pixels.shape[:2] != (H, W):
            raise FormatError(f"image is {pixels.shape[:2]}, index says {(H, W)}", rid)
        instances = []
        for ann in by_image.get(rid, []):
            try:
                mask = decode_segmentation(ann["segmentation"], H, W)
                inst = InstanceAnnotation(int(ann["category_id"]), tight_box(mask), mask, points_from_json(ann))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad annotation {ann.get('id')}: {exc}", rid) from exc
            if inst.box is None:
                raise FormatError(f"annotation {ann.get('id')} has an empty mask", rid)
            instances.append(inst)
        records.append(SceneRecord(pixels / 255.0, instances, int(rid), int(entry.get("seed", 0))))
    return records


def make_labels(annotations_path, out_path, k, sampling="uniform", epsilon=2.0, use_center=True, seed=0):
    """Augment a COCO-style annotation file with ``contour_points`` and ``center``."""
    index, doc = _load_index(annotations_path)
    sizes = {e["id"]: (int(e["height"]), int(e["width"])) for e in doc["images"]}
    for ann in doc["annotations"]:
        rid = ann.get("image_id")
        if rid not in sizes:
            raise FormatError(f"annotation {ann.get('id')} references unknown image", rid)
        try:
            mask = decode_segmentation(ann["segmentation"], *sizes[rid])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad annotation {ann.get('id')}: {exc}", rid) from exc
        cps = make_contour_points(mask, k, sampling, epsilon, use_center, seed=seed + int(ann["id"]))
        ann.update(points_to_json(cps))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(doc, fh)
    return doc
