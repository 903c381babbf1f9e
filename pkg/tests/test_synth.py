import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskpoint.coco import (
    decode_segmentation,
    encode_segmentation,
    make_labels,
    read_dataset,
    rle_decode,
    rle_encode,
    write_dataset,
)
from maskpoint.errors import FormatError, PlacementFailed, ShapeOutOfBounds
from maskpoint.geometry import tight_box
from maskpoint.synth import (
    KINDS,
    SceneConfig,
    ShapeSpec,
    generate_dataset,
    generate_scene,
    label_records,
    rasterize_shape,
)

specs = st.builds(
    ShapeSpec,
    st.sampled_from(KINDS),
    st.tuples(st.floats(20, 44), st.floats(20, 44)),
    st.floats(3, 12),
    st.floats(0, 2 * math.pi),
    st.integers(0, 3),
)


# rasterization

def test_circle_pixel_count():
    m = rasterize_shape(ShapeSpec("circle", (16.0, 16.0), 5.0), 32, 32)
    # independent count of pixel centers within the disc
    ref = sum((r + 0.5 - 16) ** 2 + (c + 0.5 - 16) ** 2 <= 25 for r in range(32) for c in range(32))
    assert m.sum() == ref
    assert abs(m.sum() - math.pi * 25) <= 6


def test_axis_aligned_rectangle_exact():
    m = rasterize_shape(ShapeSpec("rectangle", (10.0, 10.0), (4.0, 6.0)), 20, 20)
    assert m.sum() == 24
    assert tight_box(m) == (8, 7, 4, 6)


@settings(max_examples=60, deadline=None)
@given(specs)
def test_rotation_period(spec):
    turned = ShapeSpec(spec.kind, spec.center, spec.scale, spec.rotation + 2 * math.pi, spec.class_id)
    a = rasterize_shape(ShapeSpec(spec.kind, spec.center, spec.scale, 0.0, spec.class_id), 64, 64)
    b = rasterize_shape(ShapeSpec(spec.kind, spec.center, spec.scale, 2 * math.pi, spec.class_id), 64, 64)
    assert np.array_equal(a, b)
    assert rasterize_shape(turned, 64, 64).shape == (64, 64)


def test_out_of_bounds():
    with pytest.raises(ShapeOutOfBounds):
        rasterize_shape(ShapeSpec("circle", (2.0, 2.0), 5.0), 32, 32)


# scenes

def test_scene_determinism():
    cfg = SceneConfig()
    a, b = generate_scene(cfg, 7, seed=3), generate_scene(cfg, 7, seed=3)
    assert a == b
    assert a.image.tobytes() == b.image.tobytes()
    assert generate_scene(cfg, 8, seed=3) != a


def test_worker_count_independence():
    cfg = SceneConfig()
    whole = generate_dataset(cfg, 6, seed=2)
    pieces = generate_dataset(cfg, 3, seed=2) + generate_dataset(cfg, 3, seed=2, start_id=3)
    assert whole == pieces


def test_no_overlap_and_tight_boxes_and_mean_count():
    cfg = SceneConfig()
    recs = generate_dataset(cfg, 200, seed=0)
    counts = []
    for rec in recs:
        counts.append(len(rec.instances))
        assert rec.image.shape == (128, 128, 3)
        assert rec.image.min() >= 0 and rec.image.max() <= 1
        for i, a in enumerate(rec.instances):
            assert a.mask.any()
            assert 0 <= a.class_id < cfg.num_classes
            assert a.box == tight_box(a.mask)
            top, left, h, w = a.box
            inner = a.mask[top : top + h, left : left + w]
            # shrinking any side by one pixel drops foreground
            assert inner[0].any() and inner[-1].any() and inner[:, 0].any() and inner[:, -1].any()
            assert a.mask.sum() == inner.sum()
            for b in rec.instances[i + 1 :]:
                assert not (a.mask & b.mask).any()
    assert 1 <= np.mean(counts) <= 4


def test_overlap_mode_keeps_masks_disjoint():
    cfg = SceneConfig(overlap=True, min_instances=4, max_instances=4)
    for rec in generate_dataset(cfg, 20, seed=1):
        for i, a in enumerate(rec.instances):
            assert a.box == tight_box(a.mask)
            for b in rec.instances[i + 1 :]:
                assert not (a.mask & b.mask).any()


def test_placement_failure():
    cfg = SceneConfig(size=40, min_instances=4, max_instances=4, scale_range=(11.0, 12.0), max_attempts=20)
    with pytest.raises(PlacementFailed):
        for sid in range(20):
            generate_scene(cfg, sid, seed=0)


# interchange format

def test_rle_round_trip_and_layout():
    m = np.array([[0, 1], [1, 1], [0, 0]], dtype=bool)
    rle = rle_encode(m)
    # column-major: 0,1,0 | 1,1,0
    assert rle == {"counts": [1, 1, 1, 2, 1], "size": [3, 2]}
    assert np.array_equal(rle_decode(rle), m)
    assert rle_encode(np.ones((2, 2), bool))["counts"] == [0, 4]


def test_segmentation_polygon_and_rle_paths():
    block = np.zeros((8, 8), dtype=bool)
    block[2:5, 1:6] = True
    seg = encode_segmentation(block)
    assert isinstance(seg, list)
    assert np.array_equal(decode_segmentation(seg, 8, 8), block)

    holed = np.zeros((8, 8), dtype=bool)
    holed[1:7, 1:7] = True
    holed[3:5, 3:5] = False
    seg = encode_segmentation(holed)
    assert isinstance(seg, dict)
    assert np.array_equal(decode_segmentation(seg, 8, 8), holed)


def test_dataset_round_trip_50_scenes(tmp_path):
    recs = label_records(generate_dataset(SceneConfig(), 50, seed=4), 12)
    write_dataset(recs, tmp_path)
    back = read_dataset(tmp_path)
    assert back == recs
    doc = json.loads((tmp_path / "index.json").read_text())
    kinds = {type(a["segmentation"]).__name__ for a in doc["annotations"]}
    assert "list" in kinds


def test_dataset_round_trip_rle_path(tmp_path):
    recs = generate_dataset(SceneConfig(overlap=True, min_instances=4, max_instances=4), 30, seed=6)
    write_dataset(recs, tmp_path)
    doc = json.loads((tmp_path / "index.json").read_text())
    assert any(isinstance(a["segmentation"], dict) for a in doc["annotations"])
    assert read_dataset(tmp_path) == recs


def test_empty_dataset(tmp_path):
    index = write_dataset([], tmp_path)
    doc = json.loads(index.read_text())
    assert doc["images"] == [] and doc["annotations"] == []
    assert read_dataset(tmp_path) == []


def test_three_instances_share_image_id(tmp_path):
    cfg = SceneConfig(min_instances=3, max_instances=3)
    rec = generate_scene(cfg, 5, seed=0)
    assert len(rec.instances) == 3
    doc = json.loads(write_dataset([rec], tmp_path).read_text())
    assert len(doc["annotations"]) == 3
    assert {a["image_id"] for a in doc["annotations"]} == {5}


def test_format_errors_name_record(tmp_path):
    recs = generate_dataset(SceneConfig(), 2, seed=0)
    write_dataset(recs, tmp_path)
    (tmp_path / "images" / "000001.png").unlink()
    with pytest.raises(FormatError) as err:
        read_dataset(tmp_path)
    assert "1" in str(err.value) and err.value.record_id == 1

    (tmp_path / "index.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_make_labels_file(tmp_path):
    recs = generate_dataset(SceneConfig(), 3, seed=0)
    index = write_dataset(recs, tmp_path / "d")
    out = tmp_path / "labeled.json"
    make_labels(index, out, k=10, sampling="corner", epsilon=1.5, use_center=False, seed=2)
    doc = json.loads(out.read_text())
    for ann in doc["annotations"]:
        assert len(ann["contour_points"]) == 10
        assert ann["center"] is None
    make_labels(index, out, k=10)
    doc2 = json.loads(out.read_text())
    assert all(len(a["center"]) == 2 for a in doc2["annotations"])


def test_duplicate_scene_ids_rejected(tmp_path):
    recs = generate_dataset(SceneConfig(), 2, seed=0) + generate_dataset(SceneConfig(), 1, seed=1)
    with pytest.raises(FormatError) as err:
        write_dataset(recs, tmp_path)
    assert err.value.record_id == 0
