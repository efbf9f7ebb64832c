import numpy as np
import pytest
import torch

from goelan.config import ConfigError, toy_config
from goelan.data import (
    AnnotationError,
    DatasetError,
    Sample,
    build_pipeline,
    format_annotation,
    load_manifest,
    mosaic_active,
    parse_annotation_file,
    parse_detection_file,
)
from goelan.data import augment
from goelan.structures import GroundTruthObject


def rect_sample(objects, size=64):
    """Black image with each object painted white; pixels and boxes agree by construction."""
    img = np.zeros((size, size, 3), dtype=np.float32)
    img[:] = box_mask(objects, size, size)[..., None]
    return Sample(img, list(objects), "rect")


def box_mask(objects, h, w):
    m = np.zeros((h, w), dtype=np.float32)
    for o in objects:
        x1, x2 = int(round((o.cx - o.w / 2) * w)), int(round((o.cx + o.w / 2) * w))
        y1, y2 = int(round((o.cy - o.h / 2) * h)), int(round((o.cy + o.h / 2) * h))
        m[y1:y2, x1:x2] = 1.0
    return m


def mask_iou(sample):
    img = sample.image[..., 0] > 0.5
    drawn = box_mask(sample.objects, *sample.image.shape[:2]) > 0.5
    union = (img | drawn).sum()
    return 1.0 if union == 0 else (img & drawn).sum() / union


OBJECTS = [GroundTruthObject(0, 0.25, 0.3, 0.25, 0.2), GroundTruthObject(1, 0.7, 0.65, 0.3, 0.4)]


# --- parsing ----------------------------------------------------------------


def test_parse_examples():
    assert parse_annotation_file("") == []
    (obj,) = parse_annotation_file("3 0.5 0.5 0.2 0.1")
    assert (obj.class_id, obj.cx, obj.cy, obj.w, obj.h) == (3, 0.5, 0.5, 0.2, 0.1)


def test_parse_wrong_arity_reports_line():
    with pytest.raises(AnnotationError, match=":1:"):
        parse_annotation_file("3 0.5 0.5 0.2")
    with pytest.raises(AnnotationError, match="lbl.txt:2:"):
        parse_annotation_file("0 0.5 0.5 0.2 0.1\n1 0.5 x 0.2 0.1", source="lbl.txt")


@pytest.mark.parametrize("line", ["5 0.5 0.5 0.2 0.1", "1 1.5 0.5 0.2 0.1", "1 0.5 0.5 0 0.1", "-1 0.5 0.5 0.2 0.1",
                                  "1.5 0.5 0.5 0.2 0.1", "1 nan 0.5 0.2 0.1"])
def test_parse_rejects_bad_values(line):
    with pytest.raises(AnnotationError):
        parse_annotation_file(line, class_count=3)


def test_format_round_trip():
    text = format_annotation(OBJECTS)
    assert parse_annotation_file(text) == [GroundTruthObject(o.class_id, round(o.cx, 6), round(o.cy, 6),
                                                             round(o.w, 6), round(o.h, 6)) for o in OBJECTS]
    (pair,) = parse_detection_file("2 0.75 0.5 0.5 0.1 0.1\n")
    assert pair[0].class_id == 2 and pair[1] == 0.75


# --- CLAHE ------------------------------------------------------------------


def test_clahe_constant_image():
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    out = augment.clahe(img)
    assert out.shape == img.shape
    assert np.ptp(out) == 0.0


def test_clahe_raises_contrast():
    rng = np.random.default_rng(0)
    gray = rng.uniform(0.4, 0.6, size=(64, 64)).astype(np.float32)
    img = np.repeat(gray[..., None], 3, axis=2)
    out = augment.clahe(img, 2.0, 8)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.std() > img.std()


def test_clahe_tile_too_large():
    with pytest.raises(ConfigError):
        augment.clahe(np.zeros((4, 4, 3), dtype=np.float32), tile_grid=8)


# --- geometric transforms ---------------------------------------------------


def test_horizontal_flip_reflects():
    s = Sample(np.zeros((8, 8, 3), np.float32), [GroundTruthObject(0, 0.3, 0.4, 0.2, 0.2)])
    assert augment.flip(s).objects[0].cx == pytest.approx(0.7, abs=1e-12)


@pytest.mark.parametrize("axis", ["horizontal", "vertical"])
def test_double_flip_identity(axis):
    s = rect_sample(OBJECTS)
    back = augment.flip(augment.flip(s, axis), axis)
    assert np.array_equal(back.image, s.image)
    for a, b in zip(back.objects, s.objects):
        assert max(abs(p - q) for p, q in zip((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h))) <= 1e-9


def test_crop_right_half():
    s = Sample(np.zeros((64, 64, 3), np.float32),
               [GroundTruthObject(0, 0.25, 0.5, 0.1, 0.1), GroundTruthObject(1, 0.75, 0.5, 0.1, 0.1)])
    out = augment.crop(s, (0.5, 0.0, 1.0, 1.0))
    assert out.image.shape == (64, 32, 3)
    (obj,) = out.objects
    assert obj.class_id == 1 and obj.cx == pytest.approx(0.5, abs=1e-12)
    assert obj.w == pytest.approx(0.2, abs=1e-12)


def test_crop_clips_and_drops_slivers():
    s = Sample(np.zeros((100, 100, 3), np.float32),
               [GroundTruthObject(0, 0.5, 0.5, 0.4, 0.4), GroundTruthObject(1, 0.5, 0.1, 0.008, 0.01)])
    out = augment.crop(s, (0.5, 0.0, 1.0, 1.0))
    assert len(out.objects) == 1
    assert out.objects[0].w == pytest.approx(0.4, abs=1e-12)  # 0.2 of the original over a 0.5-wide crop


def test_crop_empty_region():
    with pytest.raises(ValueError):
        augment.crop(rect_sample(OBJECTS), (0.5, 0.5, 0.5, 0.9))


@pytest.mark.parametrize("transform", [
    lambda s: augment.flip(s, "horizontal"),
    lambda s: augment.flip(s, "vertical"),
    lambda s: augment.crop(s, (0.125, 0.25, 0.875, 1.0)),
    lambda s: augment.scale_jitter(s, 1.25, fill=0.0),
    lambda s: augment.scale_jitter(s, 0.75, fill=0.0),
    lambda s: augment.mosaic([s, s, s, s], 128, pivot=(48, 80)),
])
def test_boxes_track_pixels(transform):
    s = rect_sample(OBJECTS, size=128)
    assert mask_iou(s) == 1.0
    out = transform(s)
    if isinstance(out.image, np.ndarray) and out.image.dtype == np.float32:
        out.image[out.image == np.float32(augment.FILL_VALUE)] = 0.0
    assert mask_iou(out) >= 0.95
    for o in out.objects:
        assert all(0.0 <= v <= 1.0 for v in (o.cx, o.cy, o.w, o.h)) and o.w > 0 and o.h > 0


# --- mosaic / mixup ---------------------------------------------------------


def test_mosaic_of_empty_images_is_empty():
    s = Sample(np.full((32, 32, 3), 0.3, np.float32), [])
    assert augment.mosaic([s] * 4, 32, rng=np.random.default_rng(0)).objects == []


def test_mosaic_center_pivot_quadrants():
    s = rect_sample(OBJECTS)
    out = augment.mosaic([s] * 4, 64, pivot=(32, 32))
    assert out.image.shape == (64, 64, 3)
    # each quadrant holds the part of the source that touches the pivot
    assert np.array_equal(out.image[:32, :32], s.image[32:, 32:])
    assert np.array_equal(out.image[:32, 32:], s.image[32:, :32])
    assert np.array_equal(out.image[32:, :32], s.image[:32, 32:])
    assert np.array_equal(out.image[32:, 32:], s.image[:32, :32])
    assert len(out.objects) <= 4 * len(s.objects)


def test_mosaic_seeded_determinism():
    s = [rect_sample(OBJECTS[i % 2:i % 2 + 1]) for i in range(4)]
    a = augment.mosaic(s, 64, rng=np.random.default_rng(5))
    b = augment.mosaic(s, 64, rng=np.random.default_rng(5))
    assert np.array_equal(a.image, b.image) and a.objects == b.objects


def test_mosaic_needs_four():
    with pytest.raises(ValueError):
        augment.mosaic([rect_sample([])] * 3, 64)


def test_mixup_examples():
    a = Sample(np.full((8, 8, 3), 0.2, np.float32), OBJECTS[:1])
    b = Sample(np.full((8, 8, 3), 0.6, np.float32), OBJECTS)
    one = augment.mixup(a, b, lam=1.0)
    assert np.array_equal(one.image, a.image)
    assert len(one.objects) == 3
    half = augment.mixup(a, b, lam=0.5)
    assert np.allclose(half.image, 0.4, atol=1e-6)
    drawn = augment.mixup(a, b, rng=np.random.default_rng(0))
    assert len(drawn.objects) == len(a.objects) + len(b.objects)
    with pytest.raises(ValueError):
        augment.mixup(a, Sample(np.zeros((4, 4, 3), np.float32), []), lam=0.5)


# --- manifest and pipeline --------------------------------------------------


def test_manifest_loads_fixture(manifest):
    assert manifest.class_names == ["red", "green", "blue"]
    assert [len(manifest.images(s)) for s in ("train", "val", "test")] == [8, 2, 2]
    sample = manifest.load(manifest.images("train")[0])
    assert sample.image.shape == (64, 64, 3) and sample.image.dtype == np.float32
    assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0


def test_manifest_missing_files_listed(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "data.yaml").write_text("train: images/list.txt\nnames: [a]\n")
    (tmp_path / "images" / "list.txt").write_text("a.png\nb.png\n")
    m = load_manifest(tmp_path / "data.yaml")
    with pytest.raises(DatasetError, match="b.png"):
        m.validate()
    with pytest.raises(DatasetError):
        m.images("val")


def test_manifest_rejects_bad_names(tmp_path):
    (tmp_path / "data.yaml").write_text("train: images\nnames: [a, a]\n")
    with pytest.raises(DatasetError):
        load_manifest(tmp_path / "data.yaml")
    (tmp_path / "data.yaml").write_text("train: images\n")
    with pytest.raises(DatasetError):
        load_manifest(tmp_path / "data.yaml")


def test_manifest_names_mapping(tmp_path):
    (tmp_path / "data.yaml").write_text("names: {1: b, 0: a}\n")
    assert load_manifest(tmp_path / "data.yaml").class_names == ["a", "b"]


def test_val_pipeline_is_plain_resize(manifest):
    cfg = toy_config(class_count=3, batch_size=2)
    (batch,) = list(build_pipeline(manifest, cfg, "val"))
    for i, path in enumerate(manifest.images("val")):
        sample = manifest.load(path)
        assert batch.targets[i] == sample.objects
        assert torch.allclose(batch.images[i], torch.from_numpy(sample.image).permute(2, 0, 1))


def _stream(manifest, cfg, epoch):
    return [(b.images.clone(), b.targets) for b in build_pipeline(manifest, cfg, "train", epoch=epoch)]


def test_pipeline_determinism_across_workers(manifest):
    cfg = toy_config(class_count=3, batch_size=3, mixup=1.0, blur=0.5, clahe=0.5)
    ref = _stream(manifest, cfg, 0)
    for workers in (0, 2, 3):
        other = _stream(manifest, cfg.replace(workers=workers), 0)
        assert len(other) == len(ref)
        for (xa, ta), (xb, tb) in zip(ref, other):
            assert torch.equal(xa, xb) and ta == tb
    changed = _stream(manifest, cfg.replace(seed=cfg.seed + 1), 0)
    assert not all(torch.equal(a[0], b[0]) for a, b in zip(ref, changed))


def test_train_pipeline_boxes_stay_valid(manifest):
    cfg = toy_config(class_count=3, batch_size=4, mixup=0.5)
    for epoch in range(4):
        for batch in build_pipeline(manifest, cfg, "train", epoch=epoch):
            assert batch.images.shape[1:] == (3, 64, 64)
            assert 0.0 <= float(batch.images.min()) and float(batch.images.max()) <= 1.0
            for objs in batch.targets:
                for o in objs:
                    # labels are stored with 6 decimals
                    assert 0.0 <= o.cx - o.w / 2 + 1e-6 and o.cx + o.w / 2 <= 1.0 + 1e-6
                    assert 0.0 <= o.cy - o.h / 2 + 1e-6 and o.cy + o.h / 2 <= 1.0 + 1e-6
                    assert o.w > 0 and o.h > 0


def test_close_mosaic_epoch():
    cfg = toy_config(close_mosaic=15)
    assert mosaic_active(cfg, 14) and not mosaic_active(cfg, 15)
    assert not mosaic_active(cfg.replace(mosaic=0.0), 0)


def test_public_dataset_shape():
    from goelan.data import CATARACT_CLASSES, CATARACT_SPLIT_SIZES

    assert len(CATARACT_CLASSES) == 10 and len(set(CATARACT_CLASSES)) == 10
    assert sum(CATARACT_SPLIT_SIZES.values()) == 615
    assert CATARACT_SPLIT_SIZES == {"train": 552, "val": 42, "test": 21}
    # roughly 0.9 : 0.07 : 0.03 of the whole
    ratios = [CATARACT_SPLIT_SIZES[s] / 615 for s in ("train", "val", "test")]
    assert [round(r, 2) for r in ratios] == [0.9, 0.07, 0.03]
