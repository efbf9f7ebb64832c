import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from goelan.postprocess import (
    decode,
    decode_cell_box,
    encode_box,
    iou,
    iou_matrix,
    nms,
    postprocess,
    sort_detections,
)
from goelan.structures import BBox, Detection, GroundTruthObject


def reference_nms(dets, thresh, class_aware=True):
    """O(n^2) reference: scan in score order, keep a box iff no kept box overlaps it."""
    kept = []
    for d in sorted(dets, key=lambda d: (-d.score, d.class_id, d.box.x1)):
        if all(iou(d.box, k.box) < thresh for k in kept if not class_aware or k.class_id == d.class_id):
            kept.append(d)
    return kept


def random_scene(rng, n, classes=3, grid=None):
    dets = []
    for _ in range(n):
        if grid:
            x1, y1 = rng.randrange(0, grid), rng.randrange(0, grid)
            w, h = rng.randrange(1, grid // 2), rng.randrange(1, grid // 2)
        else:
            x1, y1 = rng.uniform(0, 60), rng.uniform(0, 60)
            w, h = rng.uniform(1, 30), rng.uniform(1, 30)
        score = round(rng.random(), 2) if grid else rng.random()
        dets.append(Detection(BBox(x1, y1, x1 + w, y1 + h), rng.randrange(classes), score))
    return dets


# --- iou --------------------------------------------------------------------


def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 6, 6)) == 0.0
    assert abs(iou(a, BBox(1, 1, 3, 3)) - 1 / 7) <= 1e-12


box_strategy = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 30), st.floats(0.1, 30)
).map(lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(a=box_strategy, b=box_strategy)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_matrix(np.array([a.as_tuple()]), np.array([b.as_tuple()]))[0, 0] == iou(a, b)


# --- decode -----------------------------------------------------------------


def _raw_single(gx=4, gy=4, ox=0.5, oy=0.5, w=0.25, h=0.25, obj=30.0, classes=3, cls=1):
    def lg(p):
        return math.log(p / (1 - p))

    scales = [torch.zeros(1, 5 + classes, s, s, dtype=torch.float64) for s in (8, 4, 2)]
    for q in scales:
        q[0, 4] = -30.0  # objectness off everywhere else
    p = scales[0]
    p[0, :, gy, gx] = torch.tensor([lg(ox), lg(oy), lg(math.sqrt(w)), lg(math.sqrt(h)), obj] + [0.0] * classes,
                                   dtype=torch.float64)
    p[0, 5 + cls, gy, gx] = 60.0
    return scales


def test_decode_cell_center():
    (dets,) = decode(_raw_single(), 0.5, 64)
    assert len(dets) == 1
    cx, cy, w, h = dets[0].box.to_center()
    assert (cx, cy) == pytest.approx((36.0, 36.0), abs=1e-9)
    assert (w, h) == pytest.approx((16.0, 16.0), abs=1e-9)
    assert dets[0].class_id == 1
    assert decode_cell_box(4, 4, 0.5, 0.5, 0.25, 0.25, 8, 64).to_center() == (36.0, 36.0, 16.0, 16.0)


def test_decode_threshold_one_is_empty():
    torch.manual_seed(0)
    raw = [torch.randn(2, 8, s, s) for s in (8, 4, 2)]
    assert decode(raw, 1.0, 64) == [[], []]


def test_decode_monotone_in_threshold():
    torch.manual_seed(1)
    raw = [torch.randn(1, 8, s, s) for s in (8, 4, 2)]
    prev = None
    for t in (0.9, 0.5, 0.3, 0.1, 0.0):
        (dets,) = decode(raw, t, 64)
        if prev is not None:
            assert set(prev) <= set(dets)
        prev = dets


def test_decode_clips_to_image():
    (dets,) = decode(_raw_single(gx=0, gy=0, ox=0.1, oy=0.1, w=0.9, h=0.9), 0.5, 64)
    b = dets[0].box
    assert b.x1 == 0.0 and b.y1 == 0.0 and b.x2 <= 64 and b.y2 <= 64


def test_decode_bad_threshold():
    with pytest.raises(ValueError):
        decode([torch.zeros(1, 8, 2, 2)], 1.5, 64)


@given(cx=st.floats(0.01, 0.99), cy=st.floats(0.01, 0.99), w=st.floats(0.01, 1.0), h=st.floats(0.01, 1.0),
       scale=st.sampled_from([(8, 80), (16, 40), (32, 20)]))
def test_encode_decode_round_trip(cx, cy, w, h, scale):
    stride, grid = scale
    size = stride * grid
    obj = GroundTruthObject(0, cx, cy, w, h)
    gx, gy, ox, oy, bw, bh = encode_box(obj, grid)
    assert 0 <= ox < 1 + 1e-12 and 0 <= oy < 1 + 1e-12
    box = decode_cell_box(gx, gy, ox, oy, bw, bh, stride, size)
    ref = obj.to_bbox(size)
    assert max(abs(p - q) for p, q in zip(box.as_tuple(), ref.as_tuple())) <= 1e-6


# --- nms --------------------------------------------------------------------


def test_nms_same_class_overlap():
    a = Detection(BBox(0, 0, 10, 10), 0, 0.9)
    b = Detection(BBox(0, 0, 10, 8), 0, 0.8)  # IoU 0.8
    assert abs(iou(a.box, b.box) - 0.8) < 1e-12
    assert nms([b, a], 0.5) == [a]
    c = Detection(b.box, 1, 0.8)
    assert nms([a, c], 0.5) == [a, c]
    assert nms([a, c], 0.5, class_aware=False) == [a]


def test_nms_matches_reference_50():
    rng = random.Random(0)
    dets = random_scene(rng, 50)
    assert nms(dets, 0.45) == reference_nms(dets, 0.45)


def test_nms_matches_reference_many_scenes():
    rng = random.Random(7)
    for i in range(500):
        dets = random_scene(rng, rng.randrange(0, 40), grid=16 if i % 2 else None)
        thresh = rng.choice([0.3, 0.45, 0.5, 0.7, 1.0])
        aware = bool(i % 3)
        assert nms(dets, thresh, aware) == reference_nms(dets, thresh, aware)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), thresh=st.floats(0.05, 1.0))
def test_nms_invariants(seed, thresh):
    dets = random_scene(random.Random(seed), 30)
    out = nms(dets, thresh)
    assert set(out) <= set(dets)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) < thresh
    assert nms(out, thresh) == out


def test_nms_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 0.0)


def test_sort_is_deterministic():
    d = [Detection(BBox(2, 0, 3, 1), 1, 0.5), Detection(BBox(1, 0, 3, 1), 1, 0.5), Detection(BBox(0, 0, 1, 1), 0, 0.5)]
    assert [x.box.x1 for x in sort_detections(d)] == [0, 1, 2]


def test_postprocess_caps_detections():
    torch.manual_seed(0)
    raw = [torch.randn(1, 8, s, s) for s in (8, 4, 2)]
    (dets,) = postprocess(raw, 64, 0.0, 1.0, max_detections=5)
    assert len(dets) == 5
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
