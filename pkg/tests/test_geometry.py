"""Tests for box arithmetic and NMS."""

import dataclasses
from typing import Optional

import numpy as np
import pydantic
import pytest

from builders import box
from progtrans.geometry import (
    BBox,
    area,
    intersection,
    iou,
    iou_matrix,
    nms,
    overlap_over_pred,
)


@dataclasses.dataclass(frozen=True)
class Det:
    bbox: BBox
    score: float
    category: Optional[int] = None


def random_box(gen: np.random.Generator, size: float = 50.0) -> BBox:
    x1, y1 = gen.uniform(0, size, 2)
    w, h = gen.uniform(1.0, size / 2, 2)
    return BBox.of(x1, y1, x1 + w, y1 + h)


def test_bbox_rejects_degenerate():
    with pytest.raises(pydantic.ValidationError):
        box(5, 0, 5, 10)
    with pytest.raises(pydantic.ValidationError):
        box(0, 10, 10, 2)


def test_bbox_rejects_non_finite():
    with pytest.raises(pydantic.ValidationError):
        box(0, 0, float("inf"), 1)


def test_bbox_list_form():
    b = BBox.model_validate([1, 2, 3, 4])
    assert b.as_tuple() == (1.0, 2.0, 3.0, 4.0)
    assert b.model_dump() == [1.0, 2.0, 3.0, 4.0]
    with pytest.raises(pydantic.ValidationError):
        BBox.model_validate([1, 2, 3])


def test_area_and_intersection():
    assert area(box(0, 0, 2, 3)) == 6.0
    assert intersection(box(0, 0, 2, 2), box(1, 1, 3, 3)) == 1.0
    assert intersection(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0


def test_iou_identical_boxes():
    b = box(3, 4, 10, 12)
    assert iou(b, b) == 1.0


def test_iou_touching_edges_is_zero():
    assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0


def test_iou_partial_overlap():
    assert iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)


@pytest.mark.parametrize("seed", range(20))
def test_iou_symmetric_and_bounded(seed):
    gen = np.random.default_rng(seed)
    a, b = random_box(gen), random_box(gen)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


@pytest.mark.parametrize("seed", range(50))
def test_iou_bounded_by_area_ratio(seed):
    gen = np.random.default_rng(100 + seed)
    a, b = random_box(gen, size=20.0), random_box(gen, size=20.0)
    small, large = sorted((area(a), area(b)))
    assert iou(a, b) <= small / large + 1e-12
    assert overlap_over_pred(a, [b]) >= iou(a, b) - 1e-12


def test_overlap_over_pred_contained_box():
    assert overlap_over_pred(box(2, 2, 4, 4), [box(0, 0, 10, 10)]) == 1.0


def test_overlap_over_pred_half_inside():
    assert overlap_over_pred(box(0, 0, 10, 10), [box(5, 0, 20, 10)]) == 0.5


def test_overlap_over_pred_empty_gts():
    assert overlap_over_pred(box(0, 0, 1, 1), []) == 0.0


def test_overlap_over_pred_takes_max():
    gts = [box(0, 0, 1, 10), box(0, 0, 5, 10)]
    assert overlap_over_pred(box(0, 0, 10, 10), gts) == 0.5


def test_iou_matrix_matches_scalar():
    gen = np.random.default_rng(3)
    a = [random_box(gen) for _ in range(5)]
    b = [random_box(gen) for _ in range(4)]
    got = iou_matrix(np.array([x.as_tuple() for x in a]), np.array([x.as_tuple() for x in b]))
    expected = np.array([[iou(x, y) for y in b] for x in a])
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_nms_example():
    dets = [Det(box(0, 0, 10, 10), 0.9), Det(box(1, 1, 11, 11), 0.8), Det(box(50, 50, 60, 60), 0.7)]
    kept = nms(dets, 0.5)
    assert kept == [dets[0], dets[2]]


def test_nms_empty():
    assert nms([], 0.4) == []


def test_nms_threshold_one_keeps_all():
    dets = [Det(box(0, 0, 10, 10), 0.5), Det(box(0, 0, 10, 10), 0.6)]
    assert len(nms(dets, 1.0)) == 2


def test_nms_equal_scores_keep_earlier():
    dets = [Det(box(0, 0, 10, 10), 0.5), Det(box(0, 0, 10, 10), 0.5)]
    assert nms(dets, 0.3) == [dets[0]]


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 1.5)


def test_nms_per_category_only_suppresses_within_category():
    dets = [Det(box(0, 0, 10, 10), 0.9, 0), Det(box(0, 0, 10, 10), 0.8, 1)]
    assert nms(dets, 0.3) == [dets[0]]
    assert nms(dets, 0.3, per_category=True) == dets


def brute_force_nms(dets, thresh):
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    while remaining:
        i = remaining.pop(0)
        kept.append(dets[i])
        remaining = [j for j in remaining if iou(dets[i].bbox, dets[j].bbox) <= thresh]
    return kept


@pytest.mark.parametrize("seed", range(25))
def test_nms_matches_quadratic_reference(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(0, 51))
    # coarse scores force ties
    dets = [Det(random_box(gen), float(gen.integers(0, 10)) / 10) for _ in range(n)]
    thresh = float(gen.uniform(0.0, 1.0))
    kept = nms(dets, thresh)
    assert kept == brute_force_nms(dets, thresh)
    scores = [d.score for d in kept]
    assert scores == sorted(scores, reverse=True)
    for i, a in enumerate(kept):
        for b in kept[i + 1 :]:
            assert iou(a.bbox, b.bbox) <= thresh
