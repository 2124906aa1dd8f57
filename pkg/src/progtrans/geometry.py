"""Axis-aligned box arithmetic, overlap measures and non-maximum suppression"""

import math
from typing import Any, Protocol, Sequence, TypeVar

import numpy as np
import pydantic

_FIELDS = ("x1", "y1", "x2", "y2")


class BBox(pydantic.BaseModel):
    """
    Axis-aligned box `[x1, y1, x2, y2]` in abstract pixel units.

    Coordinates are plain real intervals (no +1 pixel convention). A box
    with `x1 >= x2` or `y1 >= y2` is rejected at construction. Serializes
    to and validates from a 4-element list.
    """

    model_config = pydantic.ConfigDict(frozen=True)

    x1: pydantic.FiniteFloat
    y1: pydantic.FiniteFloat
    x2: pydantic.FiniteFloat
    y2: pydantic.FiniteFloat

    @pydantic.model_validator(mode="before")
    @classmethod
    def _from_sequence(cls, data: Any) -> Any:
        if isinstance(data, (list, tuple, np.ndarray)):
            if len(data) != 4:
                raise ValueError(f"box needs 4 coordinates, got {len(data)}")
            return dict(zip(_FIELDS, (float(v) for v in data)))
        return data

    @pydantic.model_validator(mode="after")
    def _check_extent(self) -> "BBox":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box [{self.x1}, {self.y1}, {self.x2}, {self.y2}]"
            )
        return self

    @pydantic.model_serializer
    def _as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def of(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        """Build a box from positional coordinates."""
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        """Coordinates as a plain tuple (also the deterministic sort key)."""
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        """Extent along x."""
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        """Extent along y."""
        return self.y2 - self.y1

    def inside(self, width: float, height: float) -> bool:
        """Whether the box lies within `[0, width] x [0, height]`."""
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


class Scored(Protocol):  # pylint: disable=too-few-public-methods
    """Anything NMS can rank: a box and a score (optionally a category)."""

    bbox: BBox
    score: float


ScoredT = TypeVar("ScoredT", bound=Scored)


def area(b: BBox) -> float:
    """Area of a valid box: `(x2 - x1) * (y2 - y1)`."""
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection(a: BBox, b: BBox) -> float:
    """Area of the overlap of two boxes, 0.0 when disjoint."""
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union, in [0, 1]."""
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def overlap_over_pred(p: BBox, gts: Sequence[BBox]) -> float:
    """
    Max over `gts` of the intersection with `p` divided by the area of `p`.

    Measuring overlap against the predicted box only (not the union) keeps
    object parts lying inside an annotated box from counting as new objects.
    An empty `gts` gives 0.0.
    """
    if not gts:
        return 0.0
    p_area = area(p)
    return max(intersection(p, g) for g in gts) / p_area


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU between two `(n, 4)` and `(m, 4)` arrays of boxes.

    **Returns:**
        An `(n, m)` array.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an `(n, 4)` float array."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def nms(
    dets: Sequence[ScoredT], iou_thresh: float, per_category: bool = False
) -> list[ScoredT]:
    """
    Greedy non-maximum suppression.

    Detections are visited by descending score, ties going to the earlier
    input position. A detection is kept iff its IoU with every already-kept
    detection (of the same category when `per_category` is set) is
    `<= iou_thresh`.

    **Parameters:**
        - `dets`: Objects exposing `bbox` and `score` (and `category` when
          `per_category` is set).
        - `iou_thresh`: Suppression threshold in [0, 1].
        - `per_category`: Suppress only within a category.

    **Returns:**
        The kept detections, scores non-increasing.
    """
    if not 0.0 <= iou_thresh <= 1.0 or math.isnan(iou_thresh):
        raise ValueError(f"iou_thresh must be in [0, 1], got {iou_thresh}")

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[ScoredT] = []
    kept_by_group: dict[Any, list[BBox]] = {}
    for i in order:
        det = dets[i]
        group = getattr(det, "category", None) if per_category else None
        boxes = kept_by_group.setdefault(group, [])
        if all(iou(det.bbox, k) <= iou_thresh for k in boxes):
            boxes.append(det.bbox)
            kept.append(det)
    return kept
