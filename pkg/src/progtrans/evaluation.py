"""
Detection metrics: per-category AP, mAP and CorLoc.

mAP matches a detection to ground truth at IoU >= 0.5, while CorLoc counts
a localization as correct only at IoU strictly above 0.5.
"""

import csv
import enum
import io
import json
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from progtrans.data_model import Annotation, Dataset, Detection, ImageView
from progtrans.geometry import iou
from progtrans.logger import setup_logger

LOG = setup_logger(__name__)

CORLOC_IOU: float = 0.5


class ApMethod(str, enum.Enum):
    """VOC AP interpolation."""

    ELEVEN_POINT = "eleven_point"
    ALL_POINTS = "all_points"


class MapResult(NamedTuple):
    """Per-category AP (categories with ground truth only) and their mean."""

    ap: dict[int, float]
    map: float


class CorLocResult(NamedTuple):
    """Per-category CorLoc and their mean."""

    corloc: dict[int, float]
    mean: float


def voc_ap(
    recall: Sequence[float],
    precision: Sequence[float],
    method: ApMethod | str = ApMethod.ELEVEN_POINT,
) -> float:
    """
    Area under a precision/recall curve, VOC style.

    **Parameters:**
        - `recall`, `precision`: Cumulative values in rank order.
        - `method`: `eleven_point` averages the best precision at recall
          >= r over r in {0, 0.1, ..., 1}; `all_points` integrates the
          monotone precision envelope exactly.

    **Returns:**
        AP in [0, 1]; 0.0 for an empty curve.
    """
    rec = np.asarray(recall, dtype=float)
    prec = np.asarray(precision, dtype=float)
    if rec.size == 0:
        return 0.0
    method = ApMethod(method)

    if method is ApMethod.ELEVEN_POINT:
        points = [
            float(prec[rec >= t].max()) if np.any(rec >= t) else 0.0
            for t in np.linspace(0.0, 1.0, 11)
        ]
        return float(np.mean(points))

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _rank_key(image_id: str, det: Detection) -> tuple:
    return (-det.score, image_id, det.bbox.as_tuple())


def category_pr(
    dets: Mapping[str, Sequence[Detection]],
    gt: Mapping[str, Sequence[Annotation]],
    category: int,
    iou_thresh: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, int]:
    """
    Cumulative recall and precision of one category's ranked detections.

    Each detection, by descending score, takes the unmatched ground-truth
    box of its image with the highest IoU (lowest index on ties) and is a
    true positive when that IoU is >= `iou_thresh`.

    **Returns:**
        `(recall, precision, n_gt)`.
    """
    truth = {
        image_id: [a.bbox for a in annos if a.category == category]
        for image_id, annos in gt.items()
    }
    n_gt = sum(len(v) for v in truth.values())
    ranked = sorted(
        ((image_id, d) for image_id, ds in dets.items() for d in ds if d.category == category),
        key=lambda item: _rank_key(*item),
    )
    taken = {image_id: [False] * len(boxes) for image_id, boxes in truth.items()}
    tp = np.zeros(len(ranked))
    for rank, (image_id, det) in enumerate(ranked):
        boxes = truth.get(image_id, [])
        best, best_k = -1.0, -1
        for k, box in enumerate(boxes):
            if taken[image_id][k]:
                continue
            overlap = iou(det.bbox, box)
            if overlap > best:
                best, best_k = overlap, k
        if best_k >= 0 and best >= iou_thresh:
            taken[image_id][best_k] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt if n_gt else np.zeros(len(ranked))
    precision = cum_tp / np.maximum(cum_tp + cum_fp, np.finfo(float).eps)
    return recall, precision, n_gt


def evaluate_map(
    dets: Mapping[str, Sequence[Detection]],
    gt: Mapping[str, Sequence[Annotation]] | Dataset,
    iou_thresh: float = 0.5,
    method: ApMethod | str = ApMethod.ELEVEN_POINT,
) -> MapResult:
    """
    Per-category AP and mAP over a test set.

    **Parameters:**
        - `dets`: Detections per image id.
        - `gt`: Ground truth per image id, or a dataset whose `hidden_gt`
          is used (evaluation only).
        - `iou_thresh`: Matching threshold (`>=`).
        - `method`: AP interpolation.

    **Returns:**
        APs for every category that has ground truth, and their mean (0.0
        when no category has ground truth).
    """
    truth = hidden_truth(gt) if isinstance(gt, Dataset) else dict(gt)
    categories = sorted({a.category for annos in truth.values() for a in annos})
    ap = {}
    for category in categories:
        recall, precision, _ = category_pr(dets, truth, category, iou_thresh)
        ap[category] = voc_ap(recall, precision, method)
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return MapResult(ap, mean)


def corloc(
    dets: Mapping[str, Sequence[Detection]],
    gt: Mapping[str, Sequence[Annotation]],
) -> CorLocResult:
    """
    CorLoc from precomputed detections.

    For each category and each image containing it, the single top-scoring
    detection of that category must exist and overlap some ground-truth box
    of the category with IoU > 0.5.
    """
    hits: dict[int, list[bool]] = {}
    for image_id, annos in sorted(gt.items()):
        image_dets = dets.get(image_id, [])
        for category in sorted({a.category for a in annos}):
            candidates = [d for d in image_dets if d.category == category]
            correct = False
            if candidates:
                top = min(candidates, key=lambda d: _rank_key(image_id, d))
                correct = any(
                    iou(top.bbox, a.bbox) > CORLOC_IOU for a in annos if a.category == category
                )
            hits.setdefault(category, []).append(correct)
    per_category = {c: float(np.mean(v)) for c, v in sorted(hits.items())}
    mean = float(np.mean(list(per_category.values()))) if per_category else 0.0
    return CorLocResult(per_category, mean)


def evaluate_corloc(
    detector: Callable[[ImageView], Sequence[Detection]],
    dataset: Dataset,
    dets: Optional[Mapping[str, Sequence[Detection]]] = None,
) -> CorLocResult:
    """
    CorLoc of `detector` on a (training) dataset with `hidden_gt`.

    `dets` may carry already computed detections of the same detector to
    avoid running it twice.
    """
    if dets is None:
        dets = {img.id: list(detector(img.view())) for img in dataset.images}
    return corloc(dets, hidden_truth(dataset))


def hidden_truth(dataset: Dataset) -> dict[str, list[Annotation]]:
    """`hidden_gt` per image id (evaluation only)."""
    return {img.id: list(img.hidden_gt) for img in dataset.images}


def metrics_rows(
    categories: Sequence[str],
    map_result: MapResult,
    corloc_result: Optional[CorLocResult] = None,
) -> list[dict[str, object]]:
    """Per-category rows plus a final `mean` row."""
    ids = sorted(set(map_result.ap) | set(corloc_result.corloc if corloc_result else {}))
    rows: list[dict[str, object]] = []
    for c in ids:
        rows.append(
            {
                "category": categories[c] if c < len(categories) else str(c),
                "ap": map_result.ap.get(c),
                "corloc": corloc_result.corloc.get(c) if corloc_result else None,
            }
        )
    rows.append(
        {
            "category": "mean",
            "ap": map_result.map,
            "corloc": corloc_result.mean if corloc_result else None,
        }
    )
    return rows


def metrics_json(rows: Sequence[Mapping[str, object]]) -> str:
    """Metrics report as JSON."""
    return json.dumps(list(rows), indent=1, sort_keys=True)


def metrics_csv(rows: Sequence[Mapping[str, object]]) -> str:
    """Metrics report as CSV (`category,ap,corloc`)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["category", "ap", "corloc"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return buf.getvalue()


def write_metrics(rows: Sequence[Mapping[str, object]], path: str | Path) -> None:
    """Write rows as CSV or JSON depending on the file suffix."""
    path = Path(path)
    text = metrics_csv(rows) if path.suffix.lower() == ".csv" else metrics_json(rows) + "\n"
    path.write_text(text, encoding="utf-8")
    LOG.info("Wrote metrics to %s", path)
