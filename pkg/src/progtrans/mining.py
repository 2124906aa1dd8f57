"""Pseudo ground-truth mining over source and target images"""

from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import pydantic

from progtrans.data_model import Annotation, Detection, Domain, ImageView, Origin
from progtrans.geometry import iou, overlap_over_pred
from progtrans.logger import setup_logger

LOG = setup_logger(__name__)

Detector = Callable[[ImageView], Sequence[Detection]]
Mined = dict[str, list[Annotation]]


class MiningConfig(pydantic.BaseModel):
    """Score threshold `tau` and source overlap threshold `o`."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    tau: float = pydantic.Field(0.8, gt=0.0, lt=1.0)
    o: float = pydantic.Field(0.1, gt=0.0, le=1.0)


class MiningStats(NamedTuple):
    """Quality of mined boxes against simulator truth."""

    precision: float
    recall: float
    n_mined: int
    n_gt: int


def _pseudo(det: Detection) -> Annotation:
    return Annotation(bbox=det.bbox, category=det.category, origin=Origin.PSEUDO, score=det.score)


def accept_source(det: Detection, image: ImageView, cfg: MiningConfig) -> bool:
    """Source rule: confident and barely overlapping any original annotation."""
    return det.score > cfg.tau and overlap_over_pred(det.bbox, image.original_boxes()) < cfg.o


def mine_source(images: Iterable[ImageView], detector: Detector, cfg: MiningConfig) -> Mined:
    """
    Mine missing annotations in source images.

    A detection is accepted when `score > tau` and its overlap (over its own
    area) with every original annotation is `< o`. Previously mined pseudo
    boxes are never part of the overlap basis. Accepted boxes keep their
    predicted category and score.

    **Returns:**
        Pseudo annotations for every image id (possibly empty lists).
    """
    mined: Mined = {}
    for image in images:
        mined[image.id] = [_pseudo(d) for d in detector(image) if accept_source(d, image, cfg)]
    LOG.info(
        "Mined %d source boxes over %d images (tau=%g, o=%g)",
        sum(len(v) for v in mined.values()),
        len(mined),
        cfg.tau,
        cfg.o,
    )
    return mined


def select_target(dets: Sequence[Detection], labels: Iterable[int], tau: float) -> list[Detection]:
    """
    Target rule for one image.

    For each labelled category, keep every detection of that category with
    `score > tau` plus all detections sharing the top score when that score
    is positive. Detections of unlabelled categories are dropped.
    """
    positive = set(labels)
    top: dict[int, float] = {}
    for d in dets:
        if d.category in positive and d.score > top.get(d.category, -1.0):
            top[d.category] = d.score
    return [
        d
        for d in dets
        if d.category in positive
        and (d.score > tau or 0.0 < d.score == top[d.category])
    ]


def mine_target(images: Iterable[ImageView], detector: Detector, cfg: MiningConfig) -> Mined:
    """
    Mine boxes in weakly labelled target images.

    Every positive category with at least one detection gets its top-scoring
    box, plus any box above `tau`.
    """
    mined: Mined = {}
    for image in images:
        if not image.labels:
            mined[image.id] = []
            continue
        selected = select_target(detector(image), image.labels, cfg.tau)
        mined[image.id] = [_pseudo(d) for d in selected]
    LOG.info(
        "Mined %d target boxes over %d images (tau=%g)",
        sum(len(v) for v in mined.values()),
        len(mined),
        cfg.tau,
    )
    return mined


def _match_image(mined: Sequence[Annotation], gt: Sequence[Annotation], iou_thresh: float) -> int:
    order = sorted(range(len(mined)), key=lambda i: (-(mined[i].score or 0.0), i))
    taken = [False] * len(gt)
    correct = 0
    for i in order:
        best, best_k = -1.0, -1
        for k, g in enumerate(gt):
            if taken[k] or g.category != mined[i].category:
                continue
            overlap = iou(mined[i].bbox, g.bbox)
            if overlap > best:
                best, best_k = overlap, k
        if best_k >= 0 and best >= iou_thresh:
            taken[best_k] = True
            correct += 1
    return correct


def mining_stats(
    mined: Mapping[str, Sequence[Annotation]],
    gt: Mapping[str, Sequence[Annotation]],
    iou_thresh: float = 0.5,
) -> MiningStats:
    """
    Precision and recall of mined boxes, pooled over images.

    A mined box is correct when it matches (IoU >= `iou_thresh`, same
    category, greedy one-to-one by descending score) a truth box of its
    image. With nothing mined the result is `(1.0, 0.0)`.

    **Parameters:**
        - `mined`: Pseudo annotations per image id.
        - `gt`: Truth per image id (evaluation only).
    """
    n_mined = sum(len(v) for v in mined.values())
    n_gt = sum(len(v) for v in gt.values())
    if n_mined == 0:
        return MiningStats(1.0, 0.0, 0, n_gt)
    correct = sum(
        _match_image(boxes, gt.get(image_id, []), iou_thresh) for image_id, boxes in mined.items()
    )
    recall = correct / n_gt if n_gt else 0.0
    return MiningStats(correct / n_mined, recall, n_mined, n_gt)


def audit_mined(
    images: Iterable[ImageView],
    mined: Mapping[str, Sequence[Annotation]],
    cfg: MiningConfig,
) -> list[str]:
    """
    Re-check mined boxes against the mining rules after the fact.

    Source boxes must satisfy the score and overlap rule against the
    image's original annotations; target boxes must belong to a labelled
    category and either beat `tau` or be among the image's mined boxes of
    the top score for that category.

    **Returns:**
        A description of each violation (empty when all boxes pass).
    """
    problems = []
    for image in images:
        boxes = mined.get(image.id, [])
        originals = image.original_boxes()
        for anno in boxes:
            score = anno.score or 0.0
            if anno.origin is not Origin.PSEUDO:
                problems.append(f"{image.id}: mined box is not marked pseudo")
            elif image.domain is Domain.SOURCE:
                if not (score > cfg.tau and overlap_over_pred(anno.bbox, originals) < cfg.o):
                    problems.append(f"{image.id}: source box {anno.bbox.as_tuple()} breaks tau/o")
            else:
                top = max((a.score or 0.0) for a in boxes if a.category == anno.category)
                if anno.category not in image.labels:
                    problems.append(f"{image.id}: box of unlabelled category {anno.category}")
                elif not (score > cfg.tau or score == top):
                    problems.append(f"{image.id}: target box score {score} below tau and not top")
    return problems
