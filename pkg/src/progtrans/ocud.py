"""
One-class universal detector (OCUD).

A linear-plus-sigmoid objectness scorer over candidate features. All
categories are folded into one generic "object" class: a candidate is
positive when it overlaps any annotation (original or pseudo) by at least
`match_iou`, regardless of category.
"""

import dataclasses
import json
import math
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pydantic

from progtrans import rng
from progtrans.data_model import Dataset, ImageView
from progtrans.geometry import BBox, boxes_to_array, iou_matrix, nms
from progtrans.logger import setup_logger
from progtrans.synthworld import CandidateSource

LOG = setup_logger(__name__)

EpochCallback = Callable[[int, float], None]


class OcudTrainingError(RuntimeError):
    """Custom exception raised when the OCUD has nothing to train on."""


@dataclasses.dataclass(frozen=True, eq=False)
class OcudParams:
    """Weights `w` (length d) and bias `b` of the objectness scorer."""

    w: np.ndarray
    b: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OcudParams):
            return NotImplemented
        return bool(np.array_equal(self.w, other.w)) and self.b == other.b

    __hash__ = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not math.isfinite(self.b):
            raise ValueError("OcudParams need a finite 1-d weight vector and bias")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))

    @classmethod
    def zeros(cls, dim: int) -> "OcudParams":
        """An untrained scorer (every score is 0.5)."""
        return cls(np.zeros(dim), 0.0)

    def to_json(self) -> str:
        """Checkpoint as `{"w": [...], "b": ...}`."""
        return json.dumps({"w": self.w.tolist(), "b": self.b})

    @classmethod
    def from_json(cls, text: str) -> "OcudParams":
        """Restore a checkpoint written by `to_json`."""
        payload = json.loads(text)
        return cls(np.asarray(payload["w"], dtype=float), float(payload["b"]))

    def save(self, path: str | Path) -> None:
        """Write the checkpoint to `path`."""
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "OcudParams":
        """Read a checkpoint from `path`."""
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


class OcudTrainConfig(pydantic.BaseModel):
    """SGD schedule for (re)training the OCUD. One step is one image."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    steps: int = pydantic.Field(3500, ge=0)
    lr: float = pydantic.Field(0.5, gt=0.0)
    lr_drop_at: float = pydantic.Field(0.7, ge=0.0, le=1.0)
    match_iou: float = pydantic.Field(0.5, gt=0.0, le=1.0)
    neg_pos_ratio: float = pydantic.Field(3.0, gt=0.0)
    seed: int = pydantic.Field(0, ge=0)


class ProposalConfig(pydantic.BaseModel):
    """How OCUD scores become proposals."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    proposal_nms_iou: float = pydantic.Field(0.7, ge=0.0, le=1.0)
    max_proposals: int = pydantic.Field(20, gt=0)


@dataclasses.dataclass(frozen=True)
class Proposal:
    """A candidate with its objectness score `s_i`."""

    bbox: BBox
    score: float
    feature: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def ocud_score(p: OcudParams, feature: np.ndarray) -> float:
    """
    Objectness `sigmoid(w . f + b)`.

    **Raises:**
        - `ValueError`: If `feature` does not match the weight dimension.
    """
    feature = np.asarray(feature, dtype=float)
    if feature.shape != p.w.shape:
        raise ValueError(f"feature has shape {feature.shape}, expected {p.w.shape}")
    return float(_sigmoid(np.dot(p.w, feature) + p.b))


def ocud_scores(p: OcudParams, features: np.ndarray) -> np.ndarray:
    """Vectorized `ocud_score` over an `(n, d)` feature matrix."""
    features = np.asarray(features, dtype=float).reshape(-1, p.w.shape[0])
    return _sigmoid(features @ p.w + p.b)


@dataclasses.dataclass(frozen=True)
class _Batch:
    features: np.ndarray
    labels: np.ndarray


def _label_candidates(
    image: ImageView, candidates: CandidateSource, match_iou: float
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    cands = candidates.candidates(image.id)
    if not cands:
        return None
    features = np.stack([c.feature for c in cands])
    gt = boxes_to_array([a.bbox for a in image.annotations])
    if len(gt) == 0:
        labels = np.zeros(len(cands))
    else:
        overlap = iou_matrix(boxes_to_array([c.bbox for c in cands]), gt).max(axis=1)
        labels = (overlap >= match_iou).astype(float)
    return features, labels


def _build_batches(
    images: Sequence[ImageView],
    candidates: CandidateSource,
    cfg: OcudTrainConfig,
    gen: np.random.Generator,
) -> list[_Batch]:
    batches = []
    for image in images:
        labelled = _label_candidates(image, candidates, cfg.match_iou)
        if labelled is None:
            continue
        features, labels = labelled
        pos = np.flatnonzero(labels == 1.0)
        neg = np.flatnonzero(labels == 0.0)
        if len(pos) > 0:
            n_neg = min(len(neg), int(math.ceil(cfg.neg_pos_ratio * len(pos))))
            neg = np.sort(gen.choice(neg, size=n_neg, replace=False))
        keep = np.concatenate([pos, neg])
        batches.append(_Batch(features[keep], labels[keep]))
    return batches


def _batch_loss(w: np.ndarray, b: float, batch: _Batch) -> float:
    z = batch.features @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - batch.labels * z))


def _objective(w: np.ndarray, b: float, batches: Sequence[_Batch]) -> float:
    return float(np.mean([_batch_loss(w, b, batch) for batch in batches]))


def train_ocud(
    datasets: Sequence[Dataset | Sequence[ImageView]],
    cfg: OcudTrainConfig,
    candidates: CandidateSource,
    init: Optional[OcudParams] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> OcudParams:
    """
    Train (or refine) the OCUD with logistic-loss SGD.

    Each step takes one image: its positive candidates plus a subsample of
    `neg_pos_ratio` negatives per positive (all negatives when the image
    has no positive). The subsample is drawn once per call, so the call
    optimizes one fixed objective. The learning rate drops by 10x after
    `lr_drop_at` of the steps.

    **Parameters:**
        - `datasets`: Datasets (or image views) mixed into one training set.
          Only `ImageView` projections are read.
        - `cfg`: The SGD schedule.
        - `candidates`: Where candidate boxes and features come from.
        - `init`: Warm-start parameters; `None` trains from zeros.
        - `on_epoch`: Called as `on_epoch(epoch, objective)` before training
          (epoch 0) and after every full pass over the images.

    **Returns:**
        The trained parameters; `init` itself when `cfg.steps == 0`.

    **Raises:**
        - `ValueError`: If `datasets` is empty.
        - `OcudTrainingError`: If no image has a candidate.
    """
    if not datasets:
        raise ValueError("train_ocud needs at least one dataset")
    images = [
        view
        for ds in datasets
        for view in (ds.views() if isinstance(ds, Dataset) else ds)
    ]
    if cfg.steps == 0 and init is not None:
        return init

    gen = rng.stream(cfg.seed, "ocud")
    batches = _build_batches(images, candidates, cfg, gen)
    if not batches:
        raise OcudTrainingError("no training image has candidate boxes")

    dim = batches[0].features.shape[1]
    params = init if init is not None else OcudParams.zeros(dim)
    if cfg.steps == 0:
        return params
    w, b = params.w.copy(), params.b

    n_pos = int(sum(batch.labels.sum() for batch in batches))
    LOG.info(
        "Training OCUD: %d images, %d positives, %d steps, lr=%g, warm_start=%s",
        len(batches),
        n_pos,
        cfg.steps,
        cfg.lr,
        init is not None,
    )
    if on_epoch is not None:
        on_epoch(0, _objective(w, b, batches))

    drop_step = int(cfg.lr_drop_at * cfg.steps)
    order = gen.permutation(len(batches))
    epoch = 0
    for step in range(cfg.steps):
        pos_in_epoch = step % len(batches)
        if pos_in_epoch == 0 and step > 0:
            order = gen.permutation(len(batches))
        batch = batches[order[pos_in_epoch]]
        lr = cfg.lr if step < drop_step else cfg.lr * 0.1

        residual = _sigmoid(batch.features @ w + b) - batch.labels
        w -= lr * (batch.features.T @ residual) / len(residual)
        b -= lr * float(np.mean(residual))

        if pos_in_epoch == len(batches) - 1:
            epoch += 1
            loss = _objective(w, b, batches)
            LOG.debug("OCUD epoch %d: loss %.6f", epoch, loss)
            if on_epoch is not None:
                on_epoch(epoch, loss)

    return OcudParams(w, b)


def detect_objectness(
    p: OcudParams,
    image: ImageView,
    candidates: CandidateSource,
    cfg: ProposalConfig,
) -> list[Proposal]:
    """
    Score every candidate of `image` and keep the best proposals.

    Category-agnostic NMS at `proposal_nms_iou`, then the top
    `max_proposals` by score, sorted descending. No score threshold.
    """
    cands = candidates.candidates(image.id)
    if not cands:
        return []
    scores = ocud_scores(p, np.stack([c.feature for c in cands]))
    proposals = [
        Proposal(bbox=c.bbox, score=float(s), feature=c.feature)
        for c, s in zip(cands, scores)
    ]
    return nms(proposals, cfg.proposal_nms_iou)[: cfg.max_proposals]
