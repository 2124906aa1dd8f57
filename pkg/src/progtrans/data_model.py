"""
Dataset representation and JSON file formats.

Covers the source dataset, the target train/test datasets, their
pseudo-augmented copies and detector outputs. Boxes are stored as
`[x1, y1, x2, y2]`, never as `[x, y, w, h]`.

Training code only ever sees `ImageView` projections, which carry no
`hidden_gt`; simulator truth is read through `ImageRecord` by evaluation
code only.
"""

import enum
import json
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import pydantic

from progtrans.geometry import BBox
from progtrans.logger import setup_logger

LOG = setup_logger(__name__)


class DatasetError(ValueError):
    """Custom exception for malformed dataset or detection files."""


class Origin(str, enum.Enum):
    """Where an annotation came from."""

    ORIGINAL = "original"
    PSEUDO = "pseudo"


class Domain(str, enum.Enum):
    """Which side of the transfer an image belongs to."""

    SOURCE = "source"
    TARGET = "target"


class Split(str, enum.Enum):
    """Dataset splits used by the transfer loop."""

    SOURCE_TRAIN = "source_train"
    TARGET_TRAIN = "target_train"
    TARGET_TEST = "target_test"


class Annotation(pydantic.BaseModel):
    """A box-level label. Pseudo annotations carry their mining score."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    bbox: BBox
    category: int = pydantic.Field(ge=0)
    origin: Origin = Origin.ORIGINAL
    score: Optional[float] = None

    @pydantic.model_validator(mode="after")
    def _check_score(self) -> "Annotation":
        if self.origin is Origin.PSEUDO:
            if self.score is None or not 0.0 < self.score <= 1.0:
                raise ValueError(f"pseudo annotation needs score in (0, 1], got {self.score}")
        elif self.score is not None:
            raise ValueError("original annotation must not carry a score")
        return self


class Detection(pydantic.BaseModel):
    """A scored, categorized box produced by a detector."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    bbox: BBox
    category: int = pydantic.Field(ge=0)
    score: float = pydantic.Field(ge=0.0, le=1.0)


class ImageView(pydantic.BaseModel):
    """What training and mining code may read about an image."""

    model_config = pydantic.ConfigDict(frozen=True)

    id: str
    domain: Domain
    width: float
    height: float
    labels: frozenset[int]
    annotations: tuple[Annotation, ...]

    def original_boxes(self) -> list[BBox]:
        """Boxes of the original (non-mined) annotations."""
        return [a.bbox for a in self.annotations if a.origin is Origin.ORIGINAL]


class ImageRecord(pydantic.BaseModel):
    """
    One image of a dataset.

    **Attributes:**
    - `labels`: image-level labels (target images).
    - `annotations`: box-level labels, original or mined.
    - `hidden_gt`: complete simulator truth, for evaluation only.
    """

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    id: str = pydantic.Field(min_length=1)
    domain: Domain
    width: float = pydantic.Field(gt=0)
    height: float = pydantic.Field(gt=0)
    labels: list[int] = pydantic.Field(default_factory=list)
    annotations: list[Annotation] = pydantic.Field(default_factory=list)
    hidden_gt: list[Annotation] = pydantic.Field(default_factory=list)

    @pydantic.model_validator(mode="after")
    def _check_bounds(self) -> "ImageRecord":
        for field, annos in (("annotations", self.annotations), ("hidden_gt", self.hidden_gt)):
            for k, anno in enumerate(annos):
                if not anno.bbox.inside(self.width, self.height):
                    raise ValueError(
                        f"image {self.id!r}: {field}[{k}] box {anno.bbox.as_tuple()} "
                        f"outside {self.width}x{self.height}"
                    )
        return self

    def view(self) -> ImageView:
        """Project away `hidden_gt`."""
        return ImageView(
            id=self.id,
            domain=self.domain,
            width=self.width,
            height=self.height,
            labels=frozenset(self.labels),
            annotations=tuple(self.annotations),
        )


class Dataset(pydantic.BaseModel):
    """A split: category names plus images with unique ids."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    categories: list[str]
    split: Split
    images: list[ImageRecord] = pydantic.Field(default_factory=list)

    @pydantic.model_validator(mode="after")
    def _check_invariants(self) -> "Dataset":
        n_cats = len(self.categories)
        seen: set[str] = set()
        for img in self.images:
            if img.id in seen:
                raise ValueError(f"image {img.id!r}: duplicate image id")
            seen.add(img.id)
            for cat in [*img.labels, *(a.category for a in img.annotations),
                        *(a.category for a in img.hidden_gt)]:
                if cat >= n_cats:
                    raise ValueError(
                        f"image {img.id!r}: category {cat} outside [0, {n_cats})"
                    )
            if self.split is Split.TARGET_TRAIN and set(img.labels) != {
                a.category for a in img.hidden_gt
            }:
                raise ValueError(
                    f"image {img.id!r}: labels {sorted(img.labels)} do not match "
                    "the categories of its objects"
                )
        return self

    def views(self) -> list[ImageView]:
        """Training-visible projections of every image, in dataset order."""
        return [img.view() for img in self.images]

    def by_id(self) -> dict[str, ImageRecord]:
        """Images keyed by id."""
        return {img.id: img for img in self.images}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        """A dataset restricted to `ids`, keeping the original image order."""
        keep = set(ids)
        return self.model_copy(update={"images": [i for i in self.images if i.id in keep]})


def _validation_message(path: Path, err: pydantic.ValidationError) -> str:
    problems = "; ".join(
        f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()
    )
    return f"{path}: {problems}"


def _read_json(path: Path) -> object:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Failed to read '{path}': {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def _write_json(payload: object, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    """
    Load and fully validate a dataset file.

    **Raises:**
        - `DatasetError`: With `path:line:col` for JSON syntax errors, the
          field location for schema errors, and the image id for invariant
          violations.
    """
    path = Path(path)
    try:
        ds = Dataset.model_validate(_read_json(path))
    except pydantic.ValidationError as e:
        raise DatasetError(_validation_message(path, e)) from e
    LOG.debug("Loaded %s: %d images (%s)", path, len(ds.images), ds.split.value)
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset as JSON (`score` omitted on original annotations)."""
    _write_json(ds.model_dump(mode="json", exclude_none=True), Path(path))


def save_detections(dets: Mapping[str, Sequence[Detection]], path: str | Path) -> None:
    """
    Write detections as a flat list of `{image_id, bbox, category, score}`.

    Images are written in sorted id order; detections keep their order.
    """
    rows = [
        {"image_id": image_id, **det.model_dump(mode="json")}
        for image_id in sorted(dets)
        for det in dets[image_id]
    ]
    _write_json(rows, Path(path))


class _DetectionRow(Detection):
    image_id: str


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    """
    Read a detections file into per-image lists (file order preserved).

    **Raises:**
        - `DatasetError`: On syntax or schema errors, naming the row index.
    """
    path = Path(path)
    payload = _read_json(path)
    try:
        rows = pydantic.TypeAdapter(list[_DetectionRow]).validate_python(payload)
    except pydantic.ValidationError as e:
        raise DatasetError(_validation_message(path, e)) from e
    out: dict[str, list[Detection]] = {}
    for row in rows:
        out.setdefault(row.image_id, []).append(
            Detection(bbox=row.bbox, category=row.category, score=row.score)
        )
    return out


def save_mined(mined: Mapping[str, Sequence[Annotation]], path: str | Path) -> None:
    """Audit dump of mined boxes: the detections schema plus `origin`."""
    rows = [
        {"image_id": image_id, **anno.model_dump(mode="json")}
        for image_id in sorted(mined)
        for anno in mined[image_id]
    ]
    _write_json(rows, Path(path))


def augment(ds: Dataset, mined: Mapping[str, Sequence[Annotation]]) -> Dataset:
    """
    Return a copy of `ds` whose annotations are the originals plus `mined`.

    Mined boxes are appended with `origin=pseudo`; existing annotations and
    `ds` itself are untouched.

    **Raises:**
        - `DatasetError`: If `mined` names an image that is not in `ds`.
    """
    known = {img.id for img in ds.images}
    unknown = sorted(set(mined) - known)
    if unknown:
        raise DatasetError(f"augment: unknown image ids {unknown[:5]}")

    images = []
    for img in ds.images:
        extra = mined.get(img.id)
        if not extra:
            images.append(img)
            continue
        pseudo = [
            a
            if a.origin is Origin.PSEUDO
            else Annotation(bbox=a.bbox, category=a.category, origin=Origin.PSEUDO, score=a.score)
            for a in extra
        ]
        images.append(img.model_copy(update={"annotations": [*img.annotations, *pseudo]}))
    return ds.model_copy(update={"images": images})
