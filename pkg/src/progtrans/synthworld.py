"""
Seeded synthetic world: source/target datasets with feature-vector objects.

Each category has a unit-norm prototype. Target prototypes are built to
have an exact cosine `prototype_affinity` with one randomly paired source
prototype, so a scorer trained on source objects partly fires on target
objects. A fraction `leak_rate` of source images also contains one target
object that is present in `hidden_gt` but never annotated.

Every object also carries a shared texture direction. Its parts (sub-boxes
covering less than half of it) show amplified category evidence and more
texture, so a scorer fed only with its own mined boxes can drift towards
parts. Exact source boxes label parts as background.

Proposal candidates are synthesized from the hidden objects, but training
code receives them only as `(bbox, feature)` pairs through a
`CandidateSource`.
"""

import dataclasses
import functools
import math
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Protocol, Sequence

import numpy as np
import pydantic

from progtrans import rng
from progtrans.config import load_model
from progtrans.data_model import Annotation, Dataset, Domain, ImageRecord, Split
from progtrans.geometry import BBox, iou
from progtrans.logger import setup_logger

LOG = setup_logger(__name__)

# Candidates overlapping an object less than this get a pure background feature.
BLEND_MIN_IOU: float = 0.3
_PLACEMENT_TRIES: int = 20
_PLACEMENT_MAX_IOU: float = 0.1


class WorldConfig(pydantic.BaseModel):
    """Parameters of the synthetic world. Every field is a config-file key."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    feature_dim: int = pydantic.Field(16, gt=0)
    n_source_cats: int = pydantic.Field(8, gt=0)
    n_target_cats: int = pydantic.Field(4, gt=0)
    prototype_affinity: float = pydantic.Field(0.8, ge=0.0, le=1.0)
    feature_noise_sigma: float = pydantic.Field(0.1, ge=0.0)
    background_sigma: float = pydantic.Field(0.15, ge=0.0)
    objects_per_image_min: int = pydantic.Field(1, ge=0)
    objects_per_image_max: int = pydantic.Field(3, ge=0)
    n_source_images: int = pydantic.Field(200, gt=0)
    n_target_train_images: int = pydantic.Field(100, gt=0)
    n_target_test_images: int = pydantic.Field(100, gt=0)
    leak_rate: float = pydantic.Field(0.3, ge=0.0, le=1.0)
    jitter_sigma: float = pydantic.Field(0.1, ge=0.0)
    jitter_copies: int = pydantic.Field(4, ge=0)
    distractors_per_image: int = pydantic.Field(24, ge=0)
    object_texture: float = pydantic.Field(1.0, ge=0.0)
    part_copies: int = pydantic.Field(2, ge=0)
    part_gain: float = pydantic.Field(1.3, ge=0.0)
    part_texture: float = pydantic.Field(1.5, ge=0.0)
    part_min_frac: float = pydantic.Field(0.45, gt=0.0, le=1.0)
    part_max_frac: float = pydantic.Field(0.65, gt=0.0, le=1.0)
    image_size: float = pydantic.Field(100.0, gt=0.0)
    min_box_frac: float = pydantic.Field(0.15, gt=0.0, le=1.0)
    max_box_frac: float = pydantic.Field(0.4, gt=0.0, le=1.0)
    seed: int = pydantic.Field(42, ge=0)

    @pydantic.model_validator(mode="after")
    def _check_ranges(self) -> "WorldConfig":
        if self.n_source_cats + self.n_target_cats + 1 > self.feature_dim:
            raise ValueError(
                "feature_dim must exceed n_source_cats + n_target_cats "
                "to build orthogonal prototypes and the texture direction"
            )
        if self.objects_per_image_min > self.objects_per_image_max:
            raise ValueError("objects_per_image_min exceeds objects_per_image_max")
        if self.min_box_frac > self.max_box_frac:
            raise ValueError("min_box_frac exceeds max_box_frac")
        if self.part_min_frac > self.part_max_frac:
            raise ValueError("part_min_frac exceeds part_max_frac")
        if self.part_max_frac**2 >= 0.5:
            raise ValueError("parts must cover less than half of their object (part_max_frac)")
        return self

    @property
    def source_category_ids(self) -> list[int]:
        """Global ids of source categories."""
        return list(range(self.n_source_cats))

    @property
    def target_category_ids(self) -> list[int]:
        """Global ids of target categories (after the source ids)."""
        return list(range(self.n_source_cats, self.n_source_cats + self.n_target_cats))

    def category_names(self) -> list[str]:
        """Names for every global category id."""
        return [f"src_{k}" for k in range(self.n_source_cats)] + [
            f"tgt_{k}" for k in range(self.n_target_cats)
        ]


def load_world_config(path: str | Path) -> WorldConfig:
    """Read a flat key-value world config file."""
    return load_model(WorldConfig, path)


class Prototypes(NamedTuple):
    """
    Unit-norm class prototypes; `pairing[j]` is the source paired with target j.
    `texture` is a unit vector orthogonal to every source prototype and to
    the target-specific components.
    """

    source: np.ndarray
    target: np.ndarray
    pairing: np.ndarray
    texture: np.ndarray


@dataclasses.dataclass(frozen=True)
class ObjectEntity:
    """A hidden object: box, category and its feature vector."""

    bbox: BBox
    category: int
    feature: np.ndarray


@dataclasses.dataclass(frozen=True)
class Candidate:
    """A proposal candidate as seen by training code."""

    bbox: BBox
    feature: np.ndarray


class CandidateSource(Protocol):  # pylint: disable=too-few-public-methods
    """Supplies the candidate boxes of an image by id."""

    def candidates(self, image_id: str) -> Sequence[Candidate]:
        """Candidates of `image_id`, in a fixed order."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@functools.lru_cache(maxsize=32)
def build_prototypes(cfg: WorldConfig) -> Prototypes:
    """
    Build prototypes with exact cross-domain affinity.

    An orthonormal basis is drawn (QR of a gaussian matrix). Source
    prototypes are its first basis vectors; target prototype `j` is
    `a * source[pairing[j]] + sqrt(1 - a^2) * e_j` with `e_j` a fresh basis
    vector, so its cosine with the paired source is exactly `a`. The last
    basis vector is the texture direction.
    """
    gen = rng.stream(cfg.seed, "world", "prototypes")
    n_s, n_t = cfg.n_source_cats, cfg.n_target_cats
    basis, _ = np.linalg.qr(gen.standard_normal((cfg.feature_dim, n_s + n_t + 1)))
    source = basis[:, :n_s].T.copy()
    pairing = gen.integers(0, n_s, size=n_t)
    a = cfg.prototype_affinity
    target = a * source[pairing] + math.sqrt(1.0 - a * a) * basis[:, n_s : n_s + n_t].T
    texture = basis[:, n_s + n_t].copy()
    return Prototypes(
        _readonly(source), _readonly(target), _readonly(pairing), _readonly(texture)
    )


def prototype_of(cfg: WorldConfig, category: int) -> np.ndarray:
    """Prototype of a global category id."""
    protos = build_prototypes(cfg)
    if category < cfg.n_source_cats:
        return protos.source[category]
    return protos.target[category - cfg.n_source_cats]


def _random_box(gen: np.random.Generator, cfg: WorldConfig) -> BBox:
    size = cfg.image_size
    w = gen.uniform(cfg.min_box_frac, cfg.max_box_frac) * size
    h = gen.uniform(cfg.min_box_frac, cfg.max_box_frac) * size
    x1 = gen.uniform(0.0, size - w)
    y1 = gen.uniform(0.0, size - h)
    return BBox.of(round(x1, 3), round(y1, 3), round(x1 + w, 3), round(y1 + h, 3))


def _place_objects(gen: np.random.Generator, cfg: WorldConfig, n: int) -> list[BBox]:
    boxes: list[BBox] = []
    for _ in range(n):
        box = _random_box(gen, cfg)
        for _ in range(_PLACEMENT_TRIES - 1):
            if all(iou(box, b) <= _PLACEMENT_MAX_IOU for b in boxes):
                break
            box = _random_box(gen, cfg)
        boxes.append(box)
    return boxes


def _make_image(cfg: WorldConfig, split: Split, index: int) -> ImageRecord:
    gen = rng.stream(cfg.seed, "world", split.value, index)
    n_obj = int(gen.integers(cfg.objects_per_image_min, cfg.objects_per_image_max + 1))
    cat_pool = cfg.source_category_ids if split is Split.SOURCE_TRAIN else cfg.target_category_ids
    cats = [int(c) for c in gen.choice(cat_pool, size=n_obj)]

    leaked = split is Split.SOURCE_TRAIN and gen.random() < cfg.leak_rate
    if leaked:
        cats.append(int(gen.choice(cfg.target_category_ids)))

    boxes = _place_objects(gen, cfg, len(cats))
    hidden = [Annotation(bbox=b, category=c) for b, c in zip(boxes, cats)]

    prefix = {Split.SOURCE_TRAIN: "src", Split.TARGET_TRAIN: "tgt", Split.TARGET_TEST: "test"}
    common = {
        "id": f"{prefix[split]}-{index:05d}",
        "width": cfg.image_size,
        "height": cfg.image_size,
        "hidden_gt": hidden,
    }
    if split is Split.SOURCE_TRAIN:
        return ImageRecord(domain=Domain.SOURCE, annotations=hidden[:n_obj], **common)
    if split is Split.TARGET_TRAIN:
        return ImageRecord(domain=Domain.TARGET, labels=sorted(set(cats)), **common)
    return ImageRecord(domain=Domain.TARGET, **common)


def generate_world(cfg: WorldConfig) -> tuple[Dataset, Dataset, Dataset]:
    """
    Generate `(source_train, target_train, target_test)`.

    Source images are annotated for source categories only; leaked target
    objects live in `hidden_gt` alone. Target train images carry image-level
    labels and no boxes; target test images carry `hidden_gt` only. Output
    is a pure function of `cfg`; each image draws from its own keyed stream.
    """
    names = cfg.category_names()
    sizes = {
        Split.SOURCE_TRAIN: cfg.n_source_images,
        Split.TARGET_TRAIN: cfg.n_target_train_images,
        Split.TARGET_TEST: cfg.n_target_test_images,
    }
    out = []
    for split, n in sizes.items():
        out.append(
            Dataset(
                categories=names,
                split=split,
                images=[_make_image(cfg, split, i) for i in range(n)],
            )
        )
    source, target_train, target_test = out
    LOG.info(
        "Generated world seed=%d: %d source, %d target-train, %d target-test images",
        cfg.seed,
        len(source.images),
        len(target_train.images),
        len(target_test.images),
    )
    return source, target_train, target_test


def object_entities(img: ImageRecord, cfg: WorldConfig) -> list[ObjectEntity]:
    """
    Hidden objects of `img` with their features (simulator side): the
    category prototype plus `object_texture` times the texture direction,
    plus gaussian noise.
    """
    texture = cfg.object_texture * build_prototypes(cfg).texture
    out = []
    for k, anno in enumerate(img.hidden_gt):
        gen = rng.stream(cfg.seed, "world", "object", img.id, k)
        noise = gen.normal(0.0, cfg.feature_noise_sigma, cfg.feature_dim)
        feature = _readonly(prototype_of(cfg, anno.category) + texture + noise)
        out.append(ObjectEntity(bbox=anno.bbox, category=anno.category, feature=feature))
    return out


def blend_weight(box: BBox, objects: Sequence[ObjectEntity]) -> tuple[float, Optional[int]]:
    """
    Weight of the nearest object's feature in a candidate's feature.

    **Returns:**
        `(alpha, index)`: `alpha` is the IoU with the nearest object (max IoU,
        lowest index on ties) when it is at least 0.3, else 0.0; `index` is
        that object's position or None when `alpha` is 0.
    """
    best, best_k = 0.0, None
    for k, obj in enumerate(objects):
        overlap = iou(box, obj.bbox)
        if overlap > best:
            best, best_k = overlap, k
    if best < BLEND_MIN_IOU:
        return 0.0, None
    return best, best_k


def _jitter(gen: np.random.Generator, box: BBox, cfg: WorldConfig) -> Optional[BBox]:
    dx = gen.normal(0.0, cfg.jitter_sigma * box.width, 2)
    dy = gen.normal(0.0, cfg.jitter_sigma * box.height, 2)
    size = cfg.image_size
    x1 = min(max(box.x1 + dx[0], 0.0), size)
    x2 = min(max(box.x2 + dx[1], 0.0), size)
    y1 = min(max(box.y1 + dy[0], 0.0), size)
    y2 = min(max(box.y2 + dy[1], 0.0), size)
    if x1 >= x2 or y1 >= y2:
        return None
    return BBox.of(x1, y1, x2, y2)


def _part(gen: np.random.Generator, box: BBox, cfg: WorldConfig) -> BBox:
    w = gen.uniform(cfg.part_min_frac, cfg.part_max_frac) * box.width
    h = gen.uniform(cfg.part_min_frac, cfg.part_max_frac) * box.height
    x1 = box.x1 + gen.uniform(0.0, box.width - w)
    y1 = box.y1 + gen.uniform(0.0, box.height - h)
    return BBox.of(x1, y1, min(x1 + w, box.x2), min(y1 + h, box.y2))


def part_feature(
    cfg: WorldConfig, obj: ObjectEntity, part: BBox, background: np.ndarray
) -> np.ndarray:
    """
    Feature of a part box of `obj`: `part_gain` times the category
    prototype, `part_texture` times the texture direction, and the
    background draw weighted by `1 - iou(part, obj)`.
    """
    protos = build_prototypes(cfg)
    return (
        cfg.part_gain * prototype_of(cfg, obj.category)
        + cfg.part_texture * protos.texture
        + (1.0 - iou(part, obj.bbox)) * background
    )


def candidate_boxes(img: ImageRecord, cfg: WorldConfig) -> list[Candidate]:
    """
    Synthesize the proposal candidates of one image.

    For each hidden object: its true box plus `jitter_copies` jittered
    copies (corners perturbed with std `jitter_sigma * box size`, clamped
    to the image; copies that collapse are dropped), then `part_copies`
    part boxes inside it. Then `distractors_per_image` random boxes. Every
    candidate's feature except the parts' is
    `alpha * nearest_object_feature + (1 - alpha) * background_draw`
    (see `blend_weight`); parts use `part_feature`.
    """
    gen = rng.stream(cfg.seed, "world", "candidates", img.id)
    objects = object_entities(img, cfg)

    boxes: list[tuple[BBox, Optional[int]]] = []
    for k, obj in enumerate(objects):
        boxes.append((obj.bbox, None))
        for _ in range(cfg.jitter_copies):
            jittered = _jitter(gen, obj.bbox, cfg)
            if jittered is not None:
                boxes.append((jittered, None))
        boxes.extend((_part(gen, obj.bbox, cfg), k) for _ in range(cfg.part_copies))
    boxes.extend((_random_box(gen, cfg), None) for _ in range(cfg.distractors_per_image))

    out = []
    for box, part_of in boxes:
        background = gen.normal(0.0, cfg.background_sigma, cfg.feature_dim)
        if part_of is not None:
            feature = part_feature(cfg, objects[part_of], box, background)
        else:
            alpha, k = blend_weight(box, objects)
            if k is None:
                feature = background
            else:
                feature = alpha * objects[k].feature + (1.0 - alpha) * background
        out.append(Candidate(bbox=box, feature=_readonly(feature)))
    return out


class CandidatePool:
    """
    Caching `CandidateSource` over the images of one or more datasets.

    Holds the simulator's view of the images; hands out only candidates.
    """

    def __init__(self, cfg: WorldConfig, datasets: Iterable[Dataset]) -> None:
        self.__cfg = cfg
        self.__records: dict[str, ImageRecord] = {}
        for ds in datasets:
            self.__records.update(ds.by_id())
        self.__cache: dict[str, list[Candidate]] = {}

    @property
    def config(self) -> WorldConfig:
        """World parameters behind the pool."""
        return self.__cfg

    def candidates(self, image_id: str) -> Sequence[Candidate]:
        """
        Candidates of `image_id`.

        **Raises:**
            - `KeyError`: If the image is unknown to the pool.
        """
        cached = self.__cache.get(image_id)
        if cached is None:
            cached = candidate_boxes(self.__records[image_id], self.__cfg)
            self.__cache[image_id] = cached
        return cached

    def objects(self, image_id: str) -> list[ObjectEntity]:
        """Hidden objects of `image_id` (evaluation only)."""
        return object_entities(self.__records[image_id], self.__cfg)
