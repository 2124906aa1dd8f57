"""Small builders for hand-written fixtures."""

from progtrans.data_model import Annotation, Dataset, Domain, ImageRecord, Split
from progtrans.geometry import BBox

TINY_WORLD = {
    "n_source_images": 12,
    "n_target_train_images": 8,
    "n_target_test_images": 8,
    "distractors_per_image": 6,
    "jitter_copies": 2,
    "seed": 7,
}


def box(x1, y1, x2, y2) -> BBox:
    return BBox.of(x1, y1, x2, y2)


def source_image(image_id="s0", annotations=(), hidden=()) -> ImageRecord:
    return ImageRecord(
        id=image_id,
        domain=Domain.SOURCE,
        width=100.0,
        height=100.0,
        annotations=list(annotations),
        hidden_gt=list(hidden),
    )


def target_image(image_id="t0", hidden=()) -> ImageRecord:
    hidden = list(hidden)
    return ImageRecord(
        id=image_id,
        domain=Domain.TARGET,
        width=100.0,
        height=100.0,
        labels=sorted({a.category for a in hidden}),
        hidden_gt=hidden,
    )


def original(bbox: BBox, category: int) -> Annotation:
    return Annotation(bbox=bbox, category=category)


def make_dataset(split: Split, images, n_categories: int = 4) -> Dataset:
    return Dataset(
        categories=[f"c{k}" for k in range(n_categories)], split=split, images=list(images)
    )
