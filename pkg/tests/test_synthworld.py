"""Tests for the seeded synthetic world."""

import numpy as np
import pydantic
import pytest

from builders import box
from progtrans.config import ConfigError
from progtrans.data_model import Origin, Split
from progtrans.geometry import iou
from progtrans.synthworld import (
    BLEND_MIN_IOU,
    ObjectEntity,
    WorldConfig,
    blend_weight,
    build_prototypes,
    candidate_boxes,
    generate_world,
    load_world_config,
    object_entities,
)


def test_generate_world_is_deterministic(tiny_world_cfg):
    assert generate_world(tiny_world_cfg) == generate_world(tiny_world_cfg)


def test_different_seed_differs(tiny_world_cfg):
    other = tiny_world_cfg.model_copy(update={"seed": tiny_world_cfg.seed + 1})
    assert generate_world(other)[0] != generate_world(tiny_world_cfg)[0]


def test_split_sizes_and_kinds(tiny_world, tiny_world_cfg):
    source, target_train, target_test = tiny_world
    assert (source.split, target_train.split, target_test.split) == (
        Split.SOURCE_TRAIN,
        Split.TARGET_TRAIN,
        Split.TARGET_TEST,
    )
    assert len(source.images) == tiny_world_cfg.n_source_images
    assert all(not img.annotations for img in target_train.images)
    assert all(img.labels for img in target_train.images)
    assert all(not img.labels and not img.annotations for img in target_test.images)


def test_source_annotations_are_source_categories(tiny_world, tiny_world_cfg):
    source = tiny_world[0]
    for img in source.images:
        assert all(a.category < tiny_world_cfg.n_source_cats for a in img.annotations)
        assert all(a.origin is Origin.ORIGINAL for a in img.annotations)


def test_leaked_objects_only_in_hidden_gt():
    cfg = WorldConfig(n_source_images=40, leak_rate=1.0, seed=3)
    source = generate_world(cfg)[0]
    for img in source.images:
        annotated = {(a.category, a.bbox) for a in img.annotations}
        leaked = [a for a in img.hidden_gt if (a.category, a.bbox) not in annotated]
        assert len(leaked) == 1
        assert leaked[0].category >= cfg.n_source_cats


def test_no_leak_when_rate_zero():
    cfg = WorldConfig(n_source_images=30, leak_rate=0.0, seed=3)
    for img in generate_world(cfg)[0].images:
        assert len(img.hidden_gt) == len(img.annotations)


def test_target_objects_are_target_categories(tiny_world, tiny_world_cfg):
    for img in tiny_world[1].images + tiny_world[2].images:
        assert all(a.category in tiny_world_cfg.target_category_ids for a in img.hidden_gt)


def test_prototype_affinity_is_exact():
    cfg = WorldConfig(prototype_affinity=0.8, seed=11)
    protos = build_prototypes(cfg)
    np.testing.assert_allclose(np.linalg.norm(protos.source, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(protos.target, axis=1), 1.0, atol=1e-12)
    for j, k in enumerate(protos.pairing):
        assert protos.target[j] @ protos.source[k] == pytest.approx(0.8, abs=1e-12)
    gram = protos.source @ protos.source.T
    np.testing.assert_allclose(gram, np.eye(cfg.n_source_cats), atol=1e-12)


def test_too_many_categories_for_dimension():
    with pytest.raises(pydantic.ValidationError):
        WorldConfig(feature_dim=4, n_source_cats=3, n_target_cats=2)


def test_blend_weight_threshold():
    objects = [ObjectEntity(box(0, 0, 10, 10), 0, np.zeros(2))]
    alpha, k = blend_weight(box(0, 0, 10, 10), objects)
    assert (alpha, k) == (1.0, 0)
    alpha, k = blend_weight(box(50, 50, 60, 60), objects)
    assert (alpha, k) == (0.0, None)
    far = box(0, 0, 10, 2.5)  # IoU 0.25
    assert iou(far, objects[0].bbox) < BLEND_MIN_IOU
    assert blend_weight(far, objects) == (0.0, None)


def test_candidates_include_true_boxes_and_blend(tiny_world, tiny_world_cfg):
    img = tiny_world[1].images[0]
    cands = candidate_boxes(img, tiny_world_cfg)
    objects = object_entities(img, tiny_world_cfg)
    boxes = [c.bbox for c in cands]
    for obj in objects:
        assert obj.bbox in boxes
    per_object = 1 + tiny_world_cfg.jitter_copies + tiny_world_cfg.part_copies
    assert len(cands) <= len(objects) * per_object + tiny_world_cfg.distractors_per_image
    for c in cands:
        assert c.bbox.inside(img.width, img.height)
        assert c.feature.shape == (tiny_world_cfg.feature_dim,)


def test_true_box_feature_is_object_feature():
    cfg = WorldConfig(n_target_train_images=3, background_sigma=0.3, seed=5)
    img = generate_world(cfg)[1].images[0]
    cands = candidate_boxes(img, cfg)
    for obj in object_entities(img, cfg):
        cand = next(c for c in cands if c.bbox == obj.bbox)
        np.testing.assert_allclose(cand.feature, obj.feature, atol=1e-12)


def test_texture_is_orthogonal_to_prototypes():
    protos = build_prototypes(WorldConfig(seed=11))
    assert np.linalg.norm(protos.texture) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(protos.source @ protos.texture, 0.0, atol=1e-12)
    np.testing.assert_allclose(protos.target @ protos.texture, 0.0, atol=1e-12)


def parts_world() -> WorldConfig:
    return WorldConfig(
        n_target_train_images=4,
        jitter_copies=0,
        distractors_per_image=0,
        background_sigma=0.0,
        feature_noise_sigma=0.0,
        seed=5,
    )


def test_parts_lie_inside_their_object_below_match_iou():
    cfg = parts_world()
    for img in generate_world(cfg)[1].images:
        cands = candidate_boxes(img, cfg)
        objects = object_entities(img, cfg)
        assert len(cands) == len(objects) * (1 + cfg.part_copies)
        for k, obj in enumerate(objects):
            first = k * (1 + cfg.part_copies)
            assert cands[first].bbox == obj.bbox
            for cand in cands[first + 1 : first + 1 + cfg.part_copies]:
                part = cand.bbox
                assert obj.bbox.x1 <= part.x1 < part.x2 <= obj.bbox.x2 + 1e-9
                assert obj.bbox.y1 <= part.y1 < part.y2 <= obj.bbox.y2 + 1e-9
                assert cfg.part_min_frac**2 - 1e-9 <= iou(part, obj.bbox) < 0.5


def test_parts_amplify_category_evidence_and_texture():
    cfg = parts_world()
    protos = build_prototypes(cfg)
    img = generate_world(cfg)[1].images[0]
    cands = candidate_boxes(img, cfg)
    obj = object_entities(img, cfg)[0]
    proto = protos.target[obj.category - cfg.n_source_cats]
    assert cands[0].feature @ proto == pytest.approx(1.0, abs=1e-9)
    assert cands[0].feature @ protos.texture == pytest.approx(cfg.object_texture, abs=1e-9)
    for cand in cands[1 : 1 + cfg.part_copies]:
        assert cand.feature @ proto == pytest.approx(cfg.part_gain, abs=1e-9)
        assert cand.feature @ protos.texture == pytest.approx(cfg.part_texture, abs=1e-9)


def test_parts_must_stay_below_half_the_object():
    with pytest.raises(pydantic.ValidationError, match="part_max_frac"):
        WorldConfig(part_max_frac=0.75)
    with pytest.raises(pydantic.ValidationError):
        WorldConfig(part_min_frac=0.6, part_max_frac=0.5)


def test_leak_count_is_binomial():
    cfg = WorldConfig(n_source_images=200, leak_rate=0.5, seed=13)
    leaked = sum(
        len(img.hidden_gt) > len(img.annotations) for img in generate_world(cfg)[0].images
    )
    assert abs(leaked - 100) <= 3.0 * np.sqrt(200 * 0.5 * 0.5)


def test_candidates_are_reproducible(tiny_world, tiny_world_cfg):
    img = tiny_world[0].images[2]
    a = candidate_boxes(img, tiny_world_cfg)
    b = candidate_boxes(img, tiny_world_cfg)
    assert [c.bbox for c in a] == [c.bbox for c in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.feature, y.feature)


def test_pool_caches_and_rejects_unknown(tiny_pool, tiny_world):
    image_id = tiny_world[0].images[0].id
    assert tiny_pool.candidates(image_id) is tiny_pool.candidates(image_id)
    with pytest.raises(KeyError):
        tiny_pool.candidates("nope")


def test_load_world_config(tmp_path):
    path = tmp_path / "world.cfg"
    path.write_text("# tiny\nn_source_images = 5\nleak_rate = 0.5\nseed = 9\n")
    cfg = load_world_config(path)
    assert (cfg.n_source_images, cfg.leak_rate, cfg.seed) == (5, 0.5, 9)


def test_load_world_config_unknown_key(tmp_path):
    path = tmp_path / "world.cfg"
    path.write_text("leak = 0.5\n")
    with pytest.raises(ConfigError, match="leak"):
        load_world_config(path)
