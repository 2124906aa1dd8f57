"""Shared fixtures and the `--runslow` switch."""

import pytest

from builders import TINY_WORLD
from progtrans.pipeline import LoopConfig
from progtrans.synthworld import CandidatePool, WorldConfig, generate_world


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run seeded end-to-end checks on the default world",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_world_cfg() -> WorldConfig:
    return WorldConfig(**TINY_WORLD)


@pytest.fixture
def tiny_world(tiny_world_cfg):
    return generate_world(tiny_world_cfg)


@pytest.fixture
def tiny_pool(tiny_world_cfg, tiny_world) -> CandidatePool:
    return CandidatePool(tiny_world_cfg, tiny_world)


@pytest.fixture
def tiny_loop_cfg() -> LoopConfig:
    return LoopConfig(
        N=1,
        tau=0.5,
        ocud_steps=24,
        ocud_refine_steps=12,
        mil_steps=16,
        mil_refine_steps=8,
        seed=7,
        world_overrides=TINY_WORLD,
    )
