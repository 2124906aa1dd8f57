"""Tests for flat key-value configuration files."""

import pydantic
import pytest

from progtrans.config import (
    ConfigError,
    build_model,
    dump_flat_config,
    load_model,
    parse_flat_config,
    read_flat_config,
)


class Knobs(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid")

    alpha: float = pydantic.Field(0.5, gt=0.0, le=1.0)
    steps: int = 10
    warm: bool = True


def test_parse_ignores_comments_and_blanks():
    text = "# header\n\nalpha = 0.25   # trailing\n  steps=3\n"
    assert parse_flat_config(text) == {"alpha": "0.25", "steps": "3"}


@pytest.mark.parametrize(
    "text, message",
    [
        ("alpha 0.5\n", "cfg:1"),
        ("= 3\n", "empty key"),
        ("steps = 1\nsteps = 2\n", "cfg:2: duplicate"),
    ],
)
def test_parse_errors_name_the_line(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_flat_config(text, source="cfg")


def test_build_model_converts_strings():
    knobs = build_model(Knobs, {"alpha": "0.75", "steps": "4", "warm": "false"}, "cfg")
    assert knobs == Knobs(alpha=0.75, steps=4, warm=False)


def test_build_model_rejects_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        build_model(Knobs, {"bogus": "1"}, "cfg")


def test_build_model_rejects_out_of_range():
    with pytest.raises(ConfigError, match="alpha"):
        build_model(Knobs, {"alpha": "2"}, "cfg")


def test_config_error_is_value_error():
    assert issubclass(ConfigError, ValueError)


def test_read_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="Failed to read"):
        read_flat_config(tmp_path / "missing.cfg")


def test_dump_then_load(tmp_path):
    knobs = Knobs(alpha=0.125, steps=7, warm=False)
    text = dump_flat_config(knobs)
    assert "warm = false" in text
    path = tmp_path / "knobs.cfg"
    path.write_text(text)
    assert load_model(Knobs, path) == knobs
