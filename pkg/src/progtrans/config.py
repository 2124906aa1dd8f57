"""Flat key-value configuration files"""

from pathlib import Path
from typing import Any, Mapping, Type, TypeVar

import pydantic

from progtrans.logger import setup_logger

LOG = setup_logger(__name__)

ModelT = TypeVar("ModelT", bound=pydantic.BaseModel)

COMMENT: str = "#"
SEPARATOR: str = "="


class ConfigError(ValueError):
    """Custom exception for unreadable or invalid configuration."""


def parse_flat_config(text: str, source: str = "<string>") -> dict[str, str]:
    """
    Parse `key = value` lines into a dictionary of raw strings.

    Blank lines and lines starting with `#` are ignored; trailing `#`
    comments are stripped.

    **Parameters:**
        - `text`: The configuration text.
        - `source`: Name used in error messages.

    **Returns:**
        A mapping from key to the raw (unconverted) value.

    **Raises:**
        - `ConfigError`: On a line without `=`, an empty key or a duplicate key.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(COMMENT, 1)[0].strip()
        if not line:
            continue
        if SEPARATOR not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split(SEPARATOR, 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def read_flat_config(path: str | Path) -> dict[str, str]:
    """
    Read a flat key-value configuration file.

    **Parameters:**
        - `path`: Path to the file.

    **Returns:**
        A mapping from key to raw string value.

    **Raises:**
        - `ConfigError`: If the file cannot be read or parsed.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Failed to read config '{path}': {e}") from e
    LOG.debug("Read config %s", path)
    return parse_flat_config(text, source=str(path))


def build_model(model: Type[ModelT], values: Mapping[str, Any], source: str) -> ModelT:
    """
    Validate raw values into a pydantic config model.

    Unknown keys are rejected because every config model forbids extras.

    **Raises:**
        - `ConfigError`: Naming the offending keys.
    """
    try:
        return model.model_validate(dict(values))
    except pydantic.ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"{source}: invalid {model.__name__}: {problems}") from e


def load_model(model: Type[ModelT], path: str | Path) -> ModelT:
    """Read a flat config file straight into `model`."""
    return build_model(model, read_flat_config(path), str(path))


def dump_flat_config(model: pydantic.BaseModel) -> str:
    """Render a config model back to flat `key = value` text."""
    lines = []
    for key, value in model.model_dump(by_alias=True, exclude_none=True).items():
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
