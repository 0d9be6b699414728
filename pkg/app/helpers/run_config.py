from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from pydantic import BaseModel, ValidationError

from app.models.config import RunConfig
from app.utilities.exceptions import ConfigError, IoFailure
from app.utilities.logger import logger

NULL_VALUES = {"", "none", "null"}
SEED_KEYS = ("camera.rng_seed", "lidar.rng_seed", "sim.rng_seed")


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    if value.lower() in NULL_VALUES:
        return None
    if "," in value:
        return [part.strip() for part in value.split(",")]
    return value


def _assign(tree: dict, key: str, value: Any):
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed key {key!r}")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"key {key!r} nests under a value")
        node = child
    node[parts[-1]] = value


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    """
    Splits `key=value` override strings.

    Raises:
        ConfigError: If an item has no `=`.
    """
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        overrides[key.strip()] = value
    return overrides


def read_config_file(path: str | Path) -> dict[str, str]:
    """
    Reads a flat `dotted.key = value` file; `#` starts a comment.

    Raises:
        IoFailure: If the file cannot be read.
        ConfigError: If a line is not a key/value pair.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise IoFailure(f"cannot read config {path}: {e}")
    entries = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: expected key = value")
        entries[key.strip()] = value
    return entries


def load_run_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None,
                    seed: Optional[int] = None) -> RunConfig:
    """
    Resolves the run configuration.

    Precedence is defaults, then the config file, then overrides, then the seed,
    which sets every rng_seed key.

    Args:
        path (Optional[str | Path]): Flat config file.
        overrides (Optional[Mapping[str, Any]]): Dotted keys to values; strings
            are parsed like file values.
        seed (Optional[int]): Seed of every generator.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: On unknown keys or invalid values.
        IoFailure: If the file cannot be read.
    """
    tree: dict = {}
    entries: dict[str, Any] = dict(read_config_file(path)) if path else {}
    entries.update(overrides or {})
    for key, value in entries.items():
        _assign(tree, key, _parse_value(value) if isinstance(value, str) else value)
    if seed is not None:
        for key in SEED_KEYS:
            _assign(tree, key, seed)
    try:
        config = RunConfig.model_validate(tree)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid configuration: {problems}")
    logger.debug(f"Resolved configuration with {len(entries)} explicit keys")
    return config


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def flatten(config: BaseModel, prefix: str = "") -> dict[str, Any]:
    """Dotted keys of every leaf value of a configuration model."""
    flat = {}
    for name in type(config).model_fields:
        value = getattr(config, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            flat.update(flatten(value, f"{key}."))
        else:
            flat[key] = value
    return flat


def dump_run_config(config: RunConfig) -> str:
    """Serialises a configuration in the flat file format it is read from."""
    return "\n".join(f"{key} = {_format(value)}" for key, value in flatten(config).items()) + "\n"
