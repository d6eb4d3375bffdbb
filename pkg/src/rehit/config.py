"""Run configuration: TOML file with ``[model]``, ``[train]`` and ``[paths]`` tables.

Example::

    mode = "fast"

    [model]
    base_channels = 8
    bins = 16

    [train]
    iters = 400
    crop = 32

    [paths]
    manifest = "data/manifest.tsv"
    out_dir = "runs/overfit"

Relative paths resolve against the config file's directory.  Unknown keys
anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    manifest: Path | None = None
    checkpoint: Path | None = None
    out_dir: Path = Path("runs")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    mode: str = "fast"


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "paths": PathsConfig}


def _build(cls, table: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    values = dict(table)
    for key in ("heads", "drdb_dilations"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with a TOML literal value; bare words become strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    dotted, raw = text.split("=", 1)
    path = dotted.strip().split(".")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    top = sorted(set(data) - set(_SECTIONS) - {"mode"})
    if top:
        raise ConfigError(f"unknown top-level key(s): {', '.join(top)}")
    mode = data.get("mode", "fast")
    if mode not in ("fast", "verify"):
        raise ConfigError(f"mode must be 'fast' or 'verify', got {mode!r}")
    for name in _SECTIONS:
        if name in data and not isinstance(data[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    paths = dict(data.get("paths", {}))
    for key, value in paths.items():
        if not isinstance(value, str):
            raise ConfigError(f"[paths] {key} must be a string")
        p = Path(value)
        paths[key] = p if p.is_absolute() else base_dir / p
    return RunConfig(model=_build(ModelConfig, data.get("model", {}), "model"),
                     train=_build(TrainConfig, data.get("train", {}), "train"),
                     paths=_build(PathsConfig, paths, "paths"), mode=mode)


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Read ``path`` (or start from defaults) and apply ``--set`` overrides."""
    data: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        base = path.parent
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {k} is not a table")
        node[keys[-1]] = value
    return config_from_dict(data, base)
