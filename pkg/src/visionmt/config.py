"""INI config files and merging with command-line overrides.

A config file has an optional [train] section whose keys are TrainConfig
fields, plus optional [eval] and [ablate] sections for the matching
subcommands. Values in the file win over command-line flags.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import fields
from pathlib import Path

from .trainer import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return raw  # TrainConfig parses comma lists itself
    return raw.strip()


def read_config(path: str | Path | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is None:
        return cp
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    cp.read(p)
    return cp


def train_values(cp: configparser.ConfigParser) -> dict:
    if not cp.has_section("train"):
        return {}
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for key, raw in cp.items("train"):
        if key not in known:
            raise ConfigError(f"unknown [train] key {key!r}")
        try:
            out[key] = _convert(raw, getattr(defaults, key))
        except ValueError as e:
            raise ConfigError(f"[train] {key}: {e}") from None
    return out


def merge(file_values: dict, cli_values: dict) -> dict:
    """File values override CLI values; conflicts are logged as warnings."""
    merged = {k: v for k, v in cli_values.items() if v is not None}
    for k, v in file_values.items():
        if k in merged and str(merged[k]) != str(v):
            log.warning("config file sets %s=%s, overriding command line %s", k, v, merged[k])
        merged[k] = v
    return merged


def build_train_config(cp: configparser.ConfigParser, cli_values: dict) -> TrainConfig:
    return TrainConfig(**merge(train_values(cp), cli_values))


def section_values(cp: configparser.ConfigParser, section: str) -> dict[str, str]:
    return dict(cp.items(section)) if cp.has_section(section) else {}
