"""TOML run configuration: defaults < file < command-line flags."""

from __future__ import annotations

import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w


class ConfigError(ValueError):
    pass


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dump_toml(doc: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(_clean(doc), fh)


def merge_dataclass(cls, section: dict | None, overrides: dict | None = None, name: str = ""):
    """Instantiate ``cls`` from a TOML section plus non-None overrides; unknown keys are rejected."""
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name or cls.__name__}]: {sorted(unknown)}")
    for k, v in (overrides or {}).items():
        if v is not None:
            section[k] = v
    for f in fields(cls):
        if f.name in section and isinstance(section[f.name], list):
            section[f.name] = tuple(section[f.name])
    return cls(**section)


class RunConfig:
    """Resolved configuration for one CLI invocation."""

    SECTIONS = ("model", "train", "bias_opt", "divides", "synth")

    def __init__(self, doc: dict | None = None):
        doc = dict(doc or {})
        top = {"seed", "output_dir"}
        unknown = set(doc) - set(self.SECTIONS) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        self.doc = doc
        self.seed = int(doc.get("seed", 0))
        self.output_dir = doc.get("output_dir")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        return cls(load_toml(path))

    def section(self, name: str) -> dict:
        return dict(self.doc.get(name, {}))

    def snapshot(self, path, **resolved) -> None:
        """Write the resolved configuration next to a run's outputs."""
        out = {"seed": self.seed}
        if self.output_dir:
            out["output_dir"] = str(self.output_dir)
        for k, v in resolved.items():
            out[k] = asdict(v) if is_dataclass(v) else v
        dump_toml(out, path)
