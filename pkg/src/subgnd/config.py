"""Flat ``section.key = value`` run configuration and manifests.

Sections reuse the library's own config dataclasses, so defaults live in one
place. Unknown sections or keys raise :class:`ConfigError`.

Example file::

    # heterophilic run
    synth.kind = heterophilic_bipartite
    walk.rw_hops = 128
    model.eps = -1
    train.max_epochs = 100
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .graph import SyntheticSpec
from .model import ModelConfig
from .sampler import WalkConfig
from .trainer import SearchSpace, TrainConfig

MANIFEST_NAME = "run.manifest"


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad value or failed validation."""


@dataclass(frozen=True)
class DataSection:
    """Dataset files; when ``edges`` is unset the ``synth`` section generates the graph."""

    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    num_classes: int | None = None
    split: tuple = (0.48, 0.32, 0.20)
    split_seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    hidden_size: int = 32
    num_layers: int = 2
    eps: float = 0.0
    alter_pool: str = "mean"
    dropout: float = 0.0
    mlp_depth: int = 2
    variant: str = "subgnd"

    def build(self, input_dim, num_classes):
        return ModelConfig(input_dim=input_dim, num_classes=num_classes, **vars(self))


@dataclass(frozen=True)
class SearchSection(SearchSpace):
    """Search space plus the search's own seed and per-trial epoch cap (0 = train.max_epochs)."""

    seed: int = 0
    max_epochs: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.max_epochs < 0:
            raise ValueError("search.max_epochs must be >= 0")


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


SECTIONS = {
    "data": DataSection,
    "synth": SyntheticSpec,
    "walk": WalkConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "search": SearchSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = DataSection()
    synth: SyntheticSpec = SyntheticSpec()
    walk: WalkConfig = WalkConfig()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    search: SearchSection = SearchSection()
    output: OutputSection = OutputSection()

    def updated(self, assignments):
        """Copy with ``{"section.key": raw string}`` assignments applied and validated."""
        grouped = {}
        for dotted, raw in assignments.items():
            section, key = _split_key(dotted)
            grouped.setdefault(section, {})[key] = _convert(section, key, raw)
        changes = {}
        for section, values in grouped.items():
            try:
                changes[section] = replace(getattr(self, section), **values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from None
        cfg = replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.synth.validate()
            self.model.build(1, 2)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        split = self.data.split
        if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigError("data.split needs three non-negative fractions summing to 1")
        paths = [self.data.edges, self.data.features, self.data.labels]
        if any(p is not None for p in paths) and not all(p is not None for p in paths):
            raise ConfigError("data.edges, data.features and data.labels must be given together")

    def items(self):
        """``(section.key, value)`` for every setting, in declaration order."""
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self, extra_comments=()):
        lines = ["# subgnd run manifest: fully resolved settings"]
        lines += [f"# {c}" for c in extra_comments]
        lines += [f"{key} = {format_value(value)}" for key, value in self.items()]
        return "\n".join(lines) + "\n"


def _split_key(dotted):
    section, sep, key = dotted.strip().partition(".")
    if not sep or section not in SECTIONS:
        raise ConfigError(f"unknown config key {dotted.strip()!r}")
    if key not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"unknown config key {dotted.strip()!r}")
    return section, key


def _convert(section, key, raw):
    cls = SECTIONS[section]
    hint = typing.get_type_hints(cls)[key]
    default = next(f.default for f in fields(cls) if f.name == key)
    raw = raw.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = type(default[0]) if default else str
            return tuple(_scalar(elem, p) for p in parts)
        return _scalar(hint, raw)
    except ValueError:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None


def _scalar(kind, raw):
    if kind is int:
        value = float(raw)
        if not value.is_integer():
            raise ValueError(raw)
        return int(value)
    if kind is float:
        return float(raw)
    return raw


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text, source="<config>"):
    """``{"section.key": raw}`` from config text; later lines win."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        _split_key(key)
        out[key.strip()] = value
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``key=value`` override strings."""
    assignments = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        assignments.update(parse_text(text, str(path)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _split_key(key)
        assignments[key.strip()] = value
    return RunConfig().updated(assignments)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(config, directory, extra_comments=()):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    comments = list(extra_comments)
    for key in ("edges", "features", "labels"):
        path = getattr(config.data, key)
        if path is not None and Path(path).is_file():
            comments.append(f"sha256 data.{key} {file_digest(path)}")
    target = directory / MANIFEST_NAME
    target.write_text(config.to_text(comments), encoding="utf-8")
    return target
