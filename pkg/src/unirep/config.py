"""Run configuration documents.

A config is either JSON::

    {"data": {"noise": 0.3}, "model": {"group_count": 8}, "train": {"epochs": 30}}

or ``key = value`` lines with dotted section names::

    # comment
    data.noise = 0.3
    train.epochs = 30

Values in the key/value form are parsed as JSON when possible, otherwise
kept as strings. Unknown sections or fields, wrong types and values that
fail validation raise :class:`ConfigError` naming the offending field (and
line, when there is one).
"""
from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields, replace

from .encoder import EncoderConfig
from .evaluation import DEFAULT_FARS, DEFAULT_FPIRS, DEFAULT_RANKS
from .synthdata import DatasetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None, line: int | None = None):
        where = ""
        if line is not None:
            where += f"line {line}: "
        if field_name is not None:
            where += f"{field_name}: "
        super().__init__(where + message)
        self.field_name = field_name
        self.line = line


@dataclass(frozen=True)
class EvalConfig:
    far_targets: tuple = DEFAULT_FARS
    ranks: tuple = DEFAULT_RANKS
    fpir_targets: tuple = DEFAULT_FPIRS
    finetune_pairs: int = 1000
    finetune_epochs: int = 100
    finetune_lr: float = 0.5

    def __post_init__(self):
        for name in ("far_targets", "ranks", "fpir_targets"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if any(not 0.0 < f <= 1.0 for f in self.far_targets + self.fpir_targets):
            raise ValueError("rate targets must lie in (0, 1]")
        if any(int(k) != k or k < 1 for k in self.ranks):
            raise ValueError("ranks must be positive integers")
        if self.finetune_pairs < 1 or self.finetune_epochs < 0 or self.finetune_lr <= 0:
            raise ValueError("finetune settings must be positive")

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


SECTIONS = {"data": DatasetConfig, "model": EncoderConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass(frozen=True)
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))


def _type_ok(value, annotation) -> bool:
    ann = str(annotation)
    if value is None:
        return "None" in ann
    if "bool" in ann and "float" not in ann and "int" not in ann:
        return isinstance(value, bool)
    if ann.startswith("float"):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if ann.startswith("int"):
        return isinstance(value, int) and not isinstance(value, bool)
    if ann.startswith("str"):
        return isinstance(value, str)
    if ann.startswith("tuple"):
        return isinstance(value, (list, tuple))
    return True


def _build(section: str, values: dict, lines: dict | None = None):
    cls = SECTIONS[section]
    known = {f.name: f for f in fields(cls)}
    lines = lines or {}
    for key, value in values.items():
        name = f"{section}.{key}"
        if key not in known:
            raise ConfigError("unknown field", name, lines.get(key))
        if not _type_ok(value, known[key].type):
            raise ConfigError(f"expected {known[key].type}, got {value!r}", name, lines.get(key))
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        culprit = next((k for k in values if k in msg), None)
        name = f"{section}.{culprit}" if culprit else section
        raise ConfigError(msg, name, lines.get(culprit)) from None


def from_dict(doc: dict, lines: dict | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of sections")
    lines = lines or {}
    built = {}
    for section, values in doc.items():
        if section not in SECTIONS:
            raise ConfigError("unknown section", section, lines.get(section, {}).get("__section__"))
        if not isinstance(values, dict):
            raise ConfigError("section must be a mapping", section)
        built[section] = _build(section, values, lines.get(section))
    return RunConfig(**built)


def parse_kv(text: str):
    doc, lines = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.field = value'", line=no)
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError("key must be 'section.field'", key, no)
        section, name = key.split(".", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        doc.setdefault(section, {})[name] = parsed
        sec_lines = lines.setdefault(section, {"__section__": no})
        sec_lines[name] = no
    return doc, lines


def _json_lines(text: str, doc: dict):
    """Best-effort line numbers for fields of a JSON document."""
    lines = {}
    for section, values in doc.items() if isinstance(doc, dict) else ():
        lines[section] = {}
        if not isinstance(values, dict):
            continue
        for key in values:
            needle = f'"{key}"'
            for no, raw in enumerate(text.splitlines(), start=1):
                if needle in raw:
                    lines[section][key] = no
                    break
    return lines


def parse_text(text: str) -> RunConfig:
    stripped = text.lstrip()
    if not stripped:
        return RunConfig()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, line=exc.lineno) from None
        return from_dict(doc, _json_lines(text, doc))
    doc, lines = parse_kv(text)
    return from_dict(doc, lines)


def load(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_text(text)


def _json_type(annotation, default):
    ann = str(annotation)
    if ann.startswith("tuple"):
        item = "number"
        if default and all(isinstance(v, str) for v in default):
            item = "string"
        elif default and all(isinstance(v, int) for v in default):
            item = "integer"
        return {"type": "array", "items": {"type": item}}
    base = {"float": "number", "int": "integer", "bool": "boolean", "str": "string"}
    for key, js in base.items():
        if ann.startswith(key):
            out = {"type": js}
            if "None" in ann:
                out = {"type": [js, "null"]}
            return out
    return {}


def schema() -> dict:
    """JSON schema of the config document, generated from the dataclasses."""
    props = {}
    for section, cls in SECTIONS.items():
        sec = {}
        for f in fields(cls):
            default = f.default if f.default is not MISSING else None
            entry = _json_type(f.type, default)
            entry["default"] = list(default) if isinstance(default, tuple) else default
            sec[f.name] = entry
        props[section] = {"type": "object", "additionalProperties": False, "properties": sec}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "unirep run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": props,
    }


def schema_json() -> str:
    return json.dumps(schema(), indent=2, sort_keys=True) + "\n"


__all__ = ["ConfigError", "EvalConfig", "RunConfig", "load", "parse_text", "from_dict", "schema", "schema_json"]
