"""Metadata schema, records, normalization, imputation and token encoding.

Every attribute owns a disjoint slot in a width-``f`` feature layout:

* numeric attributes: ``[z-scored value, presence]`` (2 columns)
* categorical attributes: one-hot over the categories, then ``presence``

Encoding a record yields ``K`` tokens (one per attribute), each zero outside
its own slot, so a single shared embedding matrix still sees which attribute
a token came from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, EncodingError, FormatError
from .fmri import TokenSequence

UNKNOWN = "unknown"
STD_FLOOR = 1e-8


class MetadataTypeError(FormatError, TypeError):
    """A sidecar value has the wrong JSON type for its attribute."""

    def __init__(self, attribute, message):
        super().__init__(f"attribute {attribute!r}: {message}")
        self.attribute = attribute


@dataclass(frozen=True)
class Attribute:
    name: str
    tag: tuple  # (group, element)
    kind: str
    categories: tuple = ()
    offset: int = 0

    @property
    def width(self) -> int:
        return 2 if self.kind == "numeric" else len(self.categories) + 1

    @property
    def tag_str(self) -> str:
        return f"{self.tag[0]:04X},{self.tag[1]:04X}"


def _parse_tag(raw) -> tuple:
    if isinstance(raw, (list, tuple)) and len(raw) == 2:
        return int(raw[0]), int(raw[1])
    try:
        group, element = str(raw).strip("() ").split(",")
        return int(group, 16), int(element, 16)
    except ValueError as exc:
        raise ConfigError(f"cannot parse DICOM tag {raw!r}") from exc


class MetadataSchema:
    """Ordered attribute list with the slot layout derived from it."""

    def __init__(self, attributes: Iterable[Mapping | Attribute]):
        attrs, offset, seen = [], 0, set()
        for spec in attributes:
            if isinstance(spec, Attribute):
                spec = {"name": spec.name, "tag": spec.tag, "kind": spec.kind, "categories": spec.categories}
            name, kind = spec["name"], spec.get("kind")
            if name in seen:
                raise ConfigError(f"duplicate attribute {name!r}")
            seen.add(name)
            if kind == "numeric":
                categories = ()
            elif kind == "categorical":
                categories = tuple(spec.get("categories") or ())
                if len(set(categories)) != len(categories):
                    raise ConfigError(f"duplicate categories for {name!r}")
                if UNKNOWN not in categories:
                    categories += (UNKNOWN,)
            else:
                raise ConfigError(f"attribute {name!r} has unknown kind {kind!r}")
            attr = Attribute(name, _parse_tag(spec["tag"]), kind, categories, offset)
            offset += attr.width
            attrs.append(attr)
        if not attrs:
            raise ConfigError("a metadata schema needs at least one attribute")
        self.attributes = tuple(attrs)
        self.total_width = offset
        self._by_name = {a.name: a for a in attrs}

    def __len__(self):
        return len(self.attributes)

    def __iter__(self):
        return iter(self.attributes)

    def __getitem__(self, name) -> Attribute:
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    def __eq__(self, other):
        return isinstance(other, MetadataSchema) and self.attributes == other.attributes

    @property
    def names(self) -> tuple:
        return tuple(a.name for a in self.attributes)

    @property
    def numeric(self) -> tuple:
        return tuple(a for a in self.attributes if a.kind == "numeric")

    def to_dict(self) -> dict:
        out = []
        for a in self.attributes:
            entry = {"name": a.name, "tag": a.tag_str, "kind": a.kind}
            if a.kind == "categorical":
                entry["categories"] = list(a.categories)
            out.append(entry)
        return {"attributes": out}

    @classmethod
    def from_dict(cls, obj) -> MetadataSchema:
        if not isinstance(obj, Mapping) or "attributes" not in obj:
            raise ConfigError("schema JSON must be an object with an 'attributes' list")
        return cls(obj["attributes"])

    @classmethod
    def load(cls, path) -> MetadataSchema:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from exc


def default_schema() -> MetadataSchema:
    text = resources.files("fmrifuse").joinpath("default_schema.json").read_text()
    return MetadataSchema.from_dict(json.loads(text))


@dataclass(frozen=True)
class MetadataRecord:
    values: Mapping  # attribute name -> float | str | None (missing)
    source: str = "json"
    imputed: frozenset = frozenset()
    warnings: tuple = ()

    @property
    def domain_hint(self) -> str | None:
        value = self.values.get("manufacturer")
        return value if isinstance(value, str) and value and value != UNKNOWN else None

    def is_observed(self, name) -> bool:
        return self.values.get(name) is not None and name not in self.imputed

    def to_dict(self) -> dict:
        return {
            "values": dict(self.values),
            "source": self.source,
            "imputed": sorted(self.imputed),
            "domain_hint": self.domain_hint,
            "warnings": list(self.warnings),
        }


def make_record(schema: MetadataSchema, values: Mapping, source="json", warnings=()) -> MetadataRecord:
    """Record with one entry per schema attribute; unlisted ones are missing."""
    return MetadataRecord({a.name: values.get(a.name) for a in schema}, source, frozenset(), tuple(warnings))


def parse_json_meta(text: str, schema: MetadataSchema | None = None) -> MetadataRecord:
    schema = schema or default_schema()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed metadata JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(obj, dict):
        raise FormatError("metadata JSON must be an object")
    values = {}
    for attr in schema:
        raw = obj.get(attr.name)
        if raw is None:
            continue
        if attr.kind == "numeric":
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise MetadataTypeError(attr.name, f"expected a number, got {type(raw).__name__}")
            if not math.isfinite(raw):
                raise MetadataTypeError(attr.name, "value is not finite")
            values[attr.name] = float(raw)
        else:
            if not isinstance(raw, str):
                raise MetadataTypeError(attr.name, f"expected a string, got {type(raw).__name__}")
            values[attr.name] = raw
    return make_record(schema, values, source="json")


@dataclass(frozen=True)
class NormStats:
    mean: Mapping = field(default_factory=dict)
    std: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: [self.mean[name], self.std[name]] for name in self.mean}

    @classmethod
    def from_dict(cls, obj) -> NormStats:
        return cls({k: float(v[0]) for k, v in obj.items()}, {k: float(v[1]) for k, v in obj.items()})


def fit_normalization(records: Iterable[MetadataRecord], schema: MetadataSchema) -> NormStats:
    """Per-attribute mean and population std over observed training values."""
    records = list(records)
    mean, std = {}, {}
    for attr in schema.numeric:
        observed = [float(r.values[attr.name]) for r in records if r.is_observed(attr.name)]
        if not observed:
            raise ConfigError(f"cannot fit normalization: {attr.name!r} is missing in every record")
        arr = np.asarray(observed)
        mean[attr.name] = float(arr.mean())
        std[attr.name] = max(float(arr.std()), STD_FLOOR)
    return NormStats(mean, std)


def impute_missing(record: MetadataRecord, stats: NormStats, schema: MetadataSchema) -> MetadataRecord:
    """Fill gaps with the training mean (numeric) or ``unknown`` (categorical)."""
    values, imputed = dict(record.values), set(record.imputed)
    for attr in schema:
        if values.get(attr.name) is not None:
            continue
        if attr.kind == "numeric":
            if attr.name not in stats.mean:
                raise ConfigError(f"no normalization stats for {attr.name!r}")
            values[attr.name] = stats.mean[attr.name]
        else:
            values[attr.name] = UNKNOWN
        imputed.add(attr.name)
    return MetadataRecord(values, record.source, frozenset(imputed), record.warnings)


def encode_record(record: MetadataRecord, stats: NormStats, schema: MetadataSchema) -> TokenSequence:
    tokens = np.zeros((len(schema), schema.total_width))
    for k, attr in enumerate(schema):
        value = record.values.get(attr.name)
        if value is None:
            raise EncodingError(f"attribute {attr.name!r} is missing; impute before encoding")
        presence = 0.0 if attr.name in record.imputed else 1.0
        row = tokens[k]
        if attr.kind == "numeric":
            row[attr.offset] = (float(value) - stats.mean[attr.name]) / stats.std[attr.name]
            row[attr.offset + 1] = presence
        else:
            if value not in attr.categories:
                raise EncodingError(f"attribute {attr.name!r} has value {value!r} outside its categories")
            row[attr.offset + attr.categories.index(value)] = 1.0
            row[attr.offset + attr.width - 1] = presence
    return TokenSequence(tokens, "metadata")
