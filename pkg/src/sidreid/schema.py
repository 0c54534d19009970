"""Attribute vocabulary, its five-group partition and semantic-ID enumeration.

A semantic ID (SID) is one combination of labels, one label per attribute,
inside a single group. SIDs are enumerated in mixed-radix order with the
first attribute as the most significant digit, which is the order produced
by ``itertools.product`` over the attributes' label lists.

Schema documents are YAML (or JSON, which YAML accepts)::

    version: market-v1
    groups:
      identity:
        - {name: age, labels: [young, adult, old]}
        - {name: gender, labels: [male, female]}
      carrying:
        - {name: backpack, labels: [absent, present]}
      ...

An attribute whose labels are exactly ``[absent, present]`` is binary and
contributes a single bit to the attribute vector; set ``binary: false`` to
force one-hot expansion, or ``binary: true`` on any two-label attribute to
make its second label the "on" bit.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

GROUPS = ("head", "upper_body", "lower_body", "identity", "carrying")

# short forms accepted in query text
GROUP_ALIASES = {
    "h": "head", "u": "upper_body", "upper": "upper_body", "l": "lower_body",
    "lower": "lower_body", "i": "identity", "id": "identity", "c": "carrying",
}

BINARY_LABELS = ("absent", "present")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Attribute:
    name: str
    labels: tuple[str, ...]
    binary: bool = False

    @property
    def width(self) -> int:
        """Number of coordinates this attribute occupies in an attribute vector."""
        return 1 if self.binary else len(self.labels)

    def encode(self, label_index: int) -> list[int]:
        if self.binary:
            return [label_index]
        bits = [0] * len(self.labels)
        bits[label_index] = 1
        return bits


@dataclass(frozen=True)
class SemanticId:
    group: str
    index: int
    label_choice: tuple[str, ...]

    def __str__(self):
        return f"{self.group}#{self.index}({','.join(self.label_choice)})"


@dataclass(frozen=True, eq=False)
class AttributeGroup:
    name: str
    attributes: tuple[Attribute, ...]

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)

    @property
    def radices(self) -> tuple[int, ...]:
        return tuple(len(a.labels) for a in self.attributes)

    @property
    def num_sids(self) -> int:
        return int(np.prod(self.radices, dtype=np.int64))

    @property
    def vector_length(self) -> int:
        return sum(a.width for a in self.attributes)

    @cached_property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @cached_property
    def attribute_matrix(self) -> np.ndarray:
        """(num_sids, vector_length) 0/1 matrix; row k is the attribute vector of SID k."""
        return np.array([attribute_vector(s, self) for s in enumerate_sids(self)], dtype=np.float64).reshape(
            self.num_sids, self.vector_length
        )

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"group {self.name!r} has no attribute {name!r}")

    def digits(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.num_sids:
            raise SchemaError(f"SID index {index} out of range for group {self.name!r} ({self.num_sids} SIDs)")
        out = []
        for radix in reversed(self.radices):
            index, r = divmod(index, radix)
            out.append(r)
        return tuple(reversed(out))

    def index_of_digits(self, digits: Sequence[int]) -> int:
        index = 0
        for d, radix in zip(digits, self.radices):
            index = index * radix + d
        return index

    def sid(self, index: int) -> SemanticId:
        digits = self.digits(index)
        return SemanticId(self.name, index, tuple(a.labels[d] for a, d in zip(self.attributes, digits)))

    def matching_sids(self, partial: Mapping[str, str]) -> list[int]:
        """Indices of every SID consistent with a (possibly partial) label assignment."""
        choices = []
        for a in self.attributes:
            if a.name in partial:
                if partial[a.name] not in a.labels:
                    raise SchemaError(f"unknown label {partial[a.name]!r} for attribute {a.name!r}")
                choices.append([a.labels.index(partial[a.name])])
            else:
                choices.append(range(len(a.labels)))
        unknown = set(partial) - set(self.attribute_names)
        if unknown:
            raise SchemaError(f"group {self.name!r} has no attribute(s) {sorted(unknown)}")
        return [self.index_of_digits(d) for d in itertools.product(*choices)]


@dataclass(frozen=True, eq=False)
class AttributeSchema:
    groups: tuple[AttributeGroup, ...]
    version: str = ""
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {g.name: g for g in self.groups})

    def __getitem__(self, name: str) -> AttributeGroup:
        try:
            return self._by_name[GROUP_ALIASES.get(name, name)]
        except KeyError:
            raise SchemaError(f"unknown group {name!r}") from None

    def __iter__(self):
        return iter(self.groups)

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.groups)

    @property
    def sid_counts(self) -> dict[str, int]:
        return {g.name: g.num_sids for g in self.groups}

    def group_of_attribute(self, attribute: str) -> AttributeGroup:
        for g in self.groups:
            if attribute in g.attribute_names:
                return g
        raise SchemaError(f"unknown attribute {attribute!r}")

    @property
    def attribute_names(self) -> list[str]:
        return [a.name for g in self.groups for a in g.attributes]

    def to_document(self) -> dict:
        return {
            "version": self.version,
            "groups": {
                g.name: [{"name": a.name, "labels": list(a.labels), "binary": a.binary} for a in g.attributes]
                for g in self.groups
            },
        }

    @cached_property
    def hash(self) -> str:
        doc = self.to_document()
        doc.pop("version")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def sids_of(self, labels: Mapping[str, str]) -> dict[str, SemanticId]:
        """Per-group SIDs of a flat ``attribute -> label`` assignment covering the whole schema."""
        return {g.name: sid_of({a: labels[a] for a in g.attribute_names if a in labels}, g) for g in self.groups}

    def labels_of(self, sid_indices: Mapping[str, int]) -> dict[str, str]:
        """Expand per-group SID indices into a flat attribute -> label mapping."""
        out = {}
        for g in self.groups:
            out.update(zip(g.attribute_names, g.sid(int(sid_indices[g.name])).label_choice))
        return out


def _parse_attribute(entry, group: str) -> Attribute:
    if isinstance(entry, Mapping):
        name, labels, binary = entry.get("name"), entry.get("labels"), entry.get("binary")
    elif isinstance(entry, Sequence) and len(entry) == 2:
        (name, labels), binary = entry, None
    else:
        raise SchemaError(f"malformed attribute entry in group {group!r}: {entry!r}")
    if not name:
        raise SchemaError(f"attribute without a name in group {group!r}")
    labels = tuple(str(x) for x in (labels or ()))
    if not labels:
        raise SchemaError(f"attribute {name!r} has an empty label list")
    if len(labels) < 2:
        raise SchemaError(f"attribute {name!r} needs at least two labels, got {labels}")
    if len(set(labels)) != len(labels):
        raise SchemaError(f"attribute {name!r} has duplicate labels")
    if binary is None:
        binary = labels == BINARY_LABELS
    if binary and len(labels) != 2:
        raise SchemaError(f"binary attribute {name!r} must have exactly two labels")
    return Attribute(str(name), labels, bool(binary))


def load_schema(source) -> AttributeSchema:
    """Build a validated schema from a path, a YAML/JSON string, or an already-parsed mapping."""
    if isinstance(source, Mapping):
        doc = source
    else:
        text = Path(source).read_text() if _looks_like_path(source) else str(source)
        doc = yaml.safe_load(text)
    if not isinstance(doc, Mapping) or "groups" not in doc:
        raise SchemaError("schema document must be a mapping with a 'groups' key")
    raw_groups = doc["groups"]
    if isinstance(raw_groups, Sequence):
        # list form: [{name: head, attributes: [...]}, ...]
        raw_groups = {g["name"]: g["attributes"] for g in raw_groups}
    names = [GROUP_ALIASES.get(n, n) for n in raw_groups]
    if sorted(names) != sorted(GROUPS) or len(names) != len(GROUPS):
        raise SchemaError(f"schema must define exactly the groups {GROUPS}, got {tuple(raw_groups)}")

    seen: dict[str, str] = {}
    groups = []
    raw = {GROUP_ALIASES.get(n, n): v for n, v in raw_groups.items()}
    for gname in GROUPS:
        entries = raw[gname] or []
        if not entries:
            raise SchemaError(f"group {gname!r} has no attributes")
        attrs = []
        for entry in entries:
            a = _parse_attribute(entry, gname)
            if a.name in seen:
                where = "twice in" if seen[a.name] == gname else f"in both {seen[a.name]!r} and"
                raise SchemaError(f"attribute {a.name!r} appears {where} {gname!r}")
            seen[a.name] = gname
            attrs.append(a)
        groups.append(AttributeGroup(gname, tuple(attrs)))
    return AttributeSchema(tuple(groups), str(doc.get("version", "")))


def _looks_like_path(source) -> bool:
    if isinstance(source, Path):
        return True
    s = str(source)
    return "\n" not in s and ":" not in s.split("/")[-1] and Path(s).suffix in (".yaml", ".yml", ".json")


def builtin_schema(name: str) -> AttributeSchema:
    """One of the shipped schema configs: ``market``, ``duke`` or ``synthetic``."""
    path = Path(__file__).parent / "configs" / f"{name}_schema.yaml"
    if not path.exists():
        raise SchemaError(f"no builtin schema named {name!r}")
    return load_schema(path)


def enumerate_sids(group: AttributeGroup) -> list[SemanticId]:
    return [
        SemanticId(group.name, k, choice)
        for k, choice in enumerate(itertools.product(*(a.labels for a in group.attributes)))
    ]


def sid_of(labels: Mapping[str, str], group: AttributeGroup) -> SemanticId:
    missing = [a for a in group.attribute_names if a not in labels]
    if missing:
        raise SchemaError(f"missing label for attribute(s) {missing} of group {group.name!r}")
    extra = set(labels) - set(group.attribute_names)
    if extra:
        raise SchemaError(f"attribute(s) {sorted(extra)} do not belong to group {group.name!r}")
    digits = []
    for a in group.attributes:
        label = labels[a.name]
        if label not in a.labels:
            raise SchemaError(f"unknown label {label!r} for attribute {a.name!r} (expected one of {a.labels})")
        digits.append(a.labels.index(label))
    index = group.index_of_digits(digits)
    return SemanticId(group.name, index, tuple(labels[a] for a in group.attribute_names))


def attribute_vector(sid: SemanticId, group: AttributeGroup) -> np.ndarray:
    if sid.group != group.name:
        raise SchemaError(f"SID of group {sid.group!r} used with group {group.name!r}")
    bits: list[int] = []
    for a, label in zip(group.attributes, sid.label_choice):
        bits.extend(a.encode(a.labels.index(label)))
    return np.array(bits, dtype=np.int8)


def schema_from_groups(groups: Mapping[str, Iterable], version: str = "") -> AttributeSchema:
    """Convenience for tests and scripts: ``{"head": [("hat", ["absent", "present"])], ...}``."""
    return load_schema({"version": version, "groups": {k: list(v) for k, v in groups.items()}})
