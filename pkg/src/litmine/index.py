"""Inverted index from entity keys (and entity types) to window ordinals.

Posting sets live in memory as big-integer bitmaps, which makes the CNF
set algebra (union, intersection, complement) run at memcpy speed even
for million-window builds. On disk they are delta-encoded varint gap
lists; both representations honor plain set semantics.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError
from .tags import EntityType, ResolverCascades, TagStore, parse_entity_type


def _encode_varint(value: int, out: bytearray) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _decode_varints(data: bytes) -> Iterator[int]:
    value = 0
    shift = 0
    for byte in data:
        value |= (byte & 0x7F) << shift
        if byte & 0x80:
            shift += 7
        else:
            yield value
            value = 0
            shift = 0


class PostingSet:
    """Immutable set of window ordinals within a fixed universe."""

    __slots__ = ("bits", "universe")

    def __init__(self, bits: int, universe: int):
        self.bits = bits
        self.universe = universe

    @classmethod
    def empty(cls, universe: int) -> "PostingSet":
        return cls(0, universe)

    @classmethod
    def full(cls, universe: int) -> "PostingSet":
        return cls((1 << universe) - 1, universe)

    @classmethod
    def from_ordinals(cls, ordinals: Iterable[int], universe: int) -> "PostingSet":
        buf = bytearray((universe + 7) // 8)
        for ordinal in ordinals:
            if not 0 <= ordinal < universe:
                raise DataError(f"ordinal {ordinal} outside universe of {universe}")
            buf[ordinal >> 3] |= 1 << (ordinal & 7)
        return cls(int.from_bytes(bytes(buf), "little"), universe)

    @classmethod
    def from_array(cls, ordinals: np.ndarray, universe: int) -> "PostingSet":
        """Bulk path used for large builds."""
        ordinals = np.asarray(ordinals, dtype=np.int64)
        if len(ordinals) and (ordinals.min() < 0 or ordinals.max() >= universe):
            raise DataError(f"ordinal outside universe of {universe}")
        mask = np.zeros(universe, dtype=bool)
        mask[ordinals] = True
        packed = np.packbits(mask, bitorder="little").tobytes()
        return cls(int.from_bytes(packed, "little"), universe)

    def _check(self, other: "PostingSet") -> None:
        if self.universe != other.universe:
            raise DataError(
                f"posting universes differ: {self.universe} vs {other.universe}")

    def union(self, other: "PostingSet") -> "PostingSet":
        self._check(other)
        return PostingSet(self.bits | other.bits, self.universe)

    def intersect(self, other: "PostingSet") -> "PostingSet":
        self._check(other)
        return PostingSet(self.bits & other.bits, self.universe)

    def difference(self, other: "PostingSet") -> "PostingSet":
        self._check(other)
        return PostingSet(self.bits & ~other.bits, self.universe)

    def complement(self) -> "PostingSet":
        return PostingSet(((1 << self.universe) - 1) & ~self.bits, self.universe)

    __or__ = union
    __and__ = intersect
    __sub__ = difference

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __bool__(self) -> bool:
        return self.bits != 0

    def __contains__(self, ordinal: int) -> bool:
        return 0 <= ordinal < self.universe and bool((self.bits >> ordinal) & 1)

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, PostingSet)
                and self.universe == other.universe and self.bits == other.bits)

    def __hash__(self):
        return hash((self.bits, self.universe))

    def __repr__(self) -> str:
        return f"PostingSet({len(self)} of {self.universe})"

    def to_array(self) -> np.ndarray:
        """Sorted ordinals as a numpy array."""
        if self.bits == 0:
            return np.empty(0, dtype=np.int64)
        raw = self.bits.to_bytes((self.universe + 7) // 8, "little")
        unpacked = np.unpackbits(np.frombuffer(raw, dtype=np.uint8),
                                 bitorder="little")[:self.universe]
        return np.nonzero(unpacked)[0].astype(np.int64)

    def __iter__(self) -> Iterator[int]:
        return iter(self.to_array().tolist())

    def encode(self) -> bytes:
        """Delta-encoded varint gap list of the sorted ordinals."""
        out = bytearray()
        prev = -1
        for ordinal in self.to_array().tolist():
            _encode_varint(ordinal - prev, out)
            prev = ordinal
        return bytes(out)

    @classmethod
    def decode(cls, data: bytes, universe: int) -> "PostingSet":
        ordinals = []
        prev = -1
        for gap in _decode_varints(data):
            prev += gap
            ordinals.append(prev)
        return cls.from_ordinals(ordinals, universe)


class EntityIndex:
    """Immutable postings for every entity key and every entity type."""

    def __init__(self, universe: int,
                 entity_postings: dict[str, PostingSet],
                 type_postings: dict[EntityType, PostingSet],
                 entity_types: dict[str, EntityType],
                 display_names: dict[str, str],
                 cascades: ResolverCascades | None = None):
        self.universe = universe
        self.entity_postings = entity_postings
        self.type_postings = type_postings
        self.entity_types = entity_types
        self.display_names = display_names
        self.cascades = cascades or ResolverCascades.empty()

    def all_windows(self) -> PostingSet:
        return PostingSet.full(self.universe)

    def postings_for_key(self, entity_key: str) -> PostingSet:
        return self.entity_postings.get(entity_key) or PostingSet.empty(self.universe)

    def postings_for_type(self, entity_type: EntityType) -> PostingSet:
        return self.type_postings.get(entity_type) or PostingSet.empty(self.universe)

    def postings_for(self, name: str) -> PostingSet:
        """Postings for a type name (closed set) or an entity key."""
        if name in {t.value for t in EntityType}:
            return self.postings_for_type(parse_entity_type(name))
        return self.postings_for_key(name)


def _make_posting(ordinals, universe: int) -> PostingSet:
    # numpy packbits wins for big postings; a bytearray walk for small ones
    if len(ordinals) > 4096:
        return PostingSet.from_array(np.fromiter(ordinals, dtype=np.int64,
                                                 count=len(ordinals)), universe)
    return PostingSet.from_ordinals(ordinals, universe)


def build_index(store: TagStore) -> EntityIndex:
    """Freeze a tag store into an immutable entity index."""
    universe = store.universe
    entity_postings = {
        key: _make_posting(ordinals, universe)
        for key, ordinals in store.entity_windows.items()
        if ordinals
    }
    type_postings = {
        entity_type: _make_posting(ordinals, universe)
        for entity_type, ordinals in store.type_windows.items()
        if ordinals
    }
    return EntityIndex(
        universe=universe,
        entity_postings=entity_postings,
        type_postings=type_postings,
        entity_types=dict(store.entity_types),
        display_names=dict(store.display_names),
        cascades=store.cascades,
    )


def save_index(index: EntityIndex, path: str | Path) -> None:
    doc = {
        "universe": index.universe,
        "entities": {
            key: {
                "type": index.entity_types[key].value,
                "display": index.display_names.get(key, key),
                "postings": base64.b64encode(p.encode()).decode("ascii"),
            }
            for key, p in sorted(index.entity_postings.items())
        },
        "types": {
            t.value: base64.b64encode(p.encode()).decode("ascii")
            for t, p in sorted(index.type_postings.items(), key=lambda kv: kv[0].value)
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_index(path: str | Path, cascades: ResolverCascades | None = None) -> EntityIndex:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    universe = int(doc["universe"])
    entity_postings: dict[str, PostingSet] = {}
    entity_types: dict[str, EntityType] = {}
    display_names: dict[str, str] = {}
    for key, info in doc["entities"].items():
        entity_postings[key] = PostingSet.decode(
            base64.b64decode(info["postings"]), universe)
        entity_types[key] = parse_entity_type(info["type"])
        display_names[key] = info["display"]
    type_postings = {
        parse_entity_type(name): PostingSet.decode(base64.b64decode(data), universe)
        for name, data in doc["types"].items()
    }
    return EntityIndex(universe, entity_postings, type_postings,
                       entity_types, display_names, cascades)
