"""Entity tags: the closed type set, dictionary-backed name resolvers,
the normalization cascade, and projection of tags onto retrieval windows.

Tag files carry their own (smaller) tagging-window geometry; an entity is
attached to every retrieval window whose paragraph range intersects the
tag's mentioned paragraphs, so the two grids stay independent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import Corpus
from .errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)

RAW_KEY_PREFIX = "raw:"


class EntityType(Enum):
    ANATOMY = "Anatomy"
    ANTIBODY = "Antibody"
    ASSAY_RESULT = "Assay/Result"
    CELL_LINE = "CellLine"
    CELL_TYPE = "CellType"
    CLINICAL_TRIAL = "ClinicalTrial"
    DISEASE = "Disease"
    GENE = "Gene"
    GENE_VARIANT = "GeneVariant"
    GO_TERM = "GOTerm"
    ORGANISM = "Organism"
    PATHWAY = "Pathway"
    PEPTIDE = "Peptide"
    PHENOTYPE = "Phenotype"
    PROTEIN = "Protein"
    PROTEIN_GENE_FAMILY = "Protein/GeneFamily"
    RNA = "RNA"
    SMALL_MOLECULE = "SmallMolecule"
    SMALL_MOLECULE_CLASS = "SmallMoleculeClass"


ENTITY_TYPE_NAMES: frozenset[str] = frozenset(t.value for t in EntityType)
_TYPE_BY_NAME = {t.value: t for t in EntityType}


def parse_entity_type(name: str) -> EntityType:
    """Strict lookup in the closed 19-name set."""
    try:
        return _TYPE_BY_NAME[name]
    except KeyError:
        raise DataError(f"unknown entity type {name!r}") from None


@dataclass(frozen=True)
class OntologyEntry:
    ontology_id: str
    preferred_name: str
    synonyms: tuple[str, ...]
    entity_type: EntityType

    def __post_init__(self):
        if not self.ontology_id:
            raise DataError("ontology entry with empty id")
        if not self.preferred_name:
            raise DataError(f"ontology entry {self.ontology_id} with empty preferred name")


@dataclass(frozen=True)
class NormalizedEntity:
    entity_key: str
    entity_type: EntityType
    display_name: str

    @property
    def is_raw(self) -> bool:
        return self.entity_key.startswith(RAW_KEY_PREFIX)


@dataclass(frozen=True)
class EntityTag:
    """One tagged entity occurrence bound to a tagging window."""

    doc_id: str
    start_para: int
    para_count: int
    canonical_name: str
    entity_type: EntityType
    synonyms: tuple[str, ...] = ()
    surface_forms: tuple[str, ...] = ()
    paragraph_indices: tuple[int, ...] = ()
    extras: dict[str, str] = field(default_factory=dict)

    def label(self) -> str:
        """Identifier used in load-error messages."""
        return f"{self.doc_id}/{self.canonical_name!r}@{self.start_para}"


class DictionaryResolver:
    """Exact, case-insensitive name lookup over a JSONL ontology dictionary.

    Each line is ``{ontology_id, preferred_name, synonyms, entity_type}``.
    Lookups match preferred names and synonyms; the first entry in file
    order wins when several share a name.
    """

    def __init__(self, name: str, entries: list[OntologyEntry]):
        self.name = name
        self.entries = entries
        self._by_id: dict[str, OntologyEntry] = {}
        self._by_name: dict[str, list[OntologyEntry]] = {}
        for entry in entries:
            if entry.ontology_id in self._by_id:
                raise DataError(
                    f"resolver {name!r}: duplicate ontology_id {entry.ontology_id!r}")
            self._by_id[entry.ontology_id] = entry
            for alias in (entry.preferred_name, *entry.synonyms):
                self._by_name.setdefault(alias.strip().lower(), []).append(entry)

    @classmethod
    def from_file(cls, name: str, path: str | Path) -> "DictionaryResolver":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"resolver dictionary not found: {path}")
        entries: list[OntologyEntry] = []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"malformed resolver entry: {exc.msg}",
                                     f"{path.name}:{lineno}") from None
                entries.append(OntologyEntry(
                    ontology_id=str(obj["ontology_id"]),
                    preferred_name=str(obj["preferred_name"]),
                    synonyms=tuple(str(s) for s in obj.get("synonyms", [])),
                    entity_type=parse_entity_type(obj["entity_type"]),
                ))
        return cls(name, entries)

    def lookup(self, name: str, entity_type: EntityType | None = None) -> OntologyEntry | None:
        for entry in self._by_name.get(name.strip().lower(), ()):
            if entity_type is None or entry.entity_type is entity_type:
                return entry
        return None

    def by_id(self, ontology_id: str) -> OntologyEntry | None:
        return self._by_id.get(ontology_id)


def raw_key(name: str) -> str:
    return RAW_KEY_PREFIX + name.strip().lower()


def normalize_entity(name: str, entity_type: EntityType,
                     resolvers: list[DictionaryResolver]) -> NormalizedEntity:
    """Resolve a name through an ordered resolver cascade.

    The first resolver with an exact case-insensitive match on a preferred
    name or synonym wins; unresolved names degrade to a ``raw:`` key.
    Already-normalized inputs (a raw key, or a known ontology id) are
    returned unchanged, which makes normalization idempotent.
    """
    stripped = name.strip()
    if stripped.lower().startswith(RAW_KEY_PREFIX):
        key = RAW_KEY_PREFIX + stripped[len(RAW_KEY_PREFIX):].strip().lower()
        return NormalizedEntity(entity_key=key, entity_type=entity_type,
                                display_name=stripped[len(RAW_KEY_PREFIX):].strip())
    for resolver in resolvers:
        entry = resolver.by_id(stripped)
        if entry is not None:
            return NormalizedEntity(entity_key=entry.ontology_id,
                                    entity_type=entity_type,
                                    display_name=entry.preferred_name)
    for resolver in resolvers:
        entry = resolver.lookup(stripped, entity_type)
        if entry is not None:
            return NormalizedEntity(entity_key=entry.ontology_id,
                                    entity_type=entity_type,
                                    display_name=entry.preferred_name)
    return NormalizedEntity(entity_key=raw_key(stripped), entity_type=entity_type,
                            display_name=stripped)


class ResolverCascades:
    """Per-type resolver cascades plus a default cascade.

    ``query_order`` is the flat, declaration-ordered resolver list used
    when a name must be resolved without a declared type (filter literals).
    """

    def __init__(self, cascades: dict[EntityType, list[DictionaryResolver]],
                 default: list[DictionaryResolver]):
        self.cascades = cascades
        self.default = default
        seen: dict[str, DictionaryResolver] = {}
        for resolver in (r for chain in (*cascades.values(), default) for r in chain):
            seen.setdefault(resolver.name, resolver)
        self.query_order: list[DictionaryResolver] = list(seen.values())

    @classmethod
    def empty(cls) -> "ResolverCascades":
        return cls({}, [])

    @classmethod
    def single(cls, resolver: DictionaryResolver) -> "ResolverCascades":
        return cls({}, [resolver])

    def for_type(self, entity_type: EntityType) -> list[DictionaryResolver]:
        return self.cascades.get(entity_type, self.default)

    def normalize(self, name: str, entity_type: EntityType) -> NormalizedEntity:
        return normalize_entity(name, entity_type, self.for_type(entity_type))

    def normalize_untyped(self, name: str) -> str:
        """Resolve a bare name to an entity key using the global order."""
        stripped = name.strip()
        if stripped.lower().startswith(RAW_KEY_PREFIX):
            return RAW_KEY_PREFIX + stripped[len(RAW_KEY_PREFIX):].strip().lower()
        for resolver in self.query_order:
            entry = resolver.by_id(stripped)
            if entry is not None:
                return entry.ontology_id
        for resolver in self.query_order:
            entry = resolver.lookup(stripped)
            if entry is not None:
                return entry.ontology_id
        return raw_key(stripped)


class TagStore:
    """Normalized tag postings accumulated per entity key.

    Postings are sets of retrieval-window ordinals; loading the same
    entity into the same window twice is a no-op (set semantics).
    """

    def __init__(self, universe: int, cascades: ResolverCascades | None = None):
        self.universe = universe
        self.cascades = cascades or ResolverCascades.empty()
        self.entity_windows: dict[str, set[int]] = {}
        self.type_windows: dict[EntityType, set[int]] = {}
        self.entity_types: dict[str, EntityType] = {}
        self.display_names: dict[str, str] = {}
        self.tag_count = 0

    def add_posting(self, entity_key: str, entity_type: EntityType,
                    display_name: str, ordinal: int) -> None:
        if not 0 <= ordinal < self.universe:
            raise DataError(f"window ordinal {ordinal} outside corpus of {self.universe}")
        self.entity_windows.setdefault(entity_key, set()).add(ordinal)
        # Type postings accumulate per occurrence: the same surface name may
        # legitimately appear under two types (a gene and its protein).
        self.type_windows.setdefault(entity_type, set()).add(ordinal)
        self.entity_types.setdefault(entity_key, entity_type)
        self.display_names.setdefault(entity_key, display_name)

    @classmethod
    def from_postings(cls, universe: int,
                      entries: list[tuple[str, EntityType, list[int]]],
                      cascades: ResolverCascades | None = None) -> "TagStore":
        """Bulk constructor from pre-resolved postings (programmatic builds,
        benchmarks). Ordinals may be any iterable of ints."""
        store = cls(universe, cascades)
        for key, entity_type, ordinals in entries:
            ordinal_set = {int(o) for o in ordinals}
            if ordinal_set and (min(ordinal_set) < 0 or max(ordinal_set) >= universe):
                raise DataError(f"entity {key!r}: ordinal outside corpus of {universe}")
            store.entity_windows.setdefault(key, set()).update(ordinal_set)
            if ordinal_set:
                store.type_windows.setdefault(entity_type, set()).update(ordinal_set)
            store.entity_types.setdefault(key, entity_type)
            store.display_names.setdefault(key, key)
        return store

    def entity_keys(self) -> list[str]:
        return sorted(self.entity_windows)


def parse_tag(obj: dict, location: str | None = None) -> EntityTag:
    if not isinstance(obj, dict):
        raise ParseError("tag line is not a JSON object", location)
    required = {"doc_id", "start_para", "para_count", "canonical_name",
                "entity_type", "surface_forms", "paragraph_indices"}
    missing = required - set(obj)
    if missing:
        raise ParseError(f"tag missing fields {sorted(missing)}", location)
    try:
        return EntityTag(
            doc_id=str(obj["doc_id"]),
            start_para=int(obj["start_para"]),
            para_count=int(obj["para_count"]),
            canonical_name=str(obj["canonical_name"]),
            entity_type=parse_entity_type(obj["entity_type"]),
            synonyms=tuple(str(s) for s in obj.get("synonyms", [])),
            surface_forms=tuple(str(s) for s in obj["surface_forms"]),
            paragraph_indices=tuple(int(i) for i in obj["paragraph_indices"]),
            extras={str(k): str(v) for k, v in (obj.get("extras") or {}).items()},
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"malformed tag: {exc}", location) from None


def read_tags(path: str | Path) -> list[EntityTag]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"tag file not found: {path}")
    tags: list[EntityTag] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            location = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", location) from None
            tags.append(parse_tag(obj, location))
    return tags


def _validate_tag(tag: EntityTag, corpus: Corpus) -> None:
    doc = corpus.documents.get(tag.doc_id)
    if doc is None:
        raise DataError(f"tag {tag.label()} references unknown doc_id {tag.doc_id!r}")
    if not tag.canonical_name:
        raise DataError(f"tag {tag.label()} has empty canonical_name")
    if not tag.surface_forms:
        raise DataError(f"tag {tag.label()} has empty surface_forms")
    n = len(doc.paragraphs)
    if tag.start_para < 0 or tag.para_count < 1 or tag.start_para + tag.para_count > n:
        raise DataError(
            f"tag {tag.label()} window [{tag.start_para}, "
            f"{tag.start_para + tag.para_count}) outside document of {n} paragraphs")
    window_range = range(tag.start_para, tag.start_para + tag.para_count)
    for idx in tag.paragraph_indices:
        if idx not in window_range:
            raise DataError(
                f"tag {tag.label()} paragraph index {idx} outside its window "
                f"[{window_range.start}, {window_range.stop})")


def _normalize_tag(tag: EntityTag, cascades: ResolverCascades) -> NormalizedEntity:
    resolved = cascades.normalize(tag.canonical_name, tag.entity_type)
    if resolved.is_raw:
        # The canonical name missed; tag-supplied synonyms get a chance.
        for synonym in tag.synonyms:
            candidate = cascades.normalize(synonym, tag.entity_type)
            if not candidate.is_raw:
                return candidate
    return resolved


def load_tags(path: str | Path, corpus: Corpus, cascades: ResolverCascades) -> TagStore:
    """Load a tag file, normalize names, and project onto retrieval windows."""
    store = TagStore(len(corpus.windows), cascades)
    for tag in read_tags(path):
        _validate_tag(tag, corpus)
        resolved = _normalize_tag(tag, cascades)
        mentioned = set(tag.paragraph_indices)
        for ordinal in corpus.window_ordinals_for_doc(tag.doc_id):
            window = corpus.window(ordinal)
            if mentioned.intersection(window.para_range):
                store.add_posting(resolved.entity_key, resolved.entity_type,
                                  resolved.display_name, ordinal)
        store.tag_count += 1
    return store
