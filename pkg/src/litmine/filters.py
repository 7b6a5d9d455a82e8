"""CNF entity filters with semantic re-ranking.

A filter is an outer conjunction of groups; each group is an inner
disjunction of literals. A literal names either an entity type (the
closed 19-name set, which takes priority) or an entity, and may be
negated with a ``!`` prefix. Windows surviving the filter are re-ranked
by cosine similarity between their embedding and the probe's semantic
query.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Embedder
from .errors import ConfigError, ParseError
from .index import EntityIndex, PostingSet
from .tags import ENTITY_TYPE_NAMES, EntityType, parse_entity_type

logger = logging.getLogger(__name__)

NEGATION_PREFIX = "!"

# Filtered sets up to this size are scored in one shot; larger ones are
# streamed in chunks through a bounded top-k merge.
DEFAULT_RERANK_CAP = 100_000
_SCORE_CHUNK = 65_536


@dataclass(frozen=True)
class Literal:
    """One parsed CNF literal."""

    text: str                      # original literal, prefix included
    name: str                      # literal with any negation prefix stripped
    negated: bool
    entity_type: EntityType | None  # set when the name is a type name

    @property
    def is_type(self) -> bool:
        return self.entity_type is not None


def parse_literal(text: str, location: str) -> Literal:
    if not isinstance(text, str):
        raise ParseError("literal must be a string", location)
    negated = text.startswith(NEGATION_PREFIX)
    name = text[len(NEGATION_PREFIX):] if negated else text
    if not name.strip():
        raise ParseError("empty literal", location)
    entity_type = parse_entity_type(name) if name in ENTITY_TYPE_NAMES else None
    return Literal(text=text, name=name, negated=negated, entity_type=entity_type)


@dataclass(frozen=True)
class FilterSpec:
    """CNF entity constraint plus a semantic query.

    An empty ``entity_groups`` list is the vacuous conjunction and matches
    every window; an empty group would be an unsatisfiable disjunction and
    is rejected at parse time.
    """

    entity_groups: tuple[tuple[str, ...], ...]
    semantic_query: str
    groups: tuple[tuple[Literal, ...], ...] = field(repr=False, compare=False, default=())

    def to_dict(self) -> dict:
        return {"entity_groups": [list(g) for g in self.entity_groups],
                "semantic_query": self.semantic_query}


def parse_filter_spec(source: str | dict) -> FilterSpec:
    """Parse and validate a filter spec from JSON text or a decoded object."""
    if isinstance(source, str):
        try:
            obj = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", f"offset {exc.pos}") from None
    else:
        obj = source
    if not isinstance(obj, dict):
        raise ParseError("filter spec must be a JSON object", "$")
    unknown = set(obj) - {"entity_groups", "semantic_query"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", "$")
    raw_groups = obj.get("entity_groups")
    query = obj.get("semantic_query")
    if not isinstance(raw_groups, list):
        raise ParseError("entity_groups must be a list of groups", "entity_groups")
    if not isinstance(query, str) or not query.strip():
        raise ParseError("semantic_query must be a non-empty string", "semantic_query")
    groups: list[tuple[Literal, ...]] = []
    plain: list[tuple[str, ...]] = []
    for gi, group in enumerate(raw_groups):
        if not isinstance(group, list):
            raise ParseError("group must be a list of literals", f"entity_groups[{gi}]")
        if not group:
            raise ParseError("empty group", f"entity_groups[{gi}]")
        literals = tuple(
            parse_literal(lit, f"entity_groups[{gi}][{li}]")
            for li, lit in enumerate(group)
        )
        groups.append(literals)
        plain.append(tuple(lit.text for lit in literals))
    return FilterSpec(entity_groups=tuple(plain), semantic_query=query,
                      groups=tuple(groups))


@dataclass(frozen=True)
class Probe:
    probe_id: str
    spec: FilterSpec


def load_probe_set(path: str | Path) -> list[Probe]:
    """Load a JSON array of ``{probe_id, spec}`` objects."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"probe set file not found: {path}")
    try:
        arr = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", f"{path.name}:offset {exc.pos}") from None
    if not isinstance(arr, list):
        raise ParseError("probe set must be a JSON array", path.name)
    probes = []
    seen: set[str] = set()
    for i, entry in enumerate(arr):
        if not isinstance(entry, dict) or set(entry) - {"probe_id", "spec"}:
            raise ParseError("probe must be {probe_id, spec}", f"{path.name}[{i}]")
        probe_id = entry.get("probe_id")
        if not isinstance(probe_id, str) or not probe_id:
            raise ParseError("probe_id must be a non-empty string", f"{path.name}[{i}]")
        if probe_id in seen:
            raise ParseError(f"duplicate probe_id {probe_id!r}", f"{path.name}[{i}]")
        seen.add(probe_id)
        probes.append(Probe(probe_id=probe_id, spec=parse_filter_spec(entry.get("spec"))))
    return probes


def probe_from_payload(obj: dict, location: str) -> Probe:
    if not isinstance(obj, dict):
        raise ParseError("probe must be an object", location)
    probe_id = obj.get("probe_id")
    if not isinstance(probe_id, str) or not probe_id:
        raise ParseError("probe_id must be a non-empty string", location)
    return Probe(probe_id=probe_id, spec=parse_filter_spec(obj.get("spec", {})))


@dataclass(frozen=True)
class RankedHit:
    window_id: str
    ordinal: int
    doc_id: str
    score: float
    probe_id: str


def _literal_postings(literal: Literal, index: EntityIndex) -> PostingSet:
    if literal.is_type:
        postings = index.postings_for_type(literal.entity_type)
    else:
        key = index.cascades.normalize_untyped(literal.name)
        postings = index.postings_for_key(key)
    if not postings:
        logger.warning("filter literal %r matched no postings", literal.text)
    return postings


def evaluate_filter(spec: FilterSpec, index: EntityIndex) -> PostingSet:
    """Evaluate the CNF constraint against the index.

    Result is the intersection over groups of the union over literals,
    where a negated literal contributes the complement of its postings
    (taken against the set of all windows in the build). Name literals are
    resolved through the index's normalization cascade, so synonyms land
    on the same posting list they were indexed under.
    """
    result = index.all_windows()
    for literals in spec.groups:
        acc = PostingSet.empty(index.universe)
        for literal in literals:
            postings = _literal_postings(literal, index)
            if literal.negated:
                postings = postings.complement()
            acc = acc | postings
        result = result & acc
        if not result:
            break
    return result


def _top_k(ordinals: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[float, int]]:
    """(score desc, ordinal asc) selection of k items."""
    order = np.lexsort((ordinals, -scores))[:k]
    return [(float(scores[i]), int(ordinals[i])) for i in order]


def _ranked_hits(corpus: Corpus, pairs: list[tuple[float, int]],
                 probe_ids: dict[int, str] | str) -> list[RankedHit]:
    hits = []
    for score, ordinal in pairs:
        window = corpus.window(ordinal)
        probe_id = probe_ids if isinstance(probe_ids, str) else probe_ids[ordinal]
        hits.append(RankedHit(window_id=window.window_id, ordinal=ordinal,
                              doc_id=window.doc_id, score=score, probe_id=probe_id))
    return hits


def _score_ordinals(corpus: Corpus, ordinals: np.ndarray, query_vec: np.ndarray,
                    top_k: int, rerank_cap: int) -> list[tuple[float, int]]:
    embeddings = corpus.require_embeddings()
    if len(ordinals) <= rerank_cap:
        scores = embeddings[ordinals] @ query_vec
        return _top_k(ordinals, scores, top_k)
    # Streamed scoring: bounded heap of (score, -ordinal) keeps the same
    # (score desc, ordinal asc) tie rule as the one-shot path.
    heap: list[tuple[float, int]] = []
    for start in range(0, len(ordinals), _SCORE_CHUNK):
        chunk = ordinals[start:start + _SCORE_CHUNK]
        scores = embeddings[chunk] @ query_vec
        for score, ordinal in zip(scores.tolist(), chunk.tolist()):
            item = (score, -ordinal)
            if len(heap) < top_k:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
    ranked = sorted(heap, key=lambda item: (-item[0], -item[1]))
    return [(score, -neg_ordinal) for score, neg_ordinal in ranked]


def probe_search(probe: Probe, index: EntityIndex, corpus: Corpus,
                 embedder: Embedder, top_k: int,
                 rerank_cap: int = DEFAULT_RERANK_CAP) -> list[RankedHit]:
    """Filter, then re-rank survivors by similarity to the semantic query."""
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    matches = evaluate_filter(probe.spec, index)
    ordinals = matches.to_array()
    if len(ordinals) == 0:
        return []
    query_vec = embedder.embed_one(probe.spec.semantic_query)
    pairs = _score_ordinals(corpus, ordinals, query_vec, top_k, rerank_cap)
    return _ranked_hits(corpus, pairs, probe.probe_id)


def excluded_but_relevant(probes: list[Probe], index: EntityIndex, corpus: Corpus,
                          embedder: Embedder, pool_k: int) -> list[RankedHit]:
    """Windows excluded by every probe's filter, ranked by the best
    similarity any probe's semantic query assigns them.

    This pool is where filter recall problems show up: text the semantic
    queries consider highly relevant, but which no entity filter admits.
    """
    if not probes:
        raise ConfigError("excluded_but_relevant requires at least one probe")
    if pool_k < 1:
        raise ConfigError(f"pool_k must be >= 1, got {pool_k}")
    covered = PostingSet.empty(index.universe)
    for probe in probes:
        covered = covered | evaluate_filter(probe.spec, index)
    pool = covered.complement()
    ordinals = pool.to_array()
    if len(ordinals) == 0:
        return []
    embeddings = corpus.require_embeddings()
    query_matrix = np.stack([embedder.embed_one(p.spec.semantic_query) for p in probes])
    scores = embeddings[ordinals] @ query_matrix.T       # (n_pool, n_probes)
    best_probe = np.argmax(scores, axis=1)               # first probe wins ties
    best_score = scores[np.arange(len(ordinals)), best_probe]
    pairs = _top_k(ordinals, best_score, pool_k)
    by_ordinal = {int(o): probes[int(b)].probe_id
                  for o, b in zip(ordinals.tolist(), best_probe.tolist())}
    return _ranked_hits(corpus, pairs, by_ordinal)
