"""Extraction sweep: order the retrieval subcorpus, run the Extractor
window by window under the frozen schema, validate, and deduplicate.

Papers are ranked by a weighted sum of three z-normalized signals: how
many probes' filters the paper satisfies, the mean over the paper's
windows of the best query similarity, and the maximum such similarity.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Embedder
from .errors import ConfigError, DataError, OracleError
from .filters import Probe, evaluate_filter
from .index import EntityIndex, PostingSet
from .oracles import AgentRole, Oracle, OracleRequest
from .probe_loop import ExtractionSchema, UNIVERSAL_FIELDS

logger = logging.getLogger(__name__)

_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class PaperScore:
    doc_id: str
    probe_hits: int
    mean_sim: float
    max_sim: float
    combined: float

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "probe_hits": self.probe_hits,
                "mean_sim": self.mean_sim, "max_sim": self.max_sim,
                "combined": self.combined}


@dataclass(frozen=True)
class ExtractionRecord:
    record_id: str
    doc_id: str
    window_id: str
    probe_id: str
    fields: dict[str, object]
    support_text: str

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "doc_id": self.doc_id,
                "window_id": self.window_id, "probe_id": self.probe_id,
                "fields": self.fields, "support_text": self.support_text}


@dataclass
class ValidationFailure:
    window_id: str
    reason: str
    fields: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"window_id": self.window_id, "reason": self.reason,
                "fields": self.fields}


@dataclass
class ProbeMatches:
    """Per-probe filter results plus query-similarity scores, shared by
    ranking and extraction so the two stay consistent."""

    probes: list[Probe]
    postings: list[PostingSet]
    union: PostingSet
    # (n_union_windows, n_probes) similarity of each union window to each
    # probe's semantic query, aligned with ``ordinals``.
    ordinals: np.ndarray
    scores: np.ndarray


def match_probes(probes: list[Probe], index: EntityIndex, corpus: Corpus,
                 embedder: Embedder) -> ProbeMatches:
    if not probes:
        raise ConfigError("probe set is empty")
    postings = [evaluate_filter(p.spec, index) for p in probes]
    union = PostingSet.empty(index.universe)
    for p in postings:
        union = union | p
    ordinals = union.to_array()
    if len(ordinals) == 0:
        scores = np.zeros((0, len(probes)))
    else:
        embeddings = corpus.require_embeddings()
        query_matrix = np.stack([embedder.embed_one(p.spec.semantic_query)
                                 for p in probes])
        scores = embeddings[ordinals] @ query_matrix.T
    return ProbeMatches(probes=probes, postings=postings, union=union,
                        ordinals=ordinals, scores=scores)


def _z_normalize(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def rank_subcorpus(probes: list[Probe], index: EntityIndex, corpus: Corpus,
                   embedder: Embedder,
                   weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
                   matches: ProbeMatches | None = None) -> list[PaperScore]:
    """Rank candidate papers (those with at least one matching window).

    Each signal is z-normalized across candidates before weighting so the
    unbounded hit count cannot drown the cosine-scale similarities. Ties
    break on doc_id ascending.
    """
    if len(weights) != 3 or any(w < 0 for w in weights) or not any(weights):
        raise ConfigError(f"weights must be 3 non-negative values, not all zero: {weights}")
    if matches is None:
        matches = match_probes(probes, index, corpus, embedder)
    if len(matches.ordinals) == 0:
        return []

    # Candidate docs and per-window best-over-probes similarity.
    candidates: list[str] = []
    seen: set[str] = set()
    for ordinal in matches.ordinals.tolist():
        doc_id = corpus.window(ordinal).doc_id
        if doc_id not in seen:
            seen.add(doc_id)
            candidates.append(doc_id)

    embeddings = corpus.require_embeddings()
    query_matrix = np.stack([embedder.embed_one(p.spec.semantic_query)
                             for p in matches.probes])

    hit_docs: list[set[str]] = []
    for posting in matches.postings:
        hit_docs.append({corpus.window(o).doc_id for o in posting.to_array().tolist()})

    probe_hits = np.zeros(len(candidates), dtype=np.int64)
    mean_sim = np.zeros(len(candidates))
    max_sim = np.zeros(len(candidates))
    for i, doc_id in enumerate(candidates):
        probe_hits[i] = sum(1 for docs in hit_docs if doc_id in docs)
        window_ordinals = corpus.window_ordinals_for_doc(doc_id)
        best = (embeddings[window_ordinals] @ query_matrix.T).max(axis=1)
        mean_sim[i] = best.mean()
        max_sim[i] = best.max()

    w_hits, w_mean, w_max = weights
    combined = (w_hits * _z_normalize(probe_hits.astype(np.float64))
                + w_mean * _z_normalize(mean_sim)
                + w_max * _z_normalize(max_sim))
    order = sorted(range(len(candidates)),
                   key=lambda i: (-combined[i], candidates[i]))
    return [PaperScore(doc_id=candidates[i], probe_hits=int(probe_hits[i]),
                       mean_sim=float(mean_sim[i]), max_sim=float(max_sim[i]),
                       combined=float(combined[i]))
            for i in order]


def normalize_field_value(value: object) -> str:
    """Case- and whitespace-insensitive rendering used for dedup keys."""
    return _WS_RE.sub(" ", str(value).strip().lower())


def validate_record_fields(fields: dict, support_text: str,
                           schema: ExtractionSchema) -> str | None:
    """Return a rejection reason, or None when the record conforms."""
    if not isinstance(fields, dict):
        return "fields is not an object"
    if not support_text or not str(support_text).strip():
        return "empty support_text"
    known = {f.name for f in schema.data_fields}
    for name in fields:
        if name in UNIVERSAL_FIELDS:
            continue  # engine-owned; tolerated and overwritten
        if name not in known:
            return f"unknown field {name!r}"
    for spec in schema.data_fields:
        if spec.name not in fields or fields[spec.name] is None:
            if spec.required:
                return f"missing required field {spec.name!r}"
            continue
        value = fields[spec.name]
        if spec.kind == "enum":
            if normalize_field_value(value) not in {
                    normalize_field_value(v) for v in spec.allowed_values}:
                return f"enum violation on {spec.name!r}: {value!r}"
        elif spec.kind == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return f"field {spec.name!r} must be a number, got {value!r}"
        elif spec.kind == "boolean":
            if not isinstance(value, bool):
                return f"field {spec.name!r} must be a boolean, got {value!r}"
        elif spec.kind == "string":
            if not isinstance(value, str):
                return f"field {spec.name!r} must be a string, got {value!r}"
    return None


def _clean_fields(fields: dict, schema: ExtractionSchema) -> dict[str, object]:
    """Keep only schema data fields, in schema order, dropping nulls."""
    out: dict[str, object] = {}
    for spec in schema.data_fields:
        if spec.name in fields and fields[spec.name] is not None:
            out[spec.name] = fields[spec.name]
    return out


def extract_windows(ranked: list[PaperScore], schema: ExtractionSchema,
                    extractor: Oracle, budget: int, *,
                    matches: ProbeMatches, corpus: Corpus,
                    kind: str = "extract_records",
                    ) -> tuple[list[ExtractionRecord], list[ValidationFailure]]:
    """Run the Extractor over matching windows in rank order.

    ``budget`` caps the number of windows processed. Schema-invalid
    records are dropped with a logged reason and never repaired; an
    extractor failure skips just that window.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    union_set = set(matches.union.to_array().tolist())
    score_by_ordinal = {int(o): i for i, o in enumerate(matches.ordinals.tolist())}

    records: list[ExtractionRecord] = []
    failures: list[ValidationFailure] = []
    processed = 0
    for paper in ranked:
        if processed >= budget:
            break
        window_ordinals = [o for o in corpus.window_ordinals_for_doc(paper.doc_id)
                           if o in union_set]
        for ordinal in window_ordinals:
            if processed >= budget:
                break
            processed += 1
            window = corpus.window(ordinal)
            row = score_by_ordinal[ordinal]
            # Best probe: highest query similarity among probes whose
            # filter actually matched this window; first probe on ties.
            best_probe = None
            best_score = None
            for pi, posting in enumerate(matches.postings):
                if ordinal in posting:
                    score = float(matches.scores[row, pi])
                    if best_score is None or score > best_score:
                        best_probe = matches.probes[pi].probe_id
                        best_score = score
            assert best_probe is not None

            request = OracleRequest(
                role=AgentRole.EXTRACTOR, kind=kind,
                payload={"window_id": window.window_id, "doc_id": window.doc_id,
                         "text": window.text, "schema": schema.to_dict(),
                         "task_instantiation": schema.task_instantiation})
            try:
                payload = extractor.call(request).payload
            except OracleError as exc:
                logger.warning("extractor failed on %s, skipping window: %s",
                               window.window_id, exc)
                continue
            for ri, raw in enumerate(payload["records"]):
                fields = raw.get("fields", {})
                support_text = str(raw.get("support_text", ""))
                reason = validate_record_fields(fields, support_text, schema)
                if reason is not None:
                    logger.info("dropping record from %s: %s", window.window_id, reason)
                    failures.append(ValidationFailure(
                        window_id=window.window_id, reason=reason,
                        fields=fields if isinstance(fields, dict) else {}))
                    continue
                records.append(ExtractionRecord(
                    record_id=f"{window.window_id}#r{ri}",
                    doc_id=window.doc_id,
                    window_id=window.window_id,
                    probe_id=best_probe,
                    fields=_clean_fields(fields, schema),
                    support_text=support_text,
                ))
    return records, failures


def deduplicate(records: list[ExtractionRecord],
                schema: ExtractionSchema,
                key_fields: list[str] | None = None) -> list[ExtractionRecord]:
    """Drop later duplicates, keeping the first record in rank order.

    Two records are duplicates when they agree on (doc_id + every key
    field) after whitespace/case normalization. By default every schema
    data field participates in the key, so records differing in any
    declared context field survive as distinct rows.
    """
    if key_fields is None:
        key_fields = [f.name for f in schema.data_fields]
    else:
        unknown = set(key_fields) - set(schema.field_names)
        if unknown:
            raise ConfigError(f"dedup key references unknown fields {sorted(unknown)}")
    seen: set[tuple] = set()
    kept: list[ExtractionRecord] = []
    for record in records:
        key = (record.doc_id,) + tuple(
            normalize_field_value(record.fields.get(name, "")) for name in key_fields)
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return kept


def write_records_jsonl(records: list[ExtractionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_records_jsonl(path: str | Path) -> list[ExtractionRecord]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"records file not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(ExtractionRecord(
                    record_id=obj["record_id"], doc_id=obj["doc_id"],
                    window_id=obj["window_id"], probe_id=obj["probe_id"],
                    fields=dict(obj["fields"]), support_text=obj["support_text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"bad record at {path.name}:{lineno}: {exc}") from None
    return records


def write_failures_jsonl(failures: list[ValidationFailure], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for failure in failures:
            fh.write(json.dumps(failure.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
