"""Query-construction loop: estimate per-probe precision and the probe
set's recall gap, iterate Proposer refinements until thresholds or caps,
then induce and freeze the extraction schema.

Precision is estimated by sampling windows from a probe's ranked matches
and asking the Validator what fraction is relevant. The recall gap is
estimated on the opposite side: windows ranked highly by the probes'
semantic queries but excluded by every probe's entity filter; the
fraction of those the Validator marks relevant approximates how much
relevant text the current probe set misses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Embedder
from .errors import ConfigError, DataError, OracleError, ParseError
from .filters import (
    Probe,
    RankedHit,
    evaluate_filter,
    excluded_but_relevant,
    probe_from_payload,
    probe_search,
)
from .index import EntityIndex
from .oracles import AgentRole, Oracle, OracleRequest

logger = logging.getLogger(__name__)

TERMINATION_THRESHOLDS = "thresholds_met"
TERMINATION_PROBE_CAP = "probe_cap"
TERMINATION_ITERATION_CAP = "iteration_cap"

UNIVERSAL_FIELDS = ("doc_id", "support_text")
FIELD_KINDS = ("string", "enum", "number", "boolean")


def derive_seed(seed: int, label: str) -> int:
    """Stable per-stage sub-seed so stages replay independently."""
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class LoopConfig:
    """Thresholds, sample sizes, and caps for the construction loop."""

    rng_seed: int
    precision_target: float = 0.80
    recall_gap_max: float = 0.15
    precision_sample_n: int = 50
    recall_pool_n: int = 50
    max_probes: int = 8
    max_iterations: int = 10
    sample_full_match_set: bool = False
    paper_level_relevance: bool = False
    rank_region_factor: int = 10
    investigator_max_samples: int = 10
    schema_sample_docs: int = 100
    schema_validate_n: int = 20

    def __post_init__(self):
        if not 0.0 < self.precision_target < 1.0:
            raise ConfigError(f"precision_target must be in (0, 1), got {self.precision_target}")
        if not 0.0 < self.recall_gap_max < 1.0:
            raise ConfigError(f"recall_gap_max must be in (0, 1), got {self.recall_gap_max}")
        for name in ("precision_sample_n", "recall_pool_n", "max_probes", "max_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class PrecisionEstimate:
    probe_id: str
    sampled_window_ids: list[str]
    relevant_count: int
    precision: float
    degenerate: bool = False
    skipped: int = 0
    rejected_window_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"probe_id": self.probe_id, "sampled_window_ids": self.sampled_window_ids,
                "relevant_count": self.relevant_count, "precision": self.precision,
                "degenerate": self.degenerate, "skipped": self.skipped}


@dataclass
class RecallGapEstimate:
    pool_window_ids: list[str]
    relevant_count: int
    gap: float
    degenerate: bool = False
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"pool_window_ids": self.pool_window_ids,
                "relevant_count": self.relevant_count, "gap": self.gap,
                "degenerate": self.degenerate, "skipped": self.skipped}


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    allowed_values: tuple[str, ...] | None = None
    required: bool = False

    def __post_init__(self):
        if not self.name:
            raise DataError("schema field with empty name")
        if self.kind not in FIELD_KINDS:
            raise DataError(f"schema field {self.name!r} has unknown kind {self.kind!r}")
        if self.kind == "enum" and not self.allowed_values:
            raise DataError(f"enum field {self.name!r} needs allowed values")
        if self.kind != "enum" and self.allowed_values:
            raise DataError(f"field {self.name!r} of kind {self.kind} cannot carry allowed values")

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "kind": self.kind, "required": self.required}
        if self.allowed_values is not None:
            out["allowed_values"] = list(self.allowed_values)
        return out


@dataclass(frozen=True)
class ExtractionSchema:
    """Frozen field layout plus the task instantiation text.

    The universal fields (doc_id, support_text) are always present and
    required; they ride on the record itself rather than the field map.
    """

    fields: tuple[FieldSpec, ...]
    task_instantiation: str = ""

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(names) != len(set(names)):
            raise DataError(f"schema has duplicate field names: {names}")
        missing = [u for u in UNIVERSAL_FIELDS if u not in names]
        if missing:
            raise DataError(f"schema missing universal fields {missing}")
        for f in self.fields:
            if f.name in UNIVERSAL_FIELDS and not f.required:
                raise DataError(f"universal field {f.name!r} must be required")

    @property
    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def data_fields(self) -> list[FieldSpec]:
        """Schema fields excluding the universal ones."""
        return [f for f in self.fields if f.name not in UNIVERSAL_FIELDS]

    def field(self, name: str) -> FieldSpec | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def to_dict(self) -> dict:
        return {"fields": [f.to_dict() for f in self.fields],
                "task_instantiation": self.task_instantiation}


def schema_from_payload(payload: dict) -> ExtractionSchema:
    """Build a schema from an oracle payload, adding universal fields if
    the Proposer left them out."""
    fields: list[FieldSpec] = []
    seen: set[str] = set()
    for obj in payload.get("fields", []):
        name = str(obj["name"])
        if name in seen:
            raise DataError(f"schema payload repeats field {name!r}")
        seen.add(name)
        allowed = obj.get("allowed_values")
        fields.append(FieldSpec(
            name=name,
            kind=str(obj["kind"]),
            allowed_values=None if allowed is None else tuple(str(v) for v in allowed),
            required=bool(obj.get("required", name in UNIVERSAL_FIELDS)),
        ))
    prefix = [FieldSpec(name=universal, kind="string", required=True)
              for universal in UNIVERSAL_FIELDS if universal not in seen]
    return ExtractionSchema(fields=tuple(prefix + fields),
                            task_instantiation=str(payload.get("task_instantiation", "")))


def schema_from_dict(obj: dict) -> ExtractionSchema:
    return schema_from_payload(obj)


@dataclass
class IterationRecord:
    iteration: int
    probe_ids: list[str]
    precision: list[PrecisionEstimate]
    recall_gap: RecallGapEstimate

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "probe_ids": self.probe_ids,
                "precision": [p.to_dict() for p in self.precision],
                "recall_gap": self.recall_gap.to_dict()}


@dataclass
class LoopReport:
    probes: list[Probe]
    iterations: list[IterationRecord]
    termination: str
    schema: ExtractionSchema

    def to_dict(self) -> dict:
        return {
            "probes": [{"probe_id": p.probe_id, "spec": p.spec.to_dict()} for p in self.probes],
            "iterations": [it.to_dict() for it in self.iterations],
            "termination": self.termination,
            "schema": self.schema.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def loop_report_from_dict(obj: dict) -> "LoopReport":
    """Rehydrate the parts downstream stages need (probes, schema)."""
    probes = [probe_from_payload(p, f"probes[{i}]") for i, p in enumerate(obj["probes"])]
    schema = schema_from_dict(obj["schema"])
    iterations: list[IterationRecord] = []
    for it in obj.get("iterations", []):
        iterations.append(IterationRecord(
            iteration=it["iteration"],
            probe_ids=list(it["probe_ids"]),
            precision=[PrecisionEstimate(
                probe_id=p["probe_id"], sampled_window_ids=list(p["sampled_window_ids"]),
                relevant_count=p["relevant_count"], precision=p["precision"],
                degenerate=p.get("degenerate", False), skipped=p.get("skipped", 0),
            ) for p in it["precision"]],
            recall_gap=RecallGapEstimate(
                pool_window_ids=list(it["recall_gap"]["pool_window_ids"]),
                relevant_count=it["recall_gap"]["relevant_count"],
                gap=it["recall_gap"]["gap"],
                degenerate=it["recall_gap"].get("degenerate", False),
                skipped=it["recall_gap"].get("skipped", 0),
            ),
        ))
    return LoopReport(probes=probes, iterations=iterations,
                      termination=obj["termination"], schema=schema)


def _judge_relevance(validator: Oracle, probe_id: str, window_id: str,
                     doc_id: str, text: str) -> bool | None:
    """One Validator relevance call; None means the call failed and the
    sample should be skipped."""
    request = OracleRequest(role=AgentRole.VALIDATOR, kind="judge_relevance",
                            payload={"probe_id": probe_id, "window_id": window_id,
                                     "doc_id": doc_id, "text": text})
    try:
        return bool(validator.call(request).payload["relevant"])
    except OracleError as exc:
        logger.warning("validator call failed for %s, skipping sample: %s", window_id, exc)
        return None


def _sample_units(hits: list[RankedHit], corpus: Corpus, config: LoopConfig,
                  rng: random.Random) -> list[RankedHit]:
    """Pick the units to judge: windows, or best-window-per-document when
    relevance is configured at paper level."""
    if config.paper_level_relevance:
        best_by_doc: dict[str, RankedHit] = {}
        for hit in hits:
            if hit.doc_id not in best_by_doc:
                best_by_doc[hit.doc_id] = hit
        hits = list(best_by_doc.values())
    k = min(config.precision_sample_n, len(hits))
    return rng.sample(hits, k)


def estimate_precision(probe: Probe, index: EntityIndex, corpus: Corpus,
                       embedder: Embedder, validator: Oracle, config: LoopConfig,
                       rng: random.Random) -> PrecisionEstimate:
    """Sample the probe's ranked matches and judge each for relevance.

    Sampling is uniform without replacement over the top ranked region
    (``rank_region_factor * precision_sample_n`` hits), where extraction
    will actually read; set ``sample_full_match_set`` to sample the whole
    match set instead.
    """
    matches = evaluate_filter(probe.spec, index)
    if not matches:
        logger.warning("probe %s matches no windows; precision degenerate", probe.probe_id)
        return PrecisionEstimate(probe_id=probe.probe_id, sampled_window_ids=[],
                                 relevant_count=0, precision=0.0, degenerate=True)
    if config.sample_full_match_set:
        hits = [RankedHit(window_id=corpus.window(o).window_id, ordinal=o,
                          doc_id=corpus.window(o).doc_id, score=0.0,
                          probe_id=probe.probe_id)
                for o in matches.to_array().tolist()]
    else:
        region = config.rank_region_factor * config.precision_sample_n
        hits = probe_search(probe, index, corpus, embedder, top_k=region)
    sampled = _sample_units(hits, corpus, config, rng)
    relevant = 0
    skipped = 0
    judged_ids: list[str] = []
    rejected: list[str] = []
    for hit in sampled:
        verdict = _judge_relevance(validator, probe.probe_id, hit.window_id,
                                   hit.doc_id, corpus.window(hit.ordinal).text)
        if verdict is None:
            skipped += 1
            continue
        judged_ids.append(hit.window_id)
        if verdict:
            relevant += 1
        else:
            rejected.append(hit.window_id)
    precision = relevant / len(judged_ids) if judged_ids else 0.0
    return PrecisionEstimate(probe_id=probe.probe_id, sampled_window_ids=judged_ids,
                             relevant_count=relevant, precision=precision,
                             degenerate=not judged_ids, skipped=skipped,
                             rejected_window_ids=rejected)


def estimate_recall_gap(probes: list[Probe], index: EntityIndex, corpus: Corpus,
                        embedder: Embedder, validator: Oracle, config: LoopConfig,
                        rng: random.Random | None = None) -> RecallGapEstimate:
    """Judge the top windows every probe's filter excludes.

    The pool itself is deterministic (top ``recall_pool_n`` by best query
    similarity); ``rng`` is accepted for interface symmetry with the
    precision estimator.
    """
    del rng
    pool = excluded_but_relevant(probes, index, corpus, embedder,
                                 pool_k=config.recall_pool_n)
    if not pool:
        logger.warning("no windows excluded by all probes; recall gap degenerate")
        return RecallGapEstimate(pool_window_ids=[], relevant_count=0, gap=0.0,
                                 degenerate=True)
    relevant = 0
    skipped = 0
    judged_ids: list[str] = []
    for hit in pool:
        verdict = _judge_relevance(validator, hit.probe_id, hit.window_id,
                                   hit.doc_id, corpus.window(hit.ordinal).text)
        if verdict is None:
            skipped += 1
            continue
        judged_ids.append(hit.window_id)
        if verdict:
            relevant += 1
    gap = relevant / len(judged_ids) if judged_ids else 0.0
    return RecallGapEstimate(pool_window_ids=judged_ids, relevant_count=relevant,
                             gap=gap, degenerate=not judged_ids, skipped=skipped)


def _parse_probes_payload(payload: dict, max_probes: int, context: str) -> list[Probe]:
    probes: list[Probe] = []
    seen: set[str] = set()
    for i, obj in enumerate(payload.get("probes", [])):
        try:
            probe = probe_from_payload(obj, f"{context}.probes[{i}]")
        except ParseError as exc:
            raise DataError(f"proposer returned an invalid probe: {exc}") from exc
        if probe.probe_id in seen:
            raise DataError(f"proposer repeated probe_id {probe.probe_id!r}")
        seen.add(probe.probe_id)
        probes.append(probe)
    if not probes:
        raise DataError("proposer returned an empty probe set")
    if len(probes) > max_probes:
        logger.warning("proposer returned %d probes; clamping to max_probes=%d",
                       len(probes), max_probes)
        probes = probes[:max_probes]
    return probes


def _investigate(investigator: Oracle, corpus: Corpus, probe: Probe,
                 estimate: PrecisionEstimate, config: LoopConfig) -> list[str]:
    rejected = estimate.rejected_window_ids[:config.investigator_max_samples]
    if not rejected:
        return []
    samples = [{"window_id": wid, "text": corpus.window_by_id(wid).text}
               for wid in rejected]
    request = OracleRequest(
        role=AgentRole.INVESTIGATOR, kind="suggest_refinements",
        payload={"probe_id": probe.probe_id, "spec": probe.spec.to_dict(),
                 "rejected_samples": samples})
    try:
        return [str(s) for s in investigator.call(request).payload["suggestions"]]
    except OracleError as exc:
        logger.warning("investigator call failed for probe %s: %s", probe.probe_id, exc)
        return []


def _thresholds_met(precision: list[PrecisionEstimate], gap: RecallGapEstimate,
                    config: LoopConfig) -> bool:
    # Probe-set precision aggregates conservatively: every probe must
    # individually clear the target.
    return (all(p.precision >= config.precision_target for p in precision)
            and gap.gap <= config.recall_gap_max)


def run_probe_loop(task_text: str, oracle: Oracle, index: EntityIndex,
                   corpus: Corpus, embedder: Embedder,
                   config: LoopConfig) -> LoopReport:
    """Run the full construction loop and freeze the extraction schema.

    Proposer failures abort the run; Validator and Investigator failures
    only skip the affected sample or suggestion. Termination is one of
    thresholds_met, probe_cap (probe count reached ``max_probes`` with
    thresholds still unmet), or iteration_cap.
    """
    initial = oracle.call(OracleRequest(
        role=AgentRole.PROPOSER, kind="propose_probes",
        payload={"task": task_text}))
    probes = _parse_probes_payload(initial.payload, config.max_probes, "propose_probes")

    iterations: list[IterationRecord] = []
    termination = TERMINATION_ITERATION_CAP
    for iteration in range(1, config.max_iterations + 1):
        estimates = []
        for probe in probes:
            rng = random.Random(derive_seed(
                config.rng_seed, f"precision/{iteration}/{probe.probe_id}"))
            estimates.append(estimate_precision(
                probe, index, corpus, embedder, oracle, config, rng))
        gap = estimate_recall_gap(probes, index, corpus, embedder, oracle, config)
        iterations.append(IterationRecord(
            iteration=iteration, probe_ids=[p.probe_id for p in probes],
            precision=estimates, recall_gap=gap))

        if _thresholds_met(estimates, gap, config):
            termination = TERMINATION_THRESHOLDS
            break
        if len(probes) >= config.max_probes:
            termination = TERMINATION_PROBE_CAP
            break
        if iteration == config.max_iterations:
            termination = TERMINATION_ITERATION_CAP
            break

        suggestions = {}
        for probe, estimate in zip(probes, estimates):
            if estimate.precision < config.precision_target:
                found = _investigate(oracle, corpus, probe, estimate, config)
                if found:
                    suggestions[probe.probe_id] = found
        revision = oracle.call(OracleRequest(
            role=AgentRole.PROPOSER, kind="revise_probes",
            payload={
                "task": task_text,
                "probes": [{"probe_id": p.probe_id, "spec": p.spec.to_dict()}
                           for p in probes],
                "precision": {e.probe_id: e.precision for e in estimates},
                "recall_gap": gap.gap,
                "suggestions": suggestions,
            }))
        probes = _parse_probes_payload(revision.payload, config.max_probes, "revise_probes")

    schema = induce_schema(probes, oracle, index, corpus, embedder, config)
    return LoopReport(probes=probes, iterations=iterations,
                      termination=termination, schema=schema)


def _best_window_per_doc(probes: list[Probe], index: EntityIndex, corpus: Corpus,
                         embedder: Embedder) -> dict[str, int]:
    """For each document in the probe-union match set, the matching window
    with the highest best-over-probes query similarity."""
    union = None
    for probe in probes:
        matches = evaluate_filter(probe.spec, index)
        union = matches if union is None else (union | matches)
    assert union is not None
    ordinals = union.to_array()
    if len(ordinals) == 0:
        return {}
    embeddings = corpus.require_embeddings()
    query_matrix = np.stack([embedder.embed_one(p.spec.semantic_query) for p in probes])
    scores = (embeddings[ordinals] @ query_matrix.T).max(axis=1)
    best: dict[str, tuple[float, int]] = {}
    for ordinal, score in zip(ordinals.tolist(), scores.tolist()):
        doc_id = corpus.window(ordinal).doc_id
        current = best.get(doc_id)
        if current is None or score > current[0]:
            best[doc_id] = (score, ordinal)
    return {doc_id: ordinal for doc_id, (score, ordinal) in best.items()}


def _extract_trial(oracle: Oracle, corpus: Corpus, ordinal: int, kind: str,
                   schema: ExtractionSchema | None = None) -> list[dict]:
    window = corpus.window(ordinal)
    payload: dict = {"window_id": window.window_id, "doc_id": window.doc_id,
                     "text": window.text}
    if schema is not None:
        payload["schema"] = schema.to_dict()
        payload["task_instantiation"] = schema.task_instantiation
    try:
        response = oracle.call(OracleRequest(role=AgentRole.EXTRACTOR, kind=kind,
                                             payload=payload))
    except OracleError as exc:
        logger.warning("extractor call failed on %s: %s", window.window_id, exc)
        return []
    return list(response.payload["records"])


def induce_schema(probes: list[Probe], oracle: Oracle, index: EntityIndex,
                  corpus: Corpus, embedder: Embedder,
                  config: LoopConfig) -> ExtractionSchema:
    """Derive a unified extraction schema from free-form trial extractions.

    Samples documents from the probe-union match set, runs the Extractor
    schema-free on each document's best window, asks the Proposer to unify
    the result into a schema plus task instantiation, then loops Validator
    scoring of schema-bound trial extractions against the precision target
    until it passes or the iteration cap is hit.
    """
    best_windows = _best_window_per_doc(probes, index, corpus, embedder)
    if not best_windows:
        raise DataError("no retrieval set: probe union matches no windows")
    rng = random.Random(derive_seed(config.rng_seed, "schema/sample"))
    doc_ids = sorted(best_windows)
    sampled_docs = rng.sample(doc_ids, min(config.schema_sample_docs, len(doc_ids)))

    freeform: list[dict] = []
    for doc_id in sampled_docs:
        for record in _extract_trial(oracle, corpus, best_windows[doc_id],
                                     "extract_freeform"):
            freeform.append({"doc_id": doc_id, "fields": record.get("fields", {})})

    proposal = oracle.call(OracleRequest(
        role=AgentRole.PROPOSER, kind="propose_schema",
        payload={"freeform_records": freeform}))
    schema = schema_from_payload(proposal.payload)

    trial_docs = sampled_docs[:config.schema_validate_n]
    for round_no in range(1, config.max_iterations + 1):
        scored = 0
        passed = 0
        failures: list[dict] = []
        for doc_id in trial_docs:
            for record in _extract_trial(oracle, corpus, best_windows[doc_id],
                                         "extract_with_schema", schema):
                request = OracleRequest(
                    role=AgentRole.VALIDATOR, kind="score_extraction",
                    payload={"doc_id": doc_id, "fields": record.get("fields", {}),
                             "support_text": record.get("support_text", ""),
                             "schema": schema.to_dict()})
                try:
                    ok = bool(oracle.call(request).payload["pass"])
                except OracleError as exc:
                    logger.warning("validator scoring failed on %s: %s", doc_id, exc)
                    continue
                scored += 1
                if ok:
                    passed += 1
                else:
                    failures.append({"doc_id": doc_id, "fields": record.get("fields", {})})
        pass_rate = passed / scored if scored else 1.0
        if pass_rate >= config.precision_target:
            break
        if round_no == config.max_iterations:
            logger.warning("schema induction hit the iteration cap at pass rate %.2f",
                           pass_rate)
            break
        revision = oracle.call(OracleRequest(
            role=AgentRole.PROPOSER, kind="revise_schema",
            payload={"schema": schema.to_dict(), "pass_rate": pass_rate,
                     "failures": failures}))
        schema = schema_from_payload(revision.payload)
    return schema
