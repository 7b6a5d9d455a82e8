"""Stage runner for full pipeline runs.

Stages run in a fixed order (ingest, index, probe_loop, extract, judge,
analyze) inside one run directory. Every stage writes its artifacts plus
a marker file recording their digests; a rerun skips stages whose marker
and outputs are intact, so a run killed between stages resumes to
byte-identical results. Oracle request kinds are partitioned by stage,
which keeps scripted-oracle streams aligned across resumes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis as analysis_mod
from .config import RunConfig
from .corpus import Corpus, Embedder, ingest_corpus, load_corpus, save_corpus
from .errors import ConfigError, DataError
from .extraction import (
    deduplicate,
    extract_windows,
    match_probes,
    rank_subcorpus,
    read_records_jsonl,
    write_failures_jsonl,
    write_records_jsonl,
)
from .index import EntityIndex, build_index, load_index, save_index
from .judge import filter_records, write_verdicts_jsonl
from .oracles import AuditingOracle, AuditLog, HttpOracle, Oracle, ScriptedOracle
from .probe_loop import LoopReport, loop_report_from_dict, run_probe_loop
from .tags import ResolverCascades, load_tags

logger = logging.getLogger(__name__)

STAGES = ("ingest", "index", "probe_loop", "extract", "judge", "analyze")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunContext:
    cfg: RunConfig
    run_dir: Path
    task: str | None = None
    _corpus: Corpus | None = None
    _index: EntityIndex | None = None
    _report: LoopReport | None = None
    _oracle: Oracle | None = None
    _cascades: ResolverCascades | None = None
    _embedder: Embedder | None = field(default=None, repr=False)
    _embedder_made: bool = False

    @property
    def cascades(self) -> ResolverCascades:
        if self._cascades is None:
            self._cascades = self.cfg.load_resolvers()
        return self._cascades

    @property
    def embedder(self) -> Embedder | None:
        if not self._embedder_made:
            self._embedder = self.cfg.make_embedder()
            self._embedder_made = True
        return self._embedder

    def require_embedder(self) -> Embedder:
        embedder = self.embedder
        if embedder is None:
            raise ConfigError("this stage needs an embedder; configure [embedder] kind")
        return embedder

    def base_oracle(self) -> Oracle:
        if self._oracle is None:
            if self.cfg.oracle_script is not None:
                self._oracle = ScriptedOracle.from_file(self.cfg.oracle_script)
            elif self.cfg.oracle_url:
                self._oracle = HttpOracle(self.cfg.oracle_url,
                                          token_env=self.cfg.oracle_token_env)
            else:
                raise ConfigError("no oracle configured: set [oracle] script or url")
        return self._oracle

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.run_dir / "corpus")
        return self._corpus

    def index(self) -> EntityIndex:
        if self._index is None:
            self._index = load_index(self.run_dir / "index" / "index.json",
                                     cascades=self.cascades)
        return self._index

    def report(self) -> LoopReport:
        if self._report is None:
            path = self.run_dir / "probe_loop" / "loop_report.json"
            if not path.exists():
                raise DataError(f"no probe-loop report at {path}; run that stage first")
            self._report = loop_report_from_dict(
                json.loads(path.read_text(encoding="utf-8")))
        return self._report


def _marker_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "markers" / f"{stage}.json"


def write_marker(run_dir: Path, stage: str, status: str,
                 outputs: list[Path], counts: dict) -> None:
    marker_dir = run_dir / "markers"
    marker_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "status": status,
        "counts": counts,
        "outputs": {
            str(p.relative_to(run_dir)): file_digest(p) for p in sorted(outputs)
        },
    }
    _marker_path(run_dir, stage).write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def marker_ok(run_dir: Path, stage: str) -> dict | None:
    """The stage's marker if it exists and all outputs are intact."""
    path = _marker_path(run_dir, stage)
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None
    for rel, digest in doc.get("outputs", {}).items():
        target = run_dir / rel
        if not target.exists() or file_digest(target) != digest:
            logger.warning("stage %s marker present but %s changed; rerunning", stage, rel)
            return None
    return doc


def stage_ingest(ctx: RunContext) -> tuple[list[Path], dict]:
    corpus = ingest_corpus(ctx.cfg.corpus_path, ctx.cfg.windowing,
                           embedder=ctx.embedder, workers=ctx.cfg.workers)
    ctx._corpus = corpus
    written = save_corpus(corpus, ctx.run_dir / "corpus")
    counts = {"documents": len(corpus.documents), "windows": len(corpus.windows)}
    return written, counts


def stage_index(ctx: RunContext) -> tuple[list[Path], dict]:
    store = load_tags(ctx.cfg.tags_path, ctx.corpus(), ctx.cascades)
    index = build_index(store)
    ctx._index = index
    out_dir = ctx.run_dir / "index"
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.json"
    save_index(index, index_path)
    counts = {
        "tags": store.tag_count,
        "entities": len(index.entity_postings),
        "types": len(index.type_postings),
        "postings": int(sum(len(p) for p in index.entity_postings.values())),
    }
    return [index_path], counts


def _audited_oracle(ctx: RunContext) -> tuple[Oracle, AuditLog]:
    log = AuditLog()
    return AuditingOracle(ctx.base_oracle(), log), log


def stage_probe_loop(ctx: RunContext) -> tuple[list[Path], dict]:
    task = ctx.task or ctx.cfg.task
    if not task:
        raise ConfigError("no task text: pass --task or set task in [run]")
    if ctx.cfg.loop is None:
        raise ConfigError("config has no [loop] section")
    oracle, audit = _audited_oracle(ctx)
    report = run_probe_loop(task, oracle, ctx.index(), ctx.corpus(),
                            ctx.require_embedder(), ctx.cfg.loop)
    ctx._report = report
    out_dir = ctx.run_dir / "probe_loop"
    out_dir.mkdir(parents=True, exist_ok=True)
    audit_path = out_dir / "audit.jsonl"
    audit.write_jsonl(audit_path)
    report_doc = report.to_dict()
    report_doc["audit_digest"] = file_digest(audit_path)
    report_path = out_dir / "loop_report.json"
    report_path.write_text(json.dumps(report_doc, sort_keys=True, indent=2) + "\n",
                           encoding="utf-8")
    counts = {"probes": len(report.probes), "iterations": len(report.iterations),
              "termination": report.termination,
              "oracle_calls": len(audit.entries)}
    return [report_path, audit_path], counts


def stage_extract(ctx: RunContext) -> tuple[list[Path], dict]:
    report = ctx.report()
    corpus = ctx.corpus()
    embedder = ctx.require_embedder()
    oracle, audit = _audited_oracle(ctx)
    matches = match_probes(report.probes, ctx.index(), corpus, embedder)
    ranked = rank_subcorpus(report.probes, ctx.index(), corpus, embedder,
                            weights=ctx.cfg.weights, matches=matches)
    records, failures = extract_windows(
        ranked, report.schema, oracle, ctx.cfg.extraction_budget,
        matches=matches, corpus=corpus)
    deduped = deduplicate(records, report.schema)

    out_dir = ctx.run_dir / "extract"
    out_dir.mkdir(parents=True, exist_ok=True)
    ranking_path = out_dir / "ranking.jsonl"
    with ranking_path.open("w", encoding="utf-8") as fh:
        for paper in ranked:
            fh.write(json.dumps(paper.to_dict(), sort_keys=True) + "\n")
    records_path = out_dir / "records.jsonl"
    write_records_jsonl(deduped, records_path)
    failures_path = out_dir / "validation_failures.jsonl"
    write_failures_jsonl(failures, failures_path)
    audit_path = out_dir / "audit.jsonl"
    audit.write_jsonl(audit_path)
    counts = {"papers_ranked": len(ranked), "records_extracted": len(records),
              "records_deduplicated": len(deduped),
              "validation_failures": len(failures),
              "oracle_calls": len(audit.entries)}
    return [ranking_path, records_path, failures_path, audit_path], counts


def stage_judge(ctx: RunContext) -> tuple[list[Path], dict]:
    records = read_records_jsonl(ctx.run_dir / "extract" / "records.jsonl")
    oracle, audit = _audited_oracle(ctx)
    kept, verdicts, report = filter_records(
        records, ctx.corpus(), oracle, rubric=ctx.cfg.load_rubric(),
        context_windows=ctx.cfg.judge_context_windows)
    out_dir = ctx.run_dir / "judge"
    out_dir.mkdir(parents=True, exist_ok=True)
    verdicts_path = out_dir / "verdicts.jsonl"
    write_verdicts_jsonl(verdicts, verdicts_path)
    kept_path = out_dir / "kept.jsonl"
    write_records_jsonl(kept, kept_path)
    report_path = out_dir / "report.json"
    analysis_mod.write_json(report.to_dict(), report_path)
    audit_path = out_dir / "audit.jsonl"
    audit.write_jsonl(audit_path)
    counts = {"graded": report.graded, "kept": report.kept,
              "quarantined": report.quarantined,
              "error_rate": report.error_rate,
              "oracle_calls": len(audit.entries)}
    return [verdicts_path, kept_path, report_path, audit_path], counts


def stage_analyze(ctx: RunContext) -> tuple[list[Path], dict]:
    cfg = ctx.cfg.analysis
    if cfg is None:
        return [], {"skipped": True}
    records = read_records_jsonl(ctx.run_dir / "judge" / "kept.jsonl")
    out_dir = ctx.run_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    counts: dict = {"records": len(records)}

    mapping = analysis_mod.LabelMapping(
        entity_field=cfg.entity_field, label_field=cfg.label_field,
        covariate_fields=cfg.covariates, label_kind=cfg.label_kind,
        positive_values=cfg.positive_values, negative_values=cfg.negative_values,
        transform=cfg.transform)
    if cfg.covariates:
        results = analysis_mod.eta2_report(records, mapping)
        eta_json = out_dir / "eta2.json"
        analysis_mod.write_json(
            {cov: r.to_dict() for cov, r in results.items()}, eta_json)
        eta_csv = out_dir / "eta2.csv"
        analysis_mod.write_eta2_csv(results, eta_csv)
        written += [eta_json, eta_csv]
        counts["covariates"] = len(results)

    if cfg.reference_path is not None:
        ref_doc = json.loads(Path(cfg.reference_path).read_text(encoding="utf-8"))
        key_field = cfg.ours_key_field or cfg.entity_field
        ours = {str(r.fields.get(key_field)) for r in records
                if r.fields.get(key_field) is not None}
        cov = analysis_mod.coverage(ours, set(map(str, ref_doc["keys"])),
                                    reference_name=str(ref_doc.get("name", "reference")))
        coverage_path = out_dir / "coverage.json"
        analysis_mod.write_json(cov.to_dict(), coverage_path)
        written.append(coverage_path)
        counts["coverage"] = cov.coverage

    if cfg.external_labels_path is not None:
        external_doc = json.loads(Path(cfg.external_labels_path).read_text(encoding="utf-8"))
        external = {str(k): int(v) for k, v in external_doc.items()}
        per_entity: dict[str, list[int]] = {}
        for record in records:
            entity = record.fields.get(cfg.entity_field)
            label = mapping.label_value(record.fields.get(cfg.label_field))
            if entity is None or label is None:
                continue
            per_entity.setdefault(str(entity), []).append(int(label))
        stats_ = analysis_mod.disagreement(per_entity, external)
        disagreement_path = out_dir / "disagreement.json"
        analysis_mod.write_json(stats_.to_dict(), disagreement_path)
        histogram_path = out_dir / "disagreement_histogram.csv"
        analysis_mod.write_histogram_csv(stats_, histogram_path)
        written += [disagreement_path, histogram_path]
        counts["majority_rate"] = stats_.majority_rate

    return written, counts


_STAGE_FUNCS = {
    "ingest": stage_ingest,
    "index": stage_index,
    "probe_loop": stage_probe_loop,
    "extract": stage_extract,
    "judge": stage_judge,
    "analyze": stage_analyze,
}


def run_stage(ctx: RunContext, stage: str) -> dict:
    """Run one stage unless its marker shows it already completed intact."""
    existing = marker_ok(ctx.run_dir, stage)
    if existing is not None:
        logger.info("stage %s already complete; skipping", stage)
        return existing
    outputs, counts = _STAGE_FUNCS[stage](ctx)
    status = "skipped" if counts.get("skipped") else "done"
    write_marker(ctx.run_dir, stage, status, outputs, counts)
    return json.loads(_marker_path(ctx.run_dir, stage).read_text(encoding="utf-8"))


def write_manifest(run_dir: Path) -> Path:
    """Aggregate stage markers and artifact digests into manifest.json."""
    stages: dict[str, dict] = {}
    for stage in STAGES:
        path = _marker_path(run_dir, stage)
        if path.exists():
            stages[stage] = json.loads(path.read_text(encoding="utf-8"))
    manifest = {"stages": stages}
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                             encoding="utf-8")
    return manifest_path


def run_pipeline(cfg: RunConfig, run_dir: Path, task: str | None = None,
                 stop_after: str | None = None) -> Path:
    """Run all stages in order, resuming past completed ones.

    ``stop_after`` ends the run cleanly after the named stage; a later
    invocation picks up from there.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}; stages are {', '.join(STAGES)}")
    run_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg=cfg, run_dir=run_dir, task=task)
    for stage in STAGES:
        run_stage(ctx, stage)
        if stage == stop_after:
            logger.info("stopping after stage %s as requested", stage)
            break
    return write_manifest(run_dir)
