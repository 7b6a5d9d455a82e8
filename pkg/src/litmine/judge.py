"""Five-axis record grading; a record is kept only when every axis passes.

The rubric text is opaque configuration handed to the oracle adapter.
The engine owns only the conjunction rule and the bookkeeping: per-axis
failure counts, the overall error rate (fraction of graded records
failing at least one axis), and a quarantine for records whose grading
call failed, so dataset accounting stays exact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus
from .errors import DataError, OracleError
from .extraction import ExtractionRecord
from .judge_axes import AXIS_KEYS, DEFAULT_RUBRIC, JudgeAxis
from .oracles import AgentRole, Oracle, OracleRequest

logger = logging.getLogger(__name__)

__all__ = ["JudgeAxis", "JudgeVerdict", "JudgeReport", "judge_record",
           "filter_records", "write_verdicts_jsonl", "DEFAULT_RUBRIC"]


@dataclass(frozen=True)
class JudgeVerdict:
    record_id: str
    axes: dict[str, bool]
    kept: bool
    graded: bool = True

    def __post_init__(self):
        if self.graded:
            if set(self.axes) != set(AXIS_KEYS):
                raise DataError(f"verdict for {self.record_id} must cover all five axes")
            expected = all(self.axes.values())
            if self.kept != expected:
                raise DataError(
                    f"verdict for {self.record_id}: kept={self.kept} but axes say {expected}")
        elif self.kept:
            raise DataError(f"ungraded record {self.record_id} cannot be kept")

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "axes": self.axes,
                "kept": self.kept, "graded": self.graded}


@dataclass
class JudgeReport:
    total: int = 0
    graded: int = 0
    kept: int = 0
    quarantined: int = 0
    axis_failures: dict[str, int] = field(default_factory=lambda: {k: 0 for k in AXIS_KEYS})

    @property
    def error_rate(self) -> float:
        """Fraction of graded records failing at least one axis."""
        if self.graded == 0:
            return 0.0
        return (self.graded - self.kept) / self.graded

    def to_dict(self) -> dict:
        return {"total": self.total, "graded": self.graded, "kept": self.kept,
                "quarantined": self.quarantined, "axis_failures": self.axis_failures,
                "error_rate": self.error_rate}


def _context_text(corpus: Corpus, record: ExtractionRecord, context_windows: int) -> str:
    """Source window text plus ``context_windows`` neighbors each side."""
    try:
        window = corpus.window_by_id(record.window_id)
    except DataError:
        return ""
    ordinals = corpus.window_ordinals_for_doc(window.doc_id)
    pos = ordinals.index(window.ordinal)
    lo = max(0, pos - context_windows)
    hi = min(len(ordinals), pos + context_windows + 1)
    return "\n".join(corpus.window(o).text for o in ordinals[lo:hi])


def judge_record(record: ExtractionRecord, context_text: str,
                 rubric: dict[str, str], judge: Oracle) -> JudgeVerdict:
    """Grade one record; an oracle failure quarantines it (neither kept
    nor discarded) rather than guessing."""
    request = OracleRequest(
        role=AgentRole.JUDGE, kind="judge_record",
        payload={"record_id": record.record_id, "doc_id": record.doc_id,
                 "fields": record.fields, "support_text": record.support_text,
                 "context_text": context_text, "rubric": rubric})
    try:
        axes_raw = judge.call(request).payload["axes"]
    except OracleError as exc:
        logger.warning("judge call failed for %s; quarantining: %s", record.record_id, exc)
        return JudgeVerdict(record_id=record.record_id, axes={}, kept=False, graded=False)
    axes = {key: bool(axes_raw[key]) for key in AXIS_KEYS}
    return JudgeVerdict(record_id=record.record_id, axes=axes,
                        kept=all(axes.values()))


def filter_records(records: list[ExtractionRecord], corpus: Corpus | None,
                   judge: Oracle, rubric: dict[str, str] | None = None,
                   context_windows: int = 1,
                   ) -> tuple[list[ExtractionRecord], list[JudgeVerdict], JudgeReport]:
    """Grade every record and keep those passing all five axes.

    Kept records preserve input order. When ``corpus`` is None the judge
    sees only the record's own support text as context.
    """
    rubric = rubric if rubric is not None else DEFAULT_RUBRIC
    kept: list[ExtractionRecord] = []
    verdicts: list[JudgeVerdict] = []
    report = JudgeReport()
    for record in records:
        context = (_context_text(corpus, record, context_windows)
                   if corpus is not None else record.support_text)
        verdict = judge_record(record, context, rubric, judge)
        verdicts.append(verdict)
        report.total += 1
        if not verdict.graded:
            report.quarantined += 1
            continue
        report.graded += 1
        for key, passed in verdict.axes.items():
            if not passed:
                report.axis_failures[key] += 1
        if verdict.kept:
            report.kept += 1
            kept.append(record)
    return kept, verdicts, report


def write_verdicts_jsonl(verdicts: list[JudgeVerdict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for verdict in verdicts:
            fh.write(json.dumps(verdict.to_dict(), sort_keys=True) + "\n")
