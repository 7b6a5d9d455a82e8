"""Dataset analyses over kept records: within-entity effect sizes,
reference coverage, and disagreement against external labels.

Effect size is eta squared, the fraction of one entity's label variance
explained by a single covariate::

    eta2 = SS_between / SS_total
    SS_between = sum_g n_g * (mean_g - mean)^2
    SS_total   = sum_i (y_i - mean)^2

computed per entity over entities with >= 2 groups holding >= 2 labels
total, then averaged. Significance uses a pooled one-way F test: labels
are centered within each entity (removing entity-level offsets), pooled,
and tested across covariate categories with the F distribution.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, DataError
from .extraction import ExtractionRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupedLabels:
    """One entity's labels bucketed by a covariate's categories."""

    entity_key: str
    covariate: str
    groups: dict[str, list[float]]

    def __post_init__(self):
        for name, labels in self.groups.items():
            if not labels:
                raise DataError(
                    f"entity {self.entity_key!r} covariate {self.covariate!r}: "
                    f"empty group {name!r}")

    @property
    def total_count(self) -> int:
        return sum(len(v) for v in self.groups.values())

    def qualifies(self) -> bool:
        """At least two groups and at least two labels overall."""
        return len(self.groups) >= 2 and self.total_count >= 2

    def all_labels(self) -> list[float]:
        return [y for labels in self.groups.values() for y in labels]


def sums_of_squares(grouped: GroupedLabels) -> tuple[float, float]:
    """(SS_between, SS_total) for one entity."""
    values = grouped.all_labels()
    grand = sum(values) / len(values)
    ss_total = sum((y - grand) ** 2 for y in values)
    ss_between = sum(
        len(labels) * ((sum(labels) / len(labels)) - grand) ** 2
        for labels in grouped.groups.values())
    return ss_between, ss_total


def eta_squared(grouped: GroupedLabels) -> float:
    """Effect size in [0, 1]; zero total variance is degenerate and maps
    to 0 rather than dividing by zero."""
    if not grouped.qualifies():
        raise DataError(
            f"entity {grouped.entity_key!r} does not qualify: needs >=2 groups "
            f"and >=2 labels, has {len(grouped.groups)} groups / {grouped.total_count} labels")
    ss_between, ss_total = sums_of_squares(grouped)
    if ss_total <= 0.0:
        return 0.0
    # Guard tiny negative drift from float cancellation.
    return min(1.0, max(0.0, ss_between / ss_total))


def is_degenerate(grouped: GroupedLabels) -> bool:
    _, ss_total = sums_of_squares(grouped)
    return ss_total <= 0.0


@dataclass
class Eta2Result:
    covariate: str
    per_entity: dict[str, float]
    mean_eta2: float
    f_stat: float
    p_value: float
    degenerate_count: int = 0

    def to_dict(self) -> dict:
        return {"covariate": self.covariate, "per_entity": self.per_entity,
                "mean_eta2": self.mean_eta2, "f_stat": self.f_stat,
                "p_value": self.p_value, "degenerate_count": self.degenerate_count,
                "entity_count": len(self.per_entity)}


def pooled_f_test(entities: list[GroupedLabels]) -> tuple[float, float]:
    """One-way F across covariate categories on entity-centered labels.

    Centering removes each entity's own offset so only within-entity
    variation is pooled; the test then asks whether category means differ
    across the pooled sample.
    """
    values: list[float] = []
    cats: list[str] = []
    for grouped in entities:
        labels = grouped.all_labels()
        center = sum(labels) / len(labels)
        for category, group in grouped.groups.items():
            for y in group:
                values.append(y - center)
                cats.append(category)
    categories = sorted(set(cats))
    if len(categories) < 2:
        raise DataError("pooled F test needs at least two categories")
    arr = np.asarray(values)
    cat_arr = np.asarray(cats)
    n = len(arr)
    k = len(categories)
    grand = arr.mean()
    ss_between = 0.0
    for category in categories:
        group = arr[cat_arr == category]
        ss_between += len(group) * (group.mean() - grand) ** 2
    ss_total = ((arr - grand) ** 2).sum()
    ss_within = ss_total - ss_between
    df1 = k - 1
    df2 = n - k
    if df2 <= 0:
        raise DataError("pooled F test needs more labels than categories")
    if ss_within <= 0.0:
        return math.inf, 0.0
    f_stat = (ss_between / df1) / (ss_within / df2)
    p_value = float(stats.f.sf(f_stat, df1, df2))
    return float(f_stat), p_value


def aggregate_eta2(entities: list[GroupedLabels], covariate: str) -> Eta2Result:
    """Mean eta squared over qualifying entities plus the pooled F test.

    Zero-variance entities stay in the mean with eta2 = 0 and are counted
    separately so denominators remain explicit.
    """
    qualifying = [g for g in entities if g.covariate == covariate and g.qualifies()]
    if not qualifying:
        raise DataError(f"no qualifying entities for covariate {covariate!r}")
    per_entity: dict[str, float] = {}
    degenerate = 0
    for grouped in qualifying:
        value = eta_squared(grouped)
        if is_degenerate(grouped):
            degenerate += 1
        per_entity[grouped.entity_key] = value
    f_stat, p_value = pooled_f_test(qualifying)
    mean = sum(per_entity.values()) / len(per_entity)
    return Eta2Result(covariate=covariate, per_entity=per_entity, mean_eta2=mean,
                      f_stat=f_stat, p_value=p_value, degenerate_count=degenerate)


@dataclass(frozen=True)
class CoverageReport:
    reference_name: str
    reference_size: int
    overlap: int
    coverage: float

    def to_dict(self) -> dict:
        return {"reference_name": self.reference_name,
                "reference_size": self.reference_size,
                "overlap": self.overlap, "coverage": self.coverage}


def coverage(ours: set[str], reference: set[str],
             reference_name: str = "reference") -> CoverageReport:
    """Fraction of the reference's canonical keys present in ours."""
    if not reference:
        raise DataError(f"reference set {reference_name!r} is empty")
    overlap = len(ours & reference)
    return CoverageReport(reference_name=reference_name,
                          reference_size=len(reference),
                          overlap=overlap,
                          coverage=overlap / len(reference))


@dataclass
class DisagreementStats:
    per_entity: dict[str, float]              # disagreement fraction per matched entity
    histogram_edges: list[float]
    histogram_counts: list[int]
    majority_rate: float                      # entities with disagreement > 0.5
    positive_fraction: dict[str, float]       # entities with >= 5 extractions
    skipped_missing: int

    def to_dict(self) -> dict:
        return {"per_entity": self.per_entity,
                "histogram_edges": self.histogram_edges,
                "histogram_counts": self.histogram_counts,
                "majority_rate": self.majority_rate,
                "positive_fraction": self.positive_fraction,
                "skipped_missing": self.skipped_missing}


def disagreement(extractions: dict[str, list[int]], external: dict[str, int],
                 buckets: int = 10,
                 positive_min_extractions: int = 5) -> DisagreementStats:
    """Per-entity fraction of binary extractions disagreeing with a single
    external label, histogrammed, plus the majority-disagreement rate.

    Entities absent from the external map are skipped (counted). The
    positive fraction is computed for every extracted entity with at least
    ``positive_min_extractions`` labels, independent of external matching.
    """
    if buckets < 1:
        raise ConfigError(f"buckets must be >= 1, got {buckets}")
    per_entity: dict[str, float] = {}
    skipped = 0
    for entity, labels in extractions.items():
        if not labels:
            continue
        if any(label not in (0, 1) for label in labels):
            raise DataError(f"entity {entity!r} has non-binary labels")
        if entity not in external:
            skipped += 1
            continue
        ref = external[entity]
        if ref not in (0, 1):
            raise DataError(f"external label for {entity!r} is not binary")
        per_entity[entity] = sum(1 for y in labels if y != ref) / len(labels)

    edges = [i / buckets for i in range(buckets + 1)]
    counts = [0] * buckets
    for frac in per_entity.values():
        slot = min(int(frac * buckets), buckets - 1)  # top edge inclusive
        counts[slot] += 1
    majority = (sum(1 for f in per_entity.values() if f > 0.5) / len(per_entity)
                if per_entity else 0.0)
    positive = {
        entity: sum(labels) / len(labels)
        for entity, labels in extractions.items()
        if len(labels) >= positive_min_extractions
    }
    return DisagreementStats(per_entity=per_entity, histogram_edges=edges,
                             histogram_counts=counts, majority_rate=majority,
                             positive_fraction=positive, skipped_missing=skipped)


@dataclass(frozen=True)
class LabelMapping:
    """Which record fields carry the entity, label, and covariates, and
    how the label becomes a number."""

    entity_field: str
    label_field: str
    covariate_fields: tuple[str, ...]
    label_kind: str = "binary"                 # "binary" | "numeric"
    positive_values: tuple[str, ...] = ("true", "yes", "1", "positive")
    negative_values: tuple[str, ...] = ("false", "no", "0", "negative")
    transform: str = "none"                    # "none" | "log10"

    def __post_init__(self):
        if self.label_kind not in ("binary", "numeric"):
            raise ConfigError(f"label_kind must be binary or numeric, got {self.label_kind!r}")
        if self.transform not in ("none", "log10"):
            raise ConfigError(f"transform must be none or log10, got {self.transform!r}")
        if self.label_kind == "binary" and self.transform != "none":
            raise ConfigError("binary labels cannot be transformed")

    def label_value(self, raw: object) -> float | None:
        if self.label_kind == "binary":
            if isinstance(raw, bool):
                return 1.0 if raw else 0.0
            text = str(raw).strip().lower()
            if text in self.positive_values:
                return 1.0
            if text in self.negative_values:
                return 0.0
            return None
        try:
            value = float(raw)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            return None
        if self.transform == "log10":
            if value <= 0:
                return None
            value = math.log10(value)
        return value


def group_labels(records: list[ExtractionRecord], mapping: LabelMapping,
                 covariate: str) -> list[GroupedLabels]:
    """Bucket record labels per entity by one covariate's value. Records
    missing the entity, the label, or the covariate are left out."""
    buckets: dict[str, dict[str, list[float]]] = {}
    for record in records:
        entity = record.fields.get(mapping.entity_field)
        raw_label = record.fields.get(mapping.label_field)
        category = record.fields.get(covariate)
        if entity is None or raw_label is None or category is None:
            continue
        label = mapping.label_value(raw_label)
        if label is None:
            continue
        buckets.setdefault(str(entity), {}).setdefault(str(category), []).append(label)
    return [GroupedLabels(entity_key=entity, covariate=covariate, groups=groups)
            for entity, groups in sorted(buckets.items())]


def eta2_report(records: list[ExtractionRecord],
                mapping: LabelMapping) -> dict[str, Eta2Result]:
    """Eta squared per configured covariate; covariates with no
    qualifying entity are skipped with a log line."""
    results: dict[str, Eta2Result] = {}
    for covariate in mapping.covariate_fields:
        grouped = group_labels(records, mapping, covariate)
        try:
            results[covariate] = aggregate_eta2(grouped, covariate)
        except DataError as exc:
            logger.warning("skipping covariate %r: %s", covariate, exc)
    return results


def write_eta2_csv(results: dict[str, Eta2Result], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate", "mean_eta2", "f_stat", "p_value",
                         "entity_count", "degenerate_count"])
        for covariate in sorted(results):
            r = results[covariate]
            writer.writerow([covariate, f"{r.mean_eta2:.6f}", f"{r.f_stat:.6f}",
                             f"{r.p_value:.6g}", len(r.per_entity), r.degenerate_count])


def write_histogram_csv(stats_: DisagreementStats, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bucket_low", "bucket_high", "entity_count"])
        for i, count in enumerate(stats_.histogram_counts):
            writer.writerow([stats_.histogram_edges[i], stats_.histogram_edges[i + 1], count])


def write_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
