"""Run configuration: one TOML file wires every stage of a run.

Sections: [run] (seed, output, workers, task), [corpus], [embedder],
[tags], [[resolver]] + [cascades], [oracle], [loop], [extraction],
[judge], and optional [analysis]. The seed is mandatory; nothing in a
run may depend on the wall clock. Every referenced path must exist when
the config is loaded.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import Embedder, HashingEmbedder, HttpEmbedder, WindowingConfig
from .errors import ConfigError
from .probe_loop import LoopConfig
from .tags import DictionaryResolver, EntityType, ResolverCascades, parse_entity_type


@dataclass
class AnalysisConfig:
    entity_field: str
    label_field: str
    covariates: tuple[str, ...]
    label_kind: str = "binary"
    positive_values: tuple[str, ...] = ("true", "yes", "1", "positive")
    negative_values: tuple[str, ...] = ("false", "no", "0", "negative")
    transform: str = "none"
    ours_key_field: str | None = None
    reference_path: Path | None = None
    external_labels_path: Path | None = None


@dataclass
class RunConfig:
    rng_seed: int
    output_dir: Path
    corpus_path: Path
    tags_path: Path
    windowing: WindowingConfig
    embedder_kind: str = "hash"
    embedding_dim: int = 256
    embedder_url: str | None = None
    resolver_paths: list[tuple[str, Path]] = field(default_factory=list)
    cascade_names: dict[str, list[str]] = field(default_factory=dict)
    oracle_script: Path | None = None
    oracle_url: str | None = None
    oracle_token_env: str = "LITMINE_ORACLE_TOKEN"
    loop: LoopConfig | None = None
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    extraction_budget: int = 1000
    judge_context_windows: int = 1
    rubric_path: Path | None = None
    workers: int = 1
    task: str | None = None
    analysis: AnalysisConfig | None = None

    def load_rubric(self) -> dict[str, str]:
        """Axis wording handed verbatim to the judge oracle."""
        from .judge_axes import AXIS_KEYS, DEFAULT_RUBRIC

        if self.rubric_path is None:
            return DEFAULT_RUBRIC
        import json

        doc = json.loads(Path(self.rubric_path).read_text(encoding="utf-8"))
        missing = set(AXIS_KEYS) - set(doc)
        if missing:
            raise ConfigError(f"rubric file missing axes {sorted(missing)}")
        return {key: str(doc[key]) for key in AXIS_KEYS}

    def make_embedder(self) -> Embedder | None:
        if self.embedder_kind == "hash":
            return HashingEmbedder(dim=self.embedding_dim)
        if self.embedder_kind == "http":
            if not self.embedder_url:
                raise ConfigError("embedder kind is http but no url configured")
            return HttpEmbedder(url=self.embedder_url, dim=self.embedding_dim)
        if self.embedder_kind == "none":
            return None
        raise ConfigError(f"unknown embedder kind {self.embedder_kind!r}")

    def load_resolvers(self) -> ResolverCascades:
        by_name: dict[str, DictionaryResolver] = {}
        for name, path in self.resolver_paths:
            by_name[name] = DictionaryResolver.from_file(name, path)

        def chain(names: list[str]) -> list[DictionaryResolver]:
            missing = [n for n in names if n not in by_name]
            if missing:
                raise ConfigError(f"cascade references undeclared resolvers {missing}")
            return [by_name[n] for n in names]

        default = chain(self.cascade_names.get("default", []))
        cascades: dict[EntityType, list[DictionaryResolver]] = {}
        for type_name, names in self.cascade_names.items():
            if type_name == "default":
                continue
            cascades[parse_entity_type(type_name)] = chain(names)
        if not cascades and not default and by_name:
            # Resolvers declared without cascades: all become the default.
            default = list(by_name.values())
        return ResolverCascades(cascades, default)


def _section(doc: dict, name: str, required: bool = True) -> dict:
    value = doc.get(name)
    if value is None:
        if required:
            raise ConfigError(f"config missing [{name}] section")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _existing_path(base: Path, value: str, what: str) -> Path:
    path = (base / value).resolve() if not Path(value).is_absolute() else Path(value)
    if not path.exists():
        raise ConfigError(f"{what} does not exist: {path}")
    return path


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    base = path.parent

    run = _section(doc, "run")
    if "rng_seed" not in run:
        raise ConfigError("config [run] must set rng_seed; runs never seed from the clock")
    rng_seed = int(run["rng_seed"])
    output_dir = Path(run.get("output_dir", "runs/out"))
    if not output_dir.is_absolute():
        output_dir = base / output_dir

    corpus = _section(doc, "corpus")
    corpus_path = _existing_path(base, str(corpus["path"]), "corpus file")
    windowing = WindowingConfig(window_size=int(corpus.get("window_size", 5)),
                                stride=int(corpus.get("stride", 2)))

    tags = _section(doc, "tags")
    tags_path = _existing_path(base, str(tags["path"]), "tag file")

    embedder = _section(doc, "embedder", required=False)
    embedder_kind = str(embedder.get("kind", "hash"))
    embedding_dim = int(embedder.get("dim", 256))
    embedder_url = embedder.get("url")

    resolver_paths: list[tuple[str, Path]] = []
    for i, entry in enumerate(doc.get("resolver", [])):
        if not isinstance(entry, dict) or "name" not in entry or "path" not in entry:
            raise ConfigError(f"[[resolver]] entry {i} must carry name and path")
        resolver_paths.append((
            str(entry["name"]),
            _existing_path(base, str(entry["path"]), f"resolver {entry['name']!r}"),
        ))
    cascades_raw = _section(doc, "cascades", required=False)
    cascade_names = {name: [str(n) for n in names] for name, names in cascades_raw.items()}

    oracle = _section(doc, "oracle", required=False)
    oracle_script = None
    if oracle.get("script"):
        oracle_script = _existing_path(base, str(oracle["script"]), "oracle script")
    oracle_url = oracle.get("url") or None

    loop_raw = _section(doc, "loop", required=False)
    loop = LoopConfig(rng_seed=rng_seed, **{
        key: loop_raw[key] for key in (
            "precision_target", "recall_gap_max", "precision_sample_n",
            "recall_pool_n", "max_probes", "max_iterations",
            "sample_full_match_set", "paper_level_relevance",
            "rank_region_factor", "investigator_max_samples",
            "schema_sample_docs", "schema_validate_n",
        ) if key in loop_raw
    })

    extraction = _section(doc, "extraction", required=False)
    weights_raw = extraction.get("weights", [1.0, 1.0, 1.0])
    if not isinstance(weights_raw, list) or len(weights_raw) != 3:
        raise ConfigError("[extraction] weights must be a list of three numbers")
    weights = (float(weights_raw[0]), float(weights_raw[1]), float(weights_raw[2]))
    budget = int(extraction.get("budget", 1000))

    judge = _section(doc, "judge", required=False)
    context_windows = int(judge.get("context_windows", 1))
    rubric_path = None
    if judge.get("rubric_path"):
        rubric_path = _existing_path(base, str(judge["rubric_path"]), "rubric file")

    analysis_raw = _section(doc, "analysis", required=False)
    analysis = None
    if analysis_raw:
        for key in ("entity_field", "label_field", "covariates"):
            if key not in analysis_raw:
                raise ConfigError(f"[analysis] must set {key}")
        analysis = AnalysisConfig(
            entity_field=str(analysis_raw["entity_field"]),
            label_field=str(analysis_raw["label_field"]),
            covariates=tuple(str(c) for c in analysis_raw["covariates"]),
            label_kind=str(analysis_raw.get("label_kind", "binary")),
            positive_values=tuple(str(v).lower() for v in analysis_raw.get(
                "positive_values", ("true", "yes", "1", "positive"))),
            negative_values=tuple(str(v).lower() for v in analysis_raw.get(
                "negative_values", ("false", "no", "0", "negative"))),
            transform=str(analysis_raw.get("transform", "none")),
            ours_key_field=analysis_raw.get("ours_key_field"),
            reference_path=(_existing_path(base, str(analysis_raw["reference_path"]),
                                           "reference file")
                            if analysis_raw.get("reference_path") else None),
            external_labels_path=(_existing_path(
                base, str(analysis_raw["external_labels_path"]), "external labels file")
                if analysis_raw.get("external_labels_path") else None),
        )

    return RunConfig(
        rng_seed=rng_seed,
        output_dir=output_dir,
        corpus_path=corpus_path,
        tags_path=tags_path,
        windowing=windowing,
        embedder_kind=embedder_kind,
        embedding_dim=embedding_dim,
        embedder_url=embedder_url,
        resolver_paths=resolver_paths,
        cascade_names=cascade_names,
        oracle_script=oracle_script,
        oracle_url=oracle_url,
        oracle_token_env=str(oracle.get("token_env", "LITMINE_ORACLE_TOKEN")),
        loop=loop,
        weights=weights,
        extraction_budget=budget,
        judge_context_windows=context_windows,
        rubric_path=rubric_path,
        workers=int(run.get("workers", os.cpu_count() or 1)),
        task=run.get("task"),
        analysis=analysis,
    )
