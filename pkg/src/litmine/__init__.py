"""litmine: turn a tagged, paragraph-structured document corpus into
judged, structured datasets through entity-filtered retrieval and
oracle-driven extraction."""

from .corpus import (
    Corpus,
    Document,
    HashingEmbedder,
    HttpEmbedder,
    Window,
    WindowingConfig,
    cosine,
    embed_window,
    ingest_corpus,
)
from .errors import (
    ConfigError,
    DataError,
    LitmineError,
    OracleError,
    OracleProtocolError,
    OracleTransportError,
    ParseError,
)
from .filters import (
    FilterSpec,
    Probe,
    RankedHit,
    evaluate_filter,
    excluded_but_relevant,
    parse_filter_spec,
    probe_search,
)
from .index import EntityIndex, PostingSet, build_index
from .judge import JudgeAxis, JudgeVerdict, filter_records, judge_record
from .oracles import (
    AgentRole,
    FunctionOracle,
    HttpOracle,
    Oracle,
    OracleRequest,
    OracleResponse,
    RoleRouter,
    ScriptedOracle,
)
from .probe_loop import (
    ExtractionSchema,
    FieldSpec,
    LoopConfig,
    LoopReport,
    estimate_precision,
    estimate_recall_gap,
    induce_schema,
    run_probe_loop,
)
from .extraction import (
    ExtractionRecord,
    PaperScore,
    deduplicate,
    extract_windows,
    rank_subcorpus,
)
from .analysis import (
    CoverageReport,
    DisagreementStats,
    Eta2Result,
    GroupedLabels,
    aggregate_eta2,
    coverage,
    disagreement,
    eta_squared,
)
from .tags import (
    EntityTag,
    EntityType,
    NormalizedEntity,
    OntologyEntry,
    DictionaryResolver,
    ResolverCascades,
    TagStore,
    load_tags,
    normalize_entity,
)

__version__ = "0.1.0"
