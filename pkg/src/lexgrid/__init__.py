"""lexgrid: agentic retrieval pipeline turning natural-language legal
indicator questions into traceable binary decisions over a corpus of
segmented legal texts.

The public surface groups into five layers:

- corpus: document segmentation, article records, metadata filtering,
  persistent newline-delimited storage.
- retrieval: deterministic and HTTP embedding backends plus an exact and
  graph-based approximate cosine-distance index.
- pipeline: the staged agent loop (run_pipeline) with three operating
  modes, full traces, and the resume_check audit.
- evaluation: binary confusion metrics, the 11-question indicator grid,
  and the mode-ablation report.
- configuration: one JSON settings file binding paths, backends,
  thresholds, and pipeline parameters; the command-line entry point.
"""

from .agents import BinaryDecision
from .config import Settings, load_settings
from .corpus import (
    Article,
    ArticleMetadata,
    Corpus,
    DocumentSource,
    MetadataFilter,
    TextType,
    ingest,
    read_corpus,
    segment_document,
    write_corpus,
)
from .embeddings import HashedNgramBackend, HTTPEmbeddingBackend, embed
from .errors import LexgridError
from .grid import (
    INDICATOR_QUESTIONS,
    AblationReport,
    GoldLabels,
    IndicatorGrid,
    compute_grid,
    instantiate_question,
    run_ablation,
)
from .llm import HTTPChatBackend, ScriptedChatBackend
from .metrics import MetricReport, compute_metrics
from .pipeline import (
    MODE_BASELINE,
    MODE_FULL,
    MODE_WITHOUT_HALL,
    MODES,
    PipelineConfig,
    PipelineHandles,
    PipelineResult,
    resume_check,
    run_pipeline,
)
from .trace import PipelineTrace, load_trace, save_trace, trace_fingerprint
from .vector_index import VectorIndex, cosine_distance, index_corpus

__version__ = "0.1.0"

__all__ = [
    "AblationReport",
    "Article",
    "ArticleMetadata",
    "BinaryDecision",
    "Corpus",
    "DocumentSource",
    "GoldLabels",
    "HTTPChatBackend",
    "HTTPEmbeddingBackend",
    "HashedNgramBackend",
    "INDICATOR_QUESTIONS",
    "IndicatorGrid",
    "LexgridError",
    "MODES",
    "MODE_BASELINE",
    "MODE_FULL",
    "MODE_WITHOUT_HALL",
    "MetadataFilter",
    "MetricReport",
    "PipelineConfig",
    "PipelineHandles",
    "PipelineResult",
    "PipelineTrace",
    "ScriptedChatBackend",
    "Settings",
    "TextType",
    "VectorIndex",
    "compute_grid",
    "compute_metrics",
    "cosine_distance",
    "embed",
    "index_corpus",
    "ingest",
    "instantiate_question",
    "load_settings",
    "load_trace",
    "read_corpus",
    "resume_check",
    "run_ablation",
    "run_pipeline",
    "save_trace",
    "segment_document",
    "trace_fingerprint",
    "write_corpus",
    "__version__",
]
