"""The pipeline state machine: one indicator question in, one traced
binary decision out.

Control flow (full mode): extract a metadata scope from the question and
merge it under the explicit user scope; embed the current query and
retrieve top-k; grade each hit; when nothing passes, rewrite the query and
retry until the loop budget is spent (a clean miss is a legitimate 0, not
a degradation); generate from the passing articles; gate the answer on
groundedness (one regeneration allowed) and on answer relevance, each
failure costing one rewrite from the same budget; finally map the surviving
answer to a 0/1 verdict against the original question.

The without-hallucination-control mode skips exactly the two validation
gates. The retrieval-only baseline never calls a model: it embeds the raw
question, searches under the user scope alone, and labels 1 iff the best
hit is within a distance threshold.

Budget exhaustion inside the validation gates collapses to a conservative
0 and marks the run degraded. Every step lands in the trace, the trace is
persisted even when a backend dies mid-run, and the partial trace rides on
the raised error.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import agents
from .agents import (
    AgentResult,
    BinaryDecision,
    GeneratedAnswer,
    QueryMetadata,
)
from .corpus import Corpus, MetadataFilter
from .embeddings import EmbeddingBackend, embed
from .errors import IndexMissing, LexgridError
from .llm import ChatBackend, prompt_digest
from .trace import PipelineTrace, TraceStep, save_trace
from .vector_index import RetrievalHit, VectorIndex

logger = logging.getLogger(__name__)

MODE_FULL = "full"
MODE_WITHOUT_HALL = "without_hallucination_control"
MODE_BASELINE = "retrieval_only_baseline"
MODES = (MODE_FULL, MODE_WITHOUT_HALL, MODE_BASELINE)

# Exact agent sets per mode; audited on every trace.
ENABLED_AGENTS = {
    MODE_FULL: frozenset(agents.ALL_AGENTS),
    MODE_WITHOUT_HALL: frozenset(agents.ALL_AGENTS)
    - {agents.GROUNDEDNESS_GRADER, agents.ANSWER_RELEVANCE_GRADER},
    MODE_BASELINE: frozenset({agents.CONTEXT_RETRIEVER, agents.BASELINE_DECISION}),
}

NO_PROVISION_EXPLANATION = "no supporting provision found"
BUDGET_EXHAUSTED_EXPLANATION = "validation budget exhausted"


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = MODE_FULL
    top_k: int = 10
    max_loop_iterations: int = 3
    context_threshold: float = agents.DEFAULT_CONTEXT_THRESHOLD
    groundedness_threshold: float = agents.DEFAULT_GROUNDEDNESS_THRESHOLD
    relevance_threshold: float = agents.DEFAULT_RELEVANCE_THRESHOLD
    baseline_distance_threshold: float = 0.5
    search_mode: str = "approximate"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_loop_iterations < 1:
            raise ValueError("max_loop_iterations must be >= 1")
        if self.search_mode not in ("exact", "approximate"):
            raise ValueError(f"unknown search_mode: {self.search_mode!r}")

    def snapshot(self) -> dict:
        return {
            "mode": self.mode,
            "top_k": self.top_k,
            "max_loop_iterations": self.max_loop_iterations,
            "thresholds": {
                "context": self.context_threshold,
                "groundedness": self.groundedness_threshold,
                "answer_relevance": self.relevance_threshold,
                "baseline_distance": self.baseline_distance_threshold,
            },
            "search_mode": self.search_mode,
        }


@dataclass
class PipelineHandles:
    """Everything a run needs: the immutable corpus, the index over it, the
    query embedder, and the two chat backend bindings (deterministic for
    graders/extraction/verdicts, generative for generation/rewriting)."""

    corpus: Corpus
    index: VectorIndex | None
    embedder: EmbeddingBackend
    deterministic: ChatBackend | None = None
    generative: ChatBackend | None = None


@dataclass(frozen=True)
class PipelineResult:
    decision: BinaryDecision
    cited_article_ids: tuple[str, ...]
    trace: PipelineTrace
    degraded: bool


class _Run:
    """Mutable state of one pipeline execution."""

    def __init__(self, question: str, scope: MetadataFilter | None,
                 handles: PipelineHandles, config: PipelineConfig):
        self.question = question
        self.user_scope = scope or MetadataFilter()
        self.handles = handles
        self.config = config
        self.trace = PipelineTrace(
            mode=config.mode, question=question, config_snapshot=config.snapshot())
        self.current_query = question
        self.merged_scope = self.user_scope
        self.loop_count = 0
        self.any_fallback = False
        self.last_hits: list[RetrievalHit] = []

    # -- trace plumbing ----------------------------------------------------

    def record(self, result: AgentResult, outcome: str, output: dict,
               elapsed: float, extra_flags: tuple[str, ...] = ()) -> None:
        flags = result.flags + extra_flags
        self.any_fallback = self.any_fallback or result.degraded
        digest_source = result.prompt if result.prompt else result.agent + ":" + self.current_query
        self.trace.add_step(TraceStep(
            index=len(self.trace.steps) + 1,
            agent=result.agent,
            template_version=result.template_version,
            input_digest=prompt_digest(digest_source),
            output=output,
            explanation=result.explanation,
            elapsed=elapsed,
            outcome=outcome,
            flags=flags,
            degraded=result.degraded,
        ))

    def record_agent(self, result: AgentResult, elapsed: float,
                     extra_flags: tuple[str, ...] = ()) -> None:
        value = result.value
        if result.degraded:
            outcome = "degraded"
        elif isinstance(value, agents.AgentGrade):
            outcome = "pass" if value.passed else "fail"
        elif "noop_rewrite" in result.flags:
            outcome = "noop"
        else:
            outcome = "ok"
        if isinstance(value, QueryMetadata):
            output = {"metadata": _metadata_dict(value)}
        elif isinstance(value, agents.AgentGrade):
            output = value.to_dict()
        elif isinstance(value, GeneratedAnswer):
            output = value.to_dict()
        elif isinstance(value, BinaryDecision):
            output = value.to_dict()
        elif isinstance(value, str):
            output = {"rewritten_query": value}
        else:
            output = {"value": str(value)}
        self.record(result, outcome, output, elapsed, extra_flags)

    # -- non-LLM steps -------------------------------------------------------

    def retrieve(self) -> list[RetrievalHit]:
        t0 = time.perf_counter()
        qvec = embed(self.current_query, self.handles.embedder)
        hits = self.handles.index.knn(
            qvec, self.config.top_k,
            predicate=self.merged_scope, mode=self.config.search_mode)
        elapsed = time.perf_counter() - t0
        self.last_hits = hits
        result = AgentResult(
            agent=agents.CONTEXT_RETRIEVER,
            value=hits,
            explanation=(
                f"retrieved {len(hits)} articles for query: {self.current_query}"
                if hits else f"no articles matched query: {self.current_query}"
            ),
        )
        self.record(result, "ok" if hits else "fail", {
            "query": self.current_query,
            "filter": self.merged_scope.to_dict(),
            "hits": [
                {"article_id": h.article_id, "distance": round(h.distance, 12), "rank": h.rank}
                for h in hits
            ],
        }, elapsed)
        return hits


def _metadata_dict(meta: QueryMetadata) -> dict:
    out: dict[str, Any] = {}
    if meta.country:
        out["country"] = meta.country
    if meta.ban_topic:
        out["ban_topic"] = meta.ban_topic
    if meta.text_type is not None:
        out["text_type"] = meta.text_type.value
    if meta.date_from:
        out["date_from"] = meta.date_from.isoformat()
    if meta.date_to:
        out["date_to"] = meta.date_to.isoformat()
    if meta.thematic_keywords:
        out["thematic_keywords"] = list(meta.thematic_keywords)
    return out


def _timed(fn, *args, **kwargs) -> tuple[AgentResult, float]:
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - t0


def run_pipeline(question: str, scope: MetadataFilter | None,
                 handles: PipelineHandles, config: PipelineConfig,
                 trace_dir: str | Path | None = None) -> PipelineResult:
    """Run one question through the configured pipeline mode.

    The trace is persisted to trace_dir (when given) whether the run
    completes or dies; a raised error carries the partial trace as its
    `trace` attribute.
    """
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    if handles.index is None:
        raise IndexMissing("no vector index configured; build one first")

    run = _Run(question, scope, handles, config)
    try:
        if config.mode == MODE_BASELINE:
            decision = _run_baseline(run)
        else:
            decision = _run_agentic(run)
        run.trace.final_decision = decision.to_dict()
        run.trace.loop_count = run.loop_count
        run.trace.degraded = run.any_fallback
        cited = _final_citations(run)
        logger.info("run %s: mode=%s label=%d steps=%d loops=%d",
                    run.trace.run_id, config.mode, decision.label,
                    len(run.trace.steps), run.loop_count)
        return PipelineResult(
            decision=decision,
            cited_article_ids=cited,
            trace=run.trace,
            degraded=run.any_fallback,
        )
    except Exception as exc:
        run.trace.error = f"{type(exc).__name__}: {exc}"
        run.trace.loop_count = run.loop_count
        run.trace.degraded = True
        try:
            exc.trace = run.trace
        except AttributeError:
            pass
        raise
    finally:
        if trace_dir is not None:
            save_trace(run.trace, trace_dir)


def _final_citations(run: _Run) -> tuple[str, ...]:
    for step in reversed(run.trace.steps):
        if step.agent == agents.GENERATOR:
            return tuple(step.output.get("cited_article_ids", ()))
    return ()


def _run_baseline(run: _Run) -> BinaryDecision:
    """Vector search only, user scope only, fixed distance rule. No model."""
    run.merged_scope = run.user_scope
    hits = run.retrieve()
    t0 = time.perf_counter()
    threshold = run.config.baseline_distance_threshold
    if not hits:
        decision = BinaryDecision(0, "no articles retrieved under the given scope")
    else:
        best = hits[0]
        listing = "; ".join(f"{h.article_id} (d={h.distance:.3f})" for h in hits[:3])
        if best.distance <= threshold:
            decision = BinaryDecision(
                1, f"nearest article within distance {threshold}: {listing}")
        else:
            decision = BinaryDecision(
                0, f"nearest article beyond distance {threshold}: {listing}")
    result = AgentResult(
        agent=agents.BASELINE_DECISION, value=decision, explanation=decision.explanation)
    run.record_agent(result, time.perf_counter() - t0)
    return decision


def _run_agentic(run: _Run) -> BinaryDecision:
    handles, config = run.handles, run.config
    det, gen = handles.deterministic, handles.generative
    if det is None or gen is None:
        raise LexgridError("agentic modes require chat backends; none configured")

    meta_result, elapsed = _timed(agents.metadata_retrieve, det, run.question)
    run.record_agent(meta_result, elapsed)
    # Explicit user scope wins over agent-extracted metadata on every clause.
    run.merged_scope = run.user_scope.merged_with(meta_result.value.to_filter())

    while True:
        hits = run.retrieve()
        passing = []
        for hit in hits:
            article = handles.corpus.get(hit.article_id)
            if article is None:
                continue
            grade_result, elapsed = _timed(
                agents.grade_context, det, run.current_query, article,
                config.context_threshold)
            run.record_agent(grade_result, elapsed)
            if grade_result.value.passed:
                passing.append((article, grade_result.value))

        if not passing:
            failure = (
                "no retrieved article passed context grading"
                if hits else "retrieval returned no articles"
            )
            if not _spend_loop(run, gen, failure):
                return BinaryDecision(0, NO_PROVISION_EXPLANATION)
            continue

        gen_result, elapsed = _timed(agents.generate, gen, run.current_query, passing)
        _record_generation(run, gen_result, elapsed, passing)
        answer: GeneratedAnswer = gen_result.value

        if config.mode == MODE_WITHOUT_HALL and gen_result.degraded:
            # No semantic gates in this mode, but an unparseable generation
            # still never reaches a verdict; spend a loop on a rewrite.
            if not _spend_loop(run, gen, "generated answer was not parseable"):
                run.any_fallback = True
                return BinaryDecision(0, BUDGET_EXHAUSTED_EXPLANATION)
            continue

        if config.mode == MODE_FULL:
            ground_result, elapsed = _timed(
                agents.grade_groundedness, det, answer, passing,
                config.groundedness_threshold)
            run.record_agent(ground_result, elapsed)
            if not ground_result.value.passed:
                # One regeneration with the failure explanation appended, then
                # the only remaining remedy is a fresh retrieval round.
                regen_query = (
                    f"{run.current_query}\n\n"
                    f"A previous answer failed groundedness review: "
                    f"{ground_result.value.explanation}\n"
                    f"Ground every claim in the cited articles."
                )
                regen_result, elapsed = _timed(agents.generate, gen, regen_query, passing)
                _record_generation(run, regen_result, elapsed, passing,
                                   extra_flags=("regeneration",))
                answer = regen_result.value
                reground_result, elapsed = _timed(
                    agents.grade_groundedness, det, answer, passing,
                    config.groundedness_threshold)
                run.record_agent(reground_result, elapsed)
                if not reground_result.value.passed:
                    if not _spend_loop(run, gen, reground_result.value.explanation):
                        run.any_fallback = True
                        return BinaryDecision(0, BUDGET_EXHAUSTED_EXPLANATION)
                    continue

            relevance_result, elapsed = _timed(
                agents.grade_answer_relevance, det, answer, run.question,
                config.relevance_threshold)
            run.record_agent(relevance_result, elapsed)
            if not relevance_result.value.passed:
                if not _spend_loop(run, gen, relevance_result.value.explanation):
                    run.any_fallback = True
                    return BinaryDecision(0, BUDGET_EXHAUSTED_EXPLANATION)
                continue

        qa_result, elapsed = _timed(agents.binary_qa, det, run.question, answer)
        run.record_agent(qa_result, elapsed)
        return qa_result.value


def _record_generation(run: _Run, result: AgentResult, elapsed: float,
                       passing, extra_flags: tuple[str, ...] = ()) -> None:
    """Generator steps additionally record which articles they saw, so the
    audit can enforce the no-evidence-smuggling rule."""
    answer: GeneratedAnswer = result.value
    output = answer.to_dict()
    output["context_article_ids"] = [a.article_id for a, _ in passing]
    outcome = "degraded" if result.degraded else "ok"
    run.record(result, outcome, output, elapsed, extra_flags)


def _spend_loop(run: _Run, gen: ChatBackend, failure: str) -> bool:
    """Consume one disambiguation from the loop budget; False when spent."""
    if run.loop_count >= run.config.max_loop_iterations:
        return False
    result, elapsed = _timed(
        agents.disambiguate, gen, run.current_query, failure)
    run.record_agent(result, elapsed)
    run.loop_count += 1
    run.current_query = result.value
    run.trace.queries.append(result.value)
    return True


# -- trace audit -----------------------------------------------------------------

def resume_check(trace: PipelineTrace, corpus: Corpus | None = None) -> list[str]:
    """Validate a trace against the structural invariants of its mode.

    Returns human-readable violations (empty list = clean). Used by tests
    and the audit command; raises MalformedTrace only for documents too
    broken to inspect (handled upstream by load_trace).
    """
    violations: list[str] = []
    enabled = ENABLED_AGENTS.get(trace.mode)
    if enabled is None:
        return [f"unknown mode: {trace.mode!r}"]

    expected_index = 1
    for step in trace.steps:
        if step.index != expected_index:
            violations.append(
                f"step indices not contiguous: expected {expected_index}, found {step.index}")
            expected_index = step.index + 1
        else:
            expected_index += 1
        if step.agent not in enabled:
            violations.append(f"disabled agent executed: {step.agent} (mode {trace.mode})")
        if not step.explanation.strip():
            violations.append(f"step {step.index} ({step.agent}) has an empty explanation")

    if trace.mode == MODE_BASELINE:
        llm_steps = [s.agent for s in trace.steps if agents.AGENT_IS_LLM.get(s.agent, True)]
        if llm_steps:
            violations.append(f"baseline trace contains LLM steps: {llm_steps}")

    retrieved: set[str] | None = None
    corpus_ids = corpus.article_ids() if corpus is not None else None
    for step in trace.steps:
        if step.agent == agents.CONTEXT_RETRIEVER:
            retrieved = {h["article_id"] for h in step.output.get("hits", [])}
        elif step.agent == agents.GENERATOR:
            context_ids = set(step.output.get("context_article_ids", []))
            cited = set(step.output.get("cited_article_ids", []))
            if retrieved is None:
                violations.append(f"step {step.index}: generation before any retrieval")
            elif not context_ids <= retrieved:
                smuggled = sorted(context_ids - retrieved)
                violations.append(
                    f"step {step.index}: generation context outside the last retrieval: {smuggled}")
            if not cited <= context_ids:
                violations.append(
                    f"step {step.index}: citation outside the provided context: "
                    f"{sorted(cited - context_ids)}")
            if corpus_ids is not None and not cited <= corpus_ids:
                violations.append(
                    f"step {step.index}: dangling citation: {sorted(cited - corpus_ids)}")

    disambiguations = sum(
        1 for s in trace.steps if s.agent == agents.QUERY_DISAMBIGUATOR)
    if disambiguations != trace.loop_count:
        violations.append(
            f"loop_count {trace.loop_count} != {disambiguations} disambiguation steps")
    if trace.queries and trace.queries[0] != trace.question:
        violations.append("first recorded query differs from the original question")
    if len(trace.queries) != trace.loop_count + 1:
        violations.append(
            f"{len(trace.queries)} recorded queries inconsistent with loop_count "
            f"{trace.loop_count}")

    if trace.final_decision is not None:
        label = trace.final_decision.get("label")
        if label not in (0, 1):
            violations.append(f"final label outside {{0,1}}: {label!r}")
        if not str(trace.final_decision.get("explanation", "")).strip():
            violations.append("final decision lacks an explanation")
        if label == 1 and trace.mode != MODE_BASELINE:
            last = trace.steps[-1] if trace.steps else None
            if last is None or last.agent != agents.BINARY_QA or last.degraded:
                violations.append(
                    "label 1 not produced by a clean binary verdict step")
            generations = [s for s in trace.steps if s.agent == agents.GENERATOR]
            if generations and generations[-1].degraded:
                violations.append("label 1 rests on a degraded generation")
    elif trace.error is None:
        violations.append("trace has neither a final decision nor an error")

    return violations
