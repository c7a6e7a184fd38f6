"""The agent operations of the pipeline.

Each LLM-backed agent renders a versioned prompt template, sends it through
the retrying transport, parses the completion against a declared schema,
and returns a typed value plus a mandatory explanation. Malformed output is
retried exactly once with an explicit emit-only-JSON instruction, then
degraded per-agent: metadata falls back to an empty scope, graders to a
fail, the generator to an uncited raw answer, and the binary verdict to a
conservative 0. No degradation path can ever produce a 1.

Two agent names are not LLM calls at all: the context retriever (embedding
plus index search) and the baseline decision rule; the orchestrator records
them in traces under the same step shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Sequence

from .corpus import Article, MetadataFilter, TextType, parse_date
from .errors import EmptyCompletion, NoPassingContext
from .llm import ChatBackend, complete
from .structured import FieldSpec, SchemaDescriptor, parse_structured
from .templates import PromptTemplate, load_template

logger = logging.getLogger(__name__)

METADATA_RETRIEVER = "metadata_retriever"
CONTEXT_RETRIEVER = "context_retriever"
CONTEXT_GRADER = "context_grader"
GENERATOR = "generator"
GROUNDEDNESS_GRADER = "groundedness_grader"
ANSWER_RELEVANCE_GRADER = "answer_relevance_grader"
QUERY_DISAMBIGUATOR = "query_disambiguator"
BINARY_QA = "binary_qa"
BASELINE_DECISION = "baseline_decision"

ALL_AGENTS = (
    METADATA_RETRIEVER,
    CONTEXT_RETRIEVER,
    CONTEXT_GRADER,
    GENERATOR,
    GROUNDEDNESS_GRADER,
    ANSWER_RELEVANCE_GRADER,
    QUERY_DISAMBIGUATOR,
    BINARY_QA,
)

# Which agent names correspond to LLM calls. The retriever and the baseline
# rule are deterministic computations recorded as steps for traceability.
AGENT_IS_LLM = {
    METADATA_RETRIEVER: True,
    CONTEXT_RETRIEVER: False,
    CONTEXT_GRADER: True,
    GENERATOR: True,
    GROUNDEDNESS_GRADER: True,
    ANSWER_RELEVANCE_GRADER: True,
    QUERY_DISAMBIGUATOR: True,
    BINARY_QA: True,
    BASELINE_DECISION: False,
}

REPROMPT_INSTRUCTION = (
    "Your previous reply could not be parsed. "
    "Emit only a JSON object matching the requested schema, with no surrounding text."
)

DEFAULT_CONTEXT_THRESHOLD = 0.5
DEFAULT_GROUNDEDNESS_THRESHOLD = 0.8
DEFAULT_RELEVANCE_THRESHOLD = 0.5


# -- typed agent outputs -----------------------------------------------------

@dataclass(frozen=True)
class QueryMetadata:
    country: str | None = None
    ban_topic: str | None = None
    text_type: TextType | None = None
    date_from: date | None = None
    date_to: date | None = None
    thematic_keywords: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return self == QueryMetadata()

    def to_filter(self) -> MetadataFilter:
        return MetadataFilter.build(
            country=self.country,
            ban_topic=self.ban_topic,
            text_types=[self.text_type] if self.text_type is not None else None,
            date_from=self.date_from,
            date_to=self.date_to,
        )

    @classmethod
    def from_parsed(cls, obj: dict) -> "QueryMetadata":
        return cls(
            country=obj.get("country"),
            ban_topic=obj.get("ban_topic"),
            text_type=TextType.coerce(obj["text_type"]) if "text_type" in obj else None,
            date_from=parse_date(obj.get("date_from")),
            date_to=parse_date(obj.get("date_to")),
            thematic_keywords=tuple(obj.get("thematic_keywords", ())),
        )


@dataclass(frozen=True)
class AgentGrade:
    """A grader verdict: score in [0,1], inclusive pass at the threshold,
    and a mandatory explanation."""

    score: float
    passed: bool
    explanation: str
    criteria: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "pass": self.passed,
            "explanation": self.explanation,
            "criteria": dict(self.criteria),
        }


def make_grade(score: float, threshold: float, explanation: str,
               criteria: dict[str, float]) -> AgentGrade:
    return AgentGrade(
        score=score, passed=score >= threshold,
        explanation=explanation, criteria=criteria,
    )


@dataclass(frozen=True)
class GeneratedAnswer:
    text: str
    cited_article_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"text": self.text, "cited_article_ids": list(self.cited_article_ids)}


@dataclass(frozen=True)
class BinaryDecision:
    label: int
    explanation: str

    def to_dict(self) -> dict:
        return {"label": self.label, "explanation": self.explanation}


@dataclass(frozen=True)
class AgentResult:
    """What every agent operation hands back to the orchestrator: the typed
    value plus everything a trace step needs."""

    agent: str
    value: Any
    explanation: str
    template_version: str = ""
    prompt: str = ""
    raw_reply: str = ""
    degraded: bool = False
    flags: tuple[str, ...] = ()


# -- schemas -----------------------------------------------------------------

METADATA_SCHEMA = SchemaDescriptor("query_metadata", {
    "country": FieldSpec((str,), required=False),
    "ban_topic": FieldSpec((str,), required=False),
    "text_type": FieldSpec((str,), required=False),
    "date_from": FieldSpec((str,), required=False),
    "date_to": FieldSpec((str,), required=False),
    "thematic_keywords": FieldSpec((list,), required=False, item_type=str),
})

CONTEXT_GRADE_SCHEMA = SchemaDescriptor("context_grade", {
    "relevance": FieldSpec((float,), minimum=0.0, maximum=1.0),
    "specificity": FieldSpec((float,), minimum=0.0, maximum=1.0),
    "explanation": FieldSpec((str,), non_empty=True),
})

GENERATION_SCHEMA = SchemaDescriptor("generated_answer", {
    "text": FieldSpec((str,), non_empty=True),
    "cited_article_ids": FieldSpec((list,), item_type=str),
})

GROUNDEDNESS_SCHEMA = SchemaDescriptor("groundedness_grade", {
    "supported_claims_fraction": FieldSpec((float,), minimum=0.0, maximum=1.0),
    "explanation": FieldSpec((str,), non_empty=True),
})

RELEVANCE_SCHEMA = SchemaDescriptor("answer_relevance_grade", {
    "addresses_query": FieldSpec((float,), minimum=0.0, maximum=1.0),
    "explanation": FieldSpec((str,), non_empty=True),
})

DECISION_SCHEMA = SchemaDescriptor("binary_decision", {
    "label": FieldSpec((int,), minimum=0, maximum=1),
    "explanation": FieldSpec((str,), non_empty=True),
})


# -- shared call machinery -----------------------------------------------------

_templates: dict[str, PromptTemplate] = {}


def _template(name: str) -> PromptTemplate:
    if name not in _templates:
        _templates[name] = load_template(name)
    return _templates[name]


def _call_structured(backend: ChatBackend, template: PromptTemplate,
                     schema: SchemaDescriptor, variables: dict,
                     ) -> tuple[dict | None, str, str, bool, str]:
    """Render, complete, parse; on failure reprompt exactly once.

    Returns (parsed or None, first prompt, last raw reply, reprompted, detail).
    """
    prompt = template.render(**variables)
    reply = complete(backend, prompt)
    result = parse_structured(reply, schema)
    if result.ok:
        return result.value, prompt, reply, False, ""
    logger.info("%s: unparseable reply (%s), reprompting once", template.name, result.error)
    retry_prompt = prompt + "\n\n" + REPROMPT_INSTRUCTION
    retry_reply = complete(backend, retry_prompt)
    retry_result = parse_structured(retry_reply, schema)
    if retry_result.ok:
        return retry_result.value, prompt, retry_reply, True, ""
    return None, prompt, retry_reply, True, retry_result.detail or str(retry_result.error)


def render_context_block(articles: Sequence[Article]) -> str:
    return "\n\n".join(f"[{a.article_id}] {a.heading}: {a.body}" for a in articles)


# -- agent operations -----------------------------------------------------------

def metadata_retrieve(backend: ChatBackend, query: str) -> AgentResult:
    """Extract a retrieval scope (country, topic, dates...) from the question."""
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    template = _template(METADATA_RETRIEVER)
    parsed, prompt, raw, reprompted, _detail = _call_structured(
        backend, template, METADATA_SCHEMA, {"query": query})
    flags = ("reprompted",) if reprompted else ()
    if parsed is None:
        return AgentResult(
            agent=METADATA_RETRIEVER,
            value=QueryMetadata(),
            explanation="metadata extraction produced no parseable scope; proceeding unscoped",
            template_version=template.version,
            prompt=prompt, raw_reply=raw,
            degraded=True, flags=flags + ("unparseable_metadata",),
        )
    meta = QueryMetadata.from_parsed(parsed)
    set_fields = {k: v for k, v in parsed.items() if v not in (None, [], "")}
    explanation = (
        f"extracted scope: {set_fields}" if set_fields else "no scope inferred from the question"
    )
    return AgentResult(
        agent=METADATA_RETRIEVER, value=meta, explanation=explanation,
        template_version=template.version, prompt=prompt, raw_reply=raw, flags=flags,
    )


def grade_context(backend: ChatBackend, query: str, article: Article,
                  threshold: float = DEFAULT_CONTEXT_THRESHOLD) -> AgentResult:
    """Score one retrieved article for relevance and specificity; the grade
    score is the mean of the two criteria."""
    if not article.body.strip():
        raise ValueError("article body must be non-empty")
    template = _template(CONTEXT_GRADER)
    parsed, prompt, raw, reprompted, _detail = _call_structured(
        backend, template, CONTEXT_GRADE_SCHEMA,
        {"query": query, "article_id": article.article_id, "body": article.body})
    flags = ("reprompted",) if reprompted else ()
    if parsed is None:
        grade = AgentGrade(0.0, False, "ungradeable output", {})
        return AgentResult(
            agent=CONTEXT_GRADER, value=grade, explanation=grade.explanation,
            template_version=template.version, prompt=prompt, raw_reply=raw,
            degraded=True, flags=flags + ("ungradeable",),
        )
    score = (parsed["relevance"] + parsed["specificity"]) / 2.0
    grade = make_grade(score, threshold, parsed["explanation"],
                       {"relevance": parsed["relevance"], "specificity": parsed["specificity"]})
    return AgentResult(
        agent=CONTEXT_GRADER, value=grade, explanation=grade.explanation,
        template_version=template.version, prompt=prompt, raw_reply=raw, flags=flags,
    )


def generate(backend: ChatBackend, query: str,
             contexts: Sequence[tuple[Article, AgentGrade]]) -> AgentResult:
    """Answer from the passing articles only; citations outside the provided
    set are stripped and the stripping recorded."""
    if not contexts:
        raise NoPassingContext("generation requires at least one passing context")
    if not all(grade.passed for _, grade in contexts):
        raise NoPassingContext("generation received a non-passing context")
    articles = [a for a, _ in contexts]
    provided = {a.article_id for a in articles}
    template = _template(GENERATOR)
    parsed, prompt, raw, reprompted, _detail = _call_structured(
        backend, template, GENERATION_SCHEMA,
        {"query": query, "contexts": render_context_block(articles)})
    flags: tuple[str, ...] = ("reprompted",) if reprompted else ()
    if parsed is None:
        # Unstructured completion: keep the text, drop every citation. The
        # groundedness gate downstream treats an uncited answer as ungrounded.
        answer = GeneratedAnswer(text=raw.strip(), cited_article_ids=())
        return AgentResult(
            agent=GENERATOR, value=answer, explanation=answer.text,
            template_version=template.version, prompt=prompt, raw_reply=raw,
            degraded=True, flags=flags + ("unstructured_generation",),
        )
    cited, stripped = [], []
    for cid in parsed["cited_article_ids"]:
        if cid in provided:
            if cid not in cited:
                cited.append(cid)
        else:
            stripped.append(cid)
    if stripped:
        flags = flags + (f"stripped_citations:{sorted(set(stripped))}",)
        logger.info("generator cited unknown articles %s; stripped", sorted(set(stripped)))
    answer = GeneratedAnswer(text=parsed["text"], cited_article_ids=tuple(cited))
    return AgentResult(
        agent=GENERATOR, value=answer, explanation=answer.text,
        template_version=template.version, prompt=prompt, raw_reply=raw, flags=flags,
    )


def grade_groundedness(backend: ChatBackend, answer: GeneratedAnswer,
                       contexts: Sequence[tuple[Article, AgentGrade]],
                       threshold: float = DEFAULT_GROUNDEDNESS_THRESHOLD) -> AgentResult:
    """Check that each claim in the answer is supported by a cited passage.
    An answer citing nothing is ungrounded by definition: forced score 0
    without a backend call."""
    if not contexts:
        raise NoPassingContext("groundedness grading requires contexts")
    template = _template(GROUNDEDNESS_GRADER)
    if not answer.cited_article_ids:
        grade = AgentGrade(
            0.0, False,
            "answer cites no sources; every statement lacks a source reference",
            {"supported_claims_fraction": 0.0},
        )
        return AgentResult(
            agent=GROUNDEDNESS_GRADER, value=grade, explanation=grade.explanation,
            template_version=template.version, flags=("uncited_answer",),
        )
    cited = [a for a, _ in contexts if a.article_id in answer.cited_article_ids]
    parsed, prompt, raw, reprompted, _detail = _call_structured(
        backend, template, GROUNDEDNESS_SCHEMA,
        {"answer": answer.text, "contexts": render_context_block(cited)})
    flags = ("reprompted",) if reprompted else ()
    if parsed is None:
        grade = AgentGrade(0.0, False, "ungradeable output", {})
        return AgentResult(
            agent=GROUNDEDNESS_GRADER, value=grade, explanation=grade.explanation,
            template_version=template.version, prompt=prompt, raw_reply=raw,
            degraded=True, flags=flags + ("ungradeable",),
        )
    fraction = parsed["supported_claims_fraction"]
    grade = make_grade(fraction, threshold, parsed["explanation"],
                       {"supported_claims_fraction": fraction})
    return AgentResult(
        agent=GROUNDEDNESS_GRADER, value=grade, explanation=grade.explanation,
        template_version=template.version, prompt=prompt, raw_reply=raw, flags=flags,
    )


def grade_answer_relevance(backend: ChatBackend, answer: GeneratedAnswer, query: str,
                           threshold: float = DEFAULT_RELEVANCE_THRESHOLD) -> AgentResult:
    """Check that the answer addresses the question that was asked."""
    template = _template(ANSWER_RELEVANCE_GRADER)
    parsed, prompt, raw, reprompted, _detail = _call_structured(
        backend, template, RELEVANCE_SCHEMA, {"query": query, "answer": answer.text})
    flags = ("reprompted",) if reprompted else ()
    if parsed is None:
        grade = AgentGrade(0.0, False, "ungradeable output", {})
        return AgentResult(
            agent=ANSWER_RELEVANCE_GRADER, value=grade, explanation=grade.explanation,
            template_version=template.version, prompt=prompt, raw_reply=raw,
            degraded=True, flags=flags + ("ungradeable",),
        )
    score = parsed["addresses_query"]
    grade = make_grade(score, threshold, parsed["explanation"], {"addresses_query": score})
    return AgentResult(
        agent=ANSWER_RELEVANCE_GRADER, value=grade, explanation=grade.explanation,
        template_version=template.version, prompt=prompt, raw_reply=raw, flags=flags,
    )


def disambiguate(backend: ChatBackend, query: str,
                 failure_context: str | None = None) -> AgentResult:
    """Rewrite the query to improve retrieval. An empty or identical rewrite
    keeps the original and records a no-op."""
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    template = _template(QUERY_DISAMBIGUATOR)
    prompt = template.render(query=query, failure_context=failure_context or "none")
    try:
        reply = complete(backend, prompt)
    except EmptyCompletion:
        reply = ""
    rewritten = reply.strip().strip('"').strip()
    if not rewritten or rewritten == query:
        return AgentResult(
            agent=QUERY_DISAMBIGUATOR, value=query,
            explanation="kept original query (rewrite was empty or identical)",
            template_version=template.version, prompt=prompt, raw_reply=reply,
            flags=("noop_rewrite",),
        )
    return AgentResult(
        agent=QUERY_DISAMBIGUATOR, value=rewritten,
        explanation=f"rewrote query to: {rewritten}",
        template_version=template.version, prompt=prompt, raw_reply=reply,
    )


def binary_qa(backend: ChatBackend, question: str, answer: GeneratedAnswer) -> AgentResult:
    """Map the generated answer onto a 0/1 verdict: 1 only for an entirely
    affirmative answer covering every part of the question. Every
    unparseable path collapses to 0, never 1."""
    if not answer.text.strip():
        raise ValueError("answer must be non-empty")
    template = _template(BINARY_QA)
    parsed, prompt, raw, reprompted, _detail = _call_structured(
        backend, template, DECISION_SCHEMA, {"query": question, "answer": answer.text})
    flags = ("reprompted",) if reprompted else ()
    if parsed is None:
        decision = BinaryDecision(0, "unparseable verdict")
        return AgentResult(
            agent=BINARY_QA, value=decision, explanation=decision.explanation,
            template_version=template.version, prompt=prompt, raw_reply=raw,
            degraded=True, flags=flags + ("unparseable_verdict",),
        )
    decision = BinaryDecision(int(parsed["label"]), parsed["explanation"])
    return AgentResult(
        agent=BINARY_QA, value=decision, explanation=decision.explanation,
        template_version=template.version, prompt=prompt, raw_reply=raw, flags=flags,
    )
