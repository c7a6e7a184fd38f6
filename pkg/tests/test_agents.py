"""Structured parsing, templates, transport, and agent operation tests.

Agent tests run against the scripted backend: replies are keyed by the
digest of the exact rendered prompt, so they double as a check that prompt
rendering is stable.
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexgrid.agents import (
    ANSWER_RELEVANCE_GRADER,
    BINARY_QA,
    CONTEXT_GRADER,
    DECISION_SCHEMA,
    GENERATOR,
    GROUNDEDNESS_GRADER,
    METADATA_RETRIEVER,
    METADATA_SCHEMA,
    QUERY_DISAMBIGUATOR,
    REPROMPT_INSTRUCTION,
    AgentGrade,
    BinaryDecision,
    GeneratedAnswer,
    QueryMetadata,
    binary_qa,
    disambiguate,
    generate,
    grade_answer_relevance,
    grade_context,
    grade_groundedness,
    metadata_retrieve,
    render_context_block,
)
from lexgrid.corpus import Article, ArticleMetadata, TextType
from lexgrid.errors import (
    BackendTimeout,
    BackendUnavailable,
    EmptyCompletion,
    NoPassingContext,
    UnscriptedPrompt,
)
from lexgrid.llm import (
    ChatBackend,
    HTTPChatBackend,
    ScriptedChatBackend,
    complete,
    prompt_digest,
)
from lexgrid.structured import (
    PARSE_FAILURE,
    SCHEMA_VIOLATION,
    parse_structured,
)
from lexgrid.templates import load_template


def make_article(article_id="src:1", body="Les sacs sont interdits."):
    meta = ArticleMetadata(
        source_id="src", country="MA", ban_topic="plastic_bags",
        text_type=TextType.LAW, institution="x",
    )
    return Article(article_id=article_id, ordinal=1, heading="Article 1",
                   body=body, metadata=meta)


def scripted(template_name, variables, *replies):
    """Script the rendered prompt and, for extra replies, its reprompt."""
    template = load_template(template_name)
    prompt = template.render(**variables)
    script = {prompt_digest(prompt): replies[0]}
    if len(replies) > 1:
        retry = prompt + "\n\n" + REPROMPT_INSTRUCTION
        script[prompt_digest(retry)] = replies[1]
    return ScriptedChatBackend(script)


class TestParseStructured:
    def test_embedded_object_with_prose(self):
        res = parse_structured(
            'Here you go: {"label": 1, "explanation": "ok"}', DECISION_SCHEMA)
        assert res.ok
        assert res.value == {"label": 1, "explanation": "ok"}

    def test_code_fence(self):
        raw = 'Sure:\n```json\n{"label": 0, "explanation": "none found"}\n```\nDone.'
        res = parse_structured(raw, DECISION_SCHEMA)
        assert res.ok
        assert res.value["label"] == 0

    def test_braces_inside_strings_do_not_confuse_extraction(self):
        raw = 'prefix {"label": 1, "explanation": "uses { and } inside"} suffix'
        res = parse_structured(raw, DECISION_SCHEMA)
        assert res.ok

    def test_label_out_of_range(self):
        res = parse_structured('{"label": 2, "explanation": "x"}', DECISION_SCHEMA)
        assert not res.ok
        assert res.error == SCHEMA_VIOLATION
        assert "label" in res.detail

    def test_boolean_label_rejected(self):
        res = parse_structured('{"label": true, "explanation": "x"}', DECISION_SCHEMA)
        assert not res.ok
        assert res.error == SCHEMA_VIOLATION

    def test_no_json(self):
        res = parse_structured("no json here", DECISION_SCHEMA)
        assert not res.ok
        assert res.error == PARSE_FAILURE
        assert res.raw == "no json here"

    def test_unknown_keys_rejected(self):
        res = parse_structured('{"country": "MA", "confidence": 0.9}', METADATA_SCHEMA)
        assert not res.ok
        assert "confidence" in res.detail

    def test_missing_required_key(self):
        res = parse_structured('{"label": 1}', DECISION_SCHEMA)
        assert not res.ok
        assert "explanation" in res.detail

    def test_int_accepted_where_float_declared(self):
        from lexgrid.agents import CONTEXT_GRADE_SCHEMA
        res = parse_structured(
            '{"relevance": 1, "specificity": 0, "explanation": "x"}', CONTEXT_GRADE_SCHEMA)
        assert res.ok
        assert isinstance(res.value["relevance"], float)

    def test_first_valid_candidate_wins(self):
        raw = '{"label": 5, "explanation": "bad"} then {"label": 1, "explanation": "good"}'
        res = parse_structured(raw, DECISION_SCHEMA)
        assert res.ok
        assert res.value["explanation"] == "good"


@settings(max_examples=200)
@given(raw=st.text(max_size=300))
def test_parse_structured_is_total(raw):
    res = parse_structured(raw, DECISION_SCHEMA)
    assert res.ok or res.error in (PARSE_FAILURE, SCHEMA_VIOLATION)
    assert res.raw == raw


class TestTemplates:
    @pytest.mark.parametrize("name", [
        METADATA_RETRIEVER, CONTEXT_GRADER, GENERATOR, GROUNDEDNESS_GRADER,
        ANSWER_RELEVANCE_GRADER, QUERY_DISAMBIGUATOR, BINARY_QA,
    ])
    def test_all_templates_load_with_versions(self, name):
        t = load_template(name)
        assert t.version
        assert t.placeholders()

    def test_missing_placeholder_value_raises(self):
        t = load_template(BINARY_QA)
        with pytest.raises(KeyError):
            t.render(query="q")

    def test_render_is_deterministic(self):
        t = load_template(CONTEXT_GRADER)
        kwargs = dict(query="q", article_id="a", body="b")
        assert t.render(**kwargs) == t.render(**kwargs)


class FlakyBackend(ChatBackend):
    def __init__(self, failures, reply="ok"):
        self.failures = failures
        self.reply = reply
        self.calls = 0
        self.max_retries = 2
        self.backoff = 0.0

    def chat(self, prompt):
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendUnavailable("down")
        return self.reply


class TestComplete:
    def test_scripted_passthrough(self):
        backend = ScriptedChatBackend({prompt_digest("hello"): "world"})
        assert complete(backend, "hello") == "world"

    def test_unscripted_prompt_strict(self):
        backend = ScriptedChatBackend({})
        with pytest.raises(UnscriptedPrompt):
            complete(backend, "hello")

    def test_lax_mode_echoes(self):
        backend = ScriptedChatBackend({}, strict=False)
        assert complete(backend, "hello") == "hello"

    def test_retries_then_succeeds(self):
        backend = FlakyBackend(failures=2)
        assert complete(backend, "x") == "ok"
        assert backend.calls == 3

    def test_retries_exhausted(self):
        backend = FlakyBackend(failures=5)
        with pytest.raises(BackendUnavailable):
            complete(backend, "x")
        assert backend.calls == 3

    def test_empty_completion(self):
        backend = ScriptedChatBackend({prompt_digest("x"): "   "})
        with pytest.raises(EmptyCompletion):
            complete(backend, "x")


class TestHTTPChatBackend:
    @pytest.mark.parametrize("body,expected", [
        ({"message": {"content": "A"}}, "A"),
        ({"choices": [{"message": {"content": "B"}}]}, "B"),
        ({"response": "C"}, "C"),
    ])
    def test_response_shapes(self, monkeypatch, body, expected):
        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return body

        captured = {}

        def fake_post(url, json=None, timeout=None):
            captured["body"] = json
            return FakeResponse()

        monkeypatch.setattr("lexgrid.llm.requests.post", fake_post)
        backend = HTTPChatBackend("http://localhost:9/chat", "m", temperature=0.9)
        assert backend.chat("hi") == expected
        assert captured["body"]["messages"] == [{"role": "user", "content": "hi"}]
        assert captured["body"]["temperature"] == 0.9
        assert captured["body"]["stream"] is False

    def test_unknown_shape(self, monkeypatch):
        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"weird": 1}

        monkeypatch.setattr("lexgrid.llm.requests.post", lambda *a, **k: FakeResponse())
        backend = HTTPChatBackend("http://localhost:9/chat", "m")
        with pytest.raises(BackendUnavailable):
            backend.chat("hi")

    def test_timeout(self, monkeypatch):
        import requests as _requests

        def fake_post(*a, **k):
            raise _requests.Timeout("slow")

        monkeypatch.setattr("lexgrid.llm.requests.post", fake_post)
        backend = HTTPChatBackend("http://localhost:9/chat", "m", max_retries=0)
        with pytest.raises(BackendTimeout):
            complete(backend, "hi")


class TestMetadataRetrieve:
    def test_scripted_fields(self):
        backend = scripted(METADATA_RETRIEVER, {"query": "q1"},
                           '{"country": "MA", "ban_topic": "plastic_bags"}')
        res = metadata_retrieve(backend, "q1")
        assert res.value == QueryMetadata(country="MA", ban_topic="plastic_bags")
        assert not res.degraded
        assert res.explanation

    def test_garbage_twice_degrades_to_empty(self):
        backend = scripted(METADATA_RETRIEVER, {"query": "q1"}, "nope", "still nope")
        res = metadata_retrieve(backend, "q1")
        assert res.value == QueryMetadata()
        assert res.value.is_empty()
        assert res.degraded
        assert "unparseable_metadata" in res.flags

    def test_filter_conversion(self):
        meta = QueryMetadata(country="MA", ban_topic="plastic_bags",
                             text_type=TextType.LAW)
        f = meta.to_filter()
        assert f.country == "MA"
        assert f.ban_topic == "plastic_bags"
        assert f.text_types == frozenset({TextType.LAW})


class TestGradeContext:
    def _grade(self, relevance, specificity):
        article = make_article()
        backend = scripted(
            CONTEXT_GRADER,
            {"query": "q", "article_id": article.article_id, "body": article.body},
            f'{{"relevance": {relevance}, "specificity": {specificity}, "explanation": "e"}}',
        )
        return grade_context(backend, "q", article)

    def test_full_marks_pass(self):
        res = self._grade(1.0, 1.0)
        assert res.value.score == 1.0
        assert res.value.passed

    def test_mean_rule_boundary_passes(self):
        # (1.0 + 0.0)/2 = 0.5, inclusive at the default threshold.
        res = self._grade(1.0, 0.0)
        assert res.value.score == pytest.approx(0.5)
        assert res.value.passed

    def test_zero_fails(self):
        res = self._grade(0.0, 0.0)
        assert res.value.score == 0.0
        assert not res.value.passed

    def test_garbage_twice_is_ungradeable_fail(self):
        article = make_article()
        backend = scripted(
            CONTEXT_GRADER,
            {"query": "q", "article_id": article.article_id, "body": article.body},
            "???", "???",
        )
        res = grade_context(backend, "q", article)
        assert not res.value.passed
        assert res.value.explanation == "ungradeable output"
        assert res.degraded

    def test_criteria_recorded(self):
        res = self._grade(0.8, 0.6)
        assert res.value.criteria == {"relevance": 0.8, "specificity": 0.6}
        assert res.value.score == pytest.approx(0.7)


def passing_contexts(*articles):
    grade = AgentGrade(1.0, True, "relevant", {})
    return [(a, grade) for a in articles]


class TestGenerate:
    def test_citation_kept(self):
        article = make_article("src:1")
        ctx = passing_contexts(article)
        backend = scripted(
            GENERATOR,
            {"query": "q", "contexts": render_context_block([article])},
            '{"text": "Oui, interdit.", "cited_article_ids": ["src:1"]}',
        )
        res = generate(backend, "q", ctx)
        assert res.value == GeneratedAnswer("Oui, interdit.", ("src:1",))
        assert not res.degraded

    def test_unknown_citation_stripped_and_flagged(self):
        article = make_article("src:1")
        ctx = passing_contexts(article)
        backend = scripted(
            GENERATOR,
            {"query": "q", "contexts": render_context_block([article])},
            '{"text": "Oui.", "cited_article_ids": ["src:1", "ghost:9"]}',
        )
        res = generate(backend, "q", ctx)
        assert res.value.cited_article_ids == ("src:1",)
        assert any(f.startswith("stripped_citations:") for f in res.flags)

    def test_no_contexts_raises(self):
        with pytest.raises(NoPassingContext):
            generate(ScriptedChatBackend({}), "q", [])

    def test_failing_context_raises(self):
        article = make_article()
        failing = [(article, AgentGrade(0.0, False, "irrelevant", {}))]
        with pytest.raises(NoPassingContext):
            generate(ScriptedChatBackend({}), "q", failing)

    def test_garbage_twice_degrades_to_uncited_text(self):
        article = make_article("src:1")
        ctx = passing_contexts(article)
        backend = scripted(
            GENERATOR,
            {"query": "q", "contexts": render_context_block([article])},
            "L'interdiction existe.", "toujours pas du JSON",
        )
        res = generate(backend, "q", ctx)
        assert res.degraded
        assert res.value.cited_article_ids == ()
        assert res.value.text


class TestGradeGroundedness:
    def test_full_support_passes(self):
        article = make_article("src:1")
        ctx = passing_contexts(article)
        answer = GeneratedAnswer("Oui.", ("src:1",))
        backend = scripted(
            GROUNDEDNESS_GRADER,
            {"answer": answer.text, "contexts": render_context_block([article])},
            '{"supported_claims_fraction": 1.0, "explanation": "all claims cited"}',
        )
        res = grade_groundedness(backend, answer, ctx)
        assert res.value.passed

    def test_half_support_fails_at_strict_threshold(self):
        article = make_article("src:1")
        ctx = passing_contexts(article)
        answer = GeneratedAnswer("Oui.", ("src:1",))
        backend = scripted(
            GROUNDEDNESS_GRADER,
            {"answer": answer.text, "contexts": render_context_block([article])},
            '{"supported_claims_fraction": 0.5, "explanation": "half unsupported"}',
        )
        res = grade_groundedness(backend, answer, ctx)
        assert not res.value.passed
        assert res.value.score == 0.5

    def test_uncited_answer_forced_fail_without_backend_call(self):
        # Strict empty script: any backend call would raise UnscriptedPrompt.
        ctx = passing_contexts(make_article("src:1"))
        answer = GeneratedAnswer("Oui sans source.", ())
        res = grade_groundedness(ScriptedChatBackend({}), answer, ctx)
        assert not res.value.passed
        assert res.value.score == 0.0
        assert "uncited_answer" in res.flags


class TestGradeAnswerRelevance:
    def _run(self, score):
        answer = GeneratedAnswer("Réponse.", ("src:1",))
        backend = scripted(
            ANSWER_RELEVANCE_GRADER,
            {"query": "q", "answer": answer.text},
            f'{{"addresses_query": {score}, "explanation": "e"}}',
        )
        return grade_answer_relevance(backend, answer, "q")

    def test_high_passes(self):
        assert self._run(1.0).value.passed

    def test_boundary_inclusive(self):
        assert self._run(0.5).value.passed

    def test_low_fails(self):
        assert not self._run(0.0).value.passed


class TestDisambiguate:
    def _backend(self, reply, failure_context="none"):
        return scripted(
            QUERY_DISAMBIGUATOR,
            {"query": "q vague", "failure_context": failure_context},
            reply,
        )

    def test_rewrite(self):
        res = disambiguate(self._backend("interdiction sacs plastiques Maroc"), "q vague")
        assert res.value == "interdiction sacs plastiques Maroc"
        assert "noop_rewrite" not in res.flags

    def test_identical_echo_is_noop(self):
        res = disambiguate(self._backend("q vague"), "q vague")
        assert res.value == "q vague"
        assert "noop_rewrite" in res.flags

    def test_empty_reply_is_noop(self):
        res = disambiguate(self._backend("   "), "q vague")
        assert res.value == "q vague"
        assert "noop_rewrite" in res.flags

    def test_failure_context_changes_prompt(self):
        backend = self._backend("autre formulation", failure_context="no passing context")
        res = disambiguate(backend, "q vague", failure_context="no passing context")
        assert res.value == "autre formulation"


class TestBinaryQA:
    def _run(self, reply, retry=None):
        answer = GeneratedAnswer("Oui, totalement.", ("src:1",))
        replies = (reply,) if retry is None else (reply, retry)
        backend = scripted(BINARY_QA, {"query": "q", "answer": answer.text}, *replies)
        return binary_qa(backend, "q", answer)

    def test_affirmative(self):
        res = self._run('{"label": 1, "explanation": "fully affirmative"}')
        assert res.value == BinaryDecision(1, "fully affirmative")

    def test_partial_answer_zero(self):
        res = self._run('{"label": 0, "explanation": "partial answer"}')
        assert res.value.label == 0

    def test_garbage_twice_conservative_zero(self):
        res = self._run("garbage", "more garbage")
        assert res.value == BinaryDecision(0, "unparseable verdict")
        assert res.degraded

    def test_out_of_range_then_garbage_is_zero(self):
        res = self._run('{"label": 2, "explanation": "x"}', "junk")
        assert res.value.label == 0
        assert res.degraded

    def test_reprompt_recovers(self):
        res = self._run("not json", '{"label": 1, "explanation": "ok now"}')
        assert res.value.label == 1
        assert not res.degraded
        assert "reprompted" in res.flags


@settings(max_examples=30)
@given(
    relevance=st.floats(min_value=0, max_value=1),
    specificity=st.floats(min_value=0, max_value=1),
)
def test_every_grade_carries_nonempty_explanation(relevance, specificity):
    article = make_article()
    backend = scripted(
        CONTEXT_GRADER,
        {"query": "q", "article_id": article.article_id, "body": article.body},
        f'{{"relevance": {relevance}, "specificity": {specificity}, "explanation": "because"}}',
    )
    res = grade_context(backend, "q", article)
    assert res.explanation.strip()
    assert res.value.explanation.strip()
    assert res.value.passed == (res.value.score >= 0.5)
