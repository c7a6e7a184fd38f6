"""Shared test backends: prompt-routing chat fakes for pipeline-level tests.

Each packaged template opens with a distinctive instruction line, so a
router can dispatch on prompt content without precomputed digests.
"""

from lexgrid import agents
from lexgrid.llm import ChatBackend


class FnBackend(ChatBackend):
    def __init__(self, fn, model_name="fn"):
        self.fn = fn
        self.model_name = model_name
        self.max_retries = 0
        self.backoff = 0.0

    def chat(self, prompt):
        return self.fn(prompt)


PROMPT_MARKERS = {
    "You extract retrieval metadata": agents.METADATA_RETRIEVER,
    "You grade one retrieved legal article": agents.CONTEXT_GRADER,
    "Answer the question using only the articles": agents.GENERATOR,
    "You check whether each claim": agents.GROUNDEDNESS_GRADER,
    "You check whether an answer actually addresses": agents.ANSWER_RELEVANCE_GRADER,
    "Rewrite the query below": agents.QUERY_DISAMBIGUATOR,
    "Decide the binary indicator": agents.BINARY_QA,
}


def detect_agent(prompt):
    for marker, agent in PROMPT_MARKERS.items():
        if marker in prompt:
            return agent
    raise AssertionError(f"unrecognized prompt: {prompt[:80]}")


def first_context_id(prompt):
    start = prompt.index("[") + 1
    return prompt[start: prompt.index("]", start)]


def make_router(overrides=None):
    """A healthy end-to-end router; overrides replace per-agent behavior."""
    overrides = overrides or {}

    def respond(prompt):
        agent = detect_agent(prompt)
        if agent in overrides:
            return overrides[agent](prompt)
        if agent == agents.METADATA_RETRIEVER:
            return '{"country": "MA", "ban_topic": "plastic_bags"}'
        if agent == agents.CONTEXT_GRADER:
            good = "interdit" in prompt
            score = 1.0 if good else 0.0
            return (f'{{"relevance": {score}, "specificity": {score}, '
                    f'"explanation": "keyword check"}}')
        if agent == agents.GENERATOR:
            cid = first_context_id(prompt)
            return (f'{{"text": "Oui, la règle existe.", '
                    f'"cited_article_ids": ["{cid}"]}}')
        if agent == agents.GROUNDEDNESS_GRADER:
            return '{"supported_claims_fraction": 1.0, "explanation": "all claims cited"}'
        if agent == agents.ANSWER_RELEVANCE_GRADER:
            return '{"addresses_query": 1.0, "explanation": "on topic"}'
        if agent == agents.QUERY_DISAMBIGUATOR:
            return "variante " + str(len(prompt) % 97) + " de la question"
        if agent == agents.BINARY_QA:
            return '{"label": 1, "explanation": "entirely affirmative"}'
        raise AssertionError(agent)

    return respond
