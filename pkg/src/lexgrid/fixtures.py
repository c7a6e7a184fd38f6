"""Synthetic offline fixture bundle.

A two-country corpus encodes one French marker phrase per indicator: an
article "provides" indicator k exactly when its body contains marker k.
Rule-driven chat fakes read those markers back out of their prompts, so
the whole pipeline runs deterministically with no model server, and a
recording pass turns the rule replies into digest-keyed scripts for
byte-stable replay.

Rebuild the shipped bundle with `python -m lexgrid.fixtures --root fixtures`.
"""

from __future__ import annotations

import argparse
import json
import random
import re
from pathlib import Path

from . import agents
from .config import load_settings
from .corpus import ingest, load_source_directory, read_corpus
from .grid import INDICATOR_QUESTIONS, GoldLabels, compute_grid
from .llm import ChatBackend, ScriptedChatBackend, prompt_digest
from .pipeline import MODE_FULL, MODES, PipelineHandles
from .templates import load_template
from .vector_index import VectorIndex, index_corpus

BAN_TOPIC = "plastic_bags"
COUNTRIES = ("MA", "SN")
CORPUS_NAME = "synthetic-plastic-bans"

# One phrase per indicator ordinal, matched case-insensitively against
# article bodies and generated answers.
MARKERS: dict[int, str] = {
    1: "est interdite par le présent article",
    2: "sur tout le territoire national",
    3: "de manière permanente et sans limite de durée",
    4: "notamment la production, l'importation, la vente et la distribution",
    5: "aucune exception n'est admise",
    6: "les exemptions sont limitées à des cas précis",
    7: "une amende de",
    8: "une peine d'emprisonnement",
    9: "l'autorité nationale de contrôle est chargée de l'application",
    10: "un contrôle d'une durée de trente jours",
    11: "un contrôle sur les lieux de vente",
}

# filename -> sidecar metadata, exactly the `ingest --metadata` layout.
SOURCE_FIELDS: dict[str, dict] = {
    "ma-2016-77.txt": {
        "source_id": "ma-2016-77",
        "country": "MA",
        "ban_topic": BAN_TOPIC,
        "text_type": "law",
        "institution": "Parliament",
        "publication_date": "2016-07-25",
    },
    "sn-2015-09.txt": {
        "source_id": "sn-2015-09",
        "country": "SN",
        "ban_topic": BAN_TOPIC,
        "text_type": "decree",
        "institution": "Ministry of Environment",
        "publication_date": "2015-04-21",
    },
}

# MA provides indicators 1,2,3,4,6,7,9; SN provides 1,4,5,7,8,10.
SOURCE_TEXTS: dict[str, str] = {
    "ma-2016-77.txt": (
        "Article 1. La fabrication, l'importation, l'exportation, la détention"
        " en vue de la vente et l'utilisation des sacs en matières plastiques"
        " est interdite par le présent article. La règle s'applique sur tout"
        " le territoire national, de manière permanente et sans limite de"
        " durée. Sont visées notamment la production, l'importation, la vente"
        " et la distribution des sacs de caisse. "
        "Article 2. Les exemptions sont limitées à des cas précis définis par"
        " décret, pour les usages industriels et agricoles. Toute infraction"
        " est punie d'une amende de dix mille à cinq cent mille dirhams."
        " L'autorité nationale de contrôle est chargée de l'application des"
        " sanctions prévues."
    ),
    "sn-2015-09.txt": (
        "Article 1. La détention, la distribution et l'utilisation des sachets"
        " plastiques de faible micronnage est interdite par le présent"
        " article. Sont visées notamment la production, l'importation, la"
        " vente et la distribution sur les marchés. Aucune exception n'est"
        " admise au titre du présent régime. "
        "Article 2. Les contrevenants encourent une amende de cinquante mille"
        " francs ainsi qu'une peine d'emprisonnement de six mois au plus. Les"
        " agents assermentés conduisent un contrôle d'une durée de trente"
        " jours après chaque constatation."
    ),
}

_LLM_AGENT_NAMES = tuple(
    name for name, is_llm in agents.AGENT_IS_LLM.items() if is_llm)

_CONTEXT_ID_RE = re.compile(r"\[([\w\-]+:\d+)\]")


def _agent_markers() -> dict[str, str]:
    """Distinctive first instruction line of each template -> agent name."""
    return {
        load_template(name).body.splitlines()[0]: name
        for name in _LLM_AGENT_NAMES
    }


def _detect_agent(prompt: str, markers: dict[str, str]) -> str:
    for line, agent in markers.items():
        if line in prompt:
            return agent
    raise ValueError(f"prompt matches no agent template: {prompt[:80]!r}")


def _ordinal_in(prompt: str) -> int | None:
    for q in INDICATOR_QUESTIONS:
        if q.text in prompt:
            return q.ordinal
    return None


def _context_ids(prompt: str) -> list[str]:
    seen: list[str] = []
    for match in _CONTEXT_ID_RE.findall(prompt):
        if match not in seen:
            seen.append(match)
    return seen


def gold_labels() -> GoldLabels:
    """Ground truth derived from marker presence in each country's text."""
    gold = GoldLabels()
    for filename, fields in SOURCE_FIELDS.items():
        text = SOURCE_TEXTS[filename].lower()
        for ordinal, marker in MARKERS.items():
            gold.labels[(BAN_TOPIC, fields["country"], ordinal)] = (
                1 if marker in text else 0)
            gold.notes[(BAN_TOPIC, fields["country"], ordinal)] = (
                f"marker: {marker}")
    return gold


class RuleChatBackend(ChatBackend):
    """Deterministic content-driven fake: grades, generates, and decides by
    reading indicator markers out of the prompt text itself."""

    def __init__(self, fail_all_grades: bool = False, model_name: str = "rule"):
        self.fail_all_grades = fail_all_grades
        self.model_name = model_name
        self.max_retries = 0
        self.backoff = 0.0
        self._markers = _agent_markers()

    def chat(self, prompt: str) -> str:
        agent = _detect_agent(prompt, self._markers)
        ordinal = _ordinal_in(prompt)
        low = prompt.lower()
        if agent == agents.METADATA_RETRIEVER:
            fields: dict = {"ban_topic": BAN_TOPIC}
            m = re.search(r"\bin ([A-Z]{2})\b", prompt)
            if m:
                fields["country"] = m.group(1)
            return json.dumps(fields)
        if agent == agents.CONTEXT_GRADER:
            hit = (not self.fail_all_grades and ordinal is not None
                   and MARKERS[ordinal] in low)
            score = 1.0 if hit else 0.0
            why = ("the article states the provision verbatim" if hit
                   else "no marker for this indicator in the article")
            return json.dumps({"relevance": score, "specificity": score,
                               "explanation": why})
        if agent == agents.GENERATOR:
            marker = MARKERS.get(ordinal or 0, "")
            text = f"Oui. Les articles cités prévoient la disposition: {marker}."
            return json.dumps({"text": text,
                               "cited_article_ids": _context_ids(prompt)},
                              ensure_ascii=False)
        if agent == agents.GROUNDEDNESS_GRADER:
            return json.dumps({"supported_claims_fraction": 1.0,
                               "explanation": "every claim quotes a cited article"})
        if agent == agents.ANSWER_RELEVANCE_GRADER:
            return json.dumps({"addresses_query": 1.0,
                               "explanation": "the answer addresses the indicator directly"})
        if agent == agents.QUERY_DISAMBIGUATOR:
            return (f"Formulation alternative {prompt_digest(prompt)[:12]}"
                    f" de la question initiale")
        if agent == agents.BINARY_QA:
            if ordinal is not None and MARKERS[ordinal] in low:
                return json.dumps({"label": 1, "explanation":
                                   "the answer affirms the provision and cites it"})
            return json.dumps({"label": 0, "explanation":
                               "the answer does not establish the provision"})
        raise AssertionError(agent)


class RecorderBackend(ChatBackend):
    """Wraps another backend and records digest -> reply for later replay."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.model_name = f"recorded-{inner.model_name}"
        self.max_retries = 0
        self.backoff = 0.0
        self.script: dict[str, str] = {}

    def chat(self, prompt: str) -> str:
        reply = self.inner.chat(prompt)
        self.script[prompt_digest(prompt)] = reply
        return reply


class RandomizedBackend(ChatBackend):
    """Seeded chaos fake for conservativeness sweeps: valid replies,
    malformed replies, and hostile values, drawn at random per prompt."""

    GARBAGE = (
        "je ne saurais pas dire",
        '{"label": "oui"}',
        "{broken json",
        '{"unexpected_key": true}',
        "```json\nnothing here\n```",
    )

    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self.model_name = f"randomized-{seed}"
        self.max_retries = 0
        self.backoff = 0.0
        self._markers = _agent_markers()

    def chat(self, prompt: str) -> str:
        rng = self.rng
        agent = _detect_agent(prompt, self._markers)
        if rng.random() < 0.2:
            return rng.choice(self.GARBAGE)
        if agent == agents.METADATA_RETRIEVER:
            fields = {}
            if rng.random() < 0.7:
                fields["country"] = rng.choice(["MA", "SN", "FR"])
            if rng.random() < 0.7:
                fields["ban_topic"] = rng.choice([BAN_TOPIC, "bottom_trawling"])
            return json.dumps(fields)
        if agent == agents.CONTEXT_GRADER:
            return json.dumps({"relevance": round(rng.random(), 3),
                               "specificity": round(rng.random(), 3),
                               "explanation": "arbitrary grade"})
        if agent == agents.GENERATOR:
            cited = [i for i in _context_ids(prompt) if rng.random() < 0.7]
            if rng.random() < 0.15:
                cited.append("forged:99")
            text = rng.choice(["Oui, la règle existe.",
                               "Non, rien ne l'établit.",
                               "La situation est incertaine."])
            return json.dumps({"text": text, "cited_article_ids": cited},
                              ensure_ascii=False)
        if agent == agents.GROUNDEDNESS_GRADER:
            return json.dumps({"supported_claims_fraction": round(rng.random(), 3),
                               "explanation": "arbitrary audit"})
        if agent == agents.ANSWER_RELEVANCE_GRADER:
            return json.dumps({"addresses_query": round(rng.random(), 3),
                               "explanation": "arbitrary relevance"})
        if agent == agents.QUERY_DISAMBIGUATOR:
            return f"reformulation {rng.randrange(10 ** 6)} de la question"
        if agent == agents.BINARY_QA:
            return json.dumps({"label": rng.choice([0, 1]),
                               "explanation": "arbitrary verdict"})
        raise AssertionError(agent)


FIXTURE_CONFIG: dict = {
    "corpus": {"path": "corpus.jsonl"},
    "index": {"path": "index.json", "dimension": 64},
    "backends": {"embedding": "hashed"},
    "pipeline": {"trace_dir": "traces"},
}


def write_sources(root: Path) -> Path:
    sources_dir = root / "sources"
    sources_dir.mkdir(parents=True, exist_ok=True)
    for filename, text in SOURCE_TEXTS.items():
        (sources_dir / filename).write_text(text, encoding="utf-8")
    (sources_dir / "metadata.json").write_text(
        json.dumps(SOURCE_FIELDS, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return sources_dir


def _write_json(path: Path, payload) -> None:
    path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def build_fixture(root: str | Path = "fixtures") -> Path:
    """Write the complete bundle and verify its scripted replay in place."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sources_dir = write_sources(root)
    _write_json(root / "config.json", FIXTURE_CONFIG)
    settings = load_settings(root / "config.json")

    sources = load_source_directory(sources_dir, sources_dir / "metadata.json")
    ingest(sources, CORPUS_NAME, path=settings.corpus_path)
    corpus = read_corpus(settings.corpus_path)

    embedder = settings.embedding_backend()
    sec = settings.section("index")
    index = VectorIndex(dimension=embedder.dimension, m=int(sec["m"]),
                        ef_construction=int(sec["ef_construction"]),
                        ef_search=int(sec["ef_search"]), seed=int(sec["seed"]))
    index_corpus(corpus, embedder, index=index)
    index.save(settings.index_path)

    gold = gold_labels()
    gold.save(root / "gold_labels.jsonl")

    def handles(backend: ChatBackend) -> PipelineHandles:
        return PipelineHandles(
            corpus=corpus, index=VectorIndex.load(settings.index_path),
            embedder=embedder, deterministic=backend, generative=backend)

    # Recording pass: rule replies for every mode and country.
    recorder = RecorderBackend(RuleChatBackend())
    recording = handles(recorder)
    expected: dict[str, dict[str, list[int]]] = {}
    for mode in MODES:
        expected[mode] = {}
        config = settings.pipeline_config(mode=mode)
        for country in COUNTRIES:
            grid = compute_grid(BAN_TOPIC, country, recording, config)
            expected[mode][country] = grid.labels()
    _write_json(root / "scripted_replies.json", recorder.script)

    # The full pipeline must reproduce the marker-derived gold exactly.
    for country in COUNTRIES:
        truth = [gold.get(BAN_TOPIC, country, q.ordinal) for q in INDICATOR_QUESTIONS]
        if expected[MODE_FULL][country] != truth:
            raise AssertionError(
                f"fixture self-check: full-mode labels for {country} diverge "
                f"from gold: {expected[MODE_FULL][country]} != {truth}")

    # All-fail variant: the context grader rejects everything, so every run
    # must exhaust its loop budget and settle on 0.
    fail_recorder = RecorderBackend(RuleChatBackend(fail_all_grades=True))
    fail_grid = compute_grid(BAN_TOPIC, "MA", handles(fail_recorder),
                             settings.pipeline_config(mode=MODE_FULL))
    if fail_grid.labels() != [0] * 11:
        raise AssertionError("fixture self-check: all-fail grid must be all zeros")
    _write_json(root / "all_fail_replies.json", fail_recorder.script)

    _write_json(root / "expected_labels.json", {
        "ban_topic": BAN_TOPIC,
        "countries": list(COUNTRIES),
        "modes": expected,
    })

    # Replay check: strict scripted playback reproduces every recorded label
    # with no unscripted prompts and no dead slots.
    script = json.loads((root / "scripted_replies.json").read_text("utf-8"))
    replay = handles(ScriptedChatBackend(script, strict=True))
    for mode in MODES:
        config = settings.pipeline_config(mode=mode)
        for country in COUNTRIES:
            grid = compute_grid(BAN_TOPIC, country, replay, config)
            if grid.labels() != expected[mode][country]:
                raise AssertionError(
                    f"fixture self-check: replay labels diverge for "
                    f"{mode}/{country}")
            for slot in grid.slots:
                if slot.explanation.startswith("pipeline error:"):
                    raise AssertionError(
                        f"fixture self-check: replay slot {slot.ordinal} "
                        f"({mode}/{country}) died: {slot.explanation}")
    return root


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="rebuild the synthetic offline fixture bundle")
    parser.add_argument("--root", default="fixtures", metavar="DIR",
                        help="bundle directory (default ./fixtures)")
    args = parser.parse_args(argv)
    root = build_fixture(args.root)
    print(f"fixture bundle written to {root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
