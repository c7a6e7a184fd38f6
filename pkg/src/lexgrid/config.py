"""Runtime configuration: one JSON file, five sections, environment
overrides for endpoint URLs and model names.

Relative paths inside a config file resolve against the file's own
directory, so a bundle of corpus + index + config moves as a unit. Unknown
sections or keys are rejected rather than ignored: a typo in a threshold
name must not silently fall back to a default.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .embeddings import EmbeddingBackend, HashedNgramBackend, HTTPEmbeddingBackend
from .llm import ChatBackend, HTTPChatBackend, ScriptedChatBackend
from .pipeline import PipelineConfig

CONFIG_ENV_VAR = "LEXGRID_CONFIG"

# (section, key) -> environment variable that overrides it.
ENV_OVERRIDES = {
    ("backends", "chat_endpoint"): "LEXGRID_CHAT_ENDPOINT",
    ("backends", "chat_model"): "LEXGRID_CHAT_MODEL",
    ("backends", "embed_endpoint"): "LEXGRID_EMBED_ENDPOINT",
    ("backends", "embed_model"): "LEXGRID_EMBED_MODEL",
}

DEFAULTS: dict = {
    "corpus": {
        "path": "corpus.jsonl",
    },
    "index": {
        "path": "index.json",
        "dimension": 256,
        "m": 16,
        "ef_construction": 200,
        "ef_search": 64,
        "seed": 0,
    },
    "backends": {
        "embedding": "hashed",  # hashed (offline, deterministic) or http
        "chat_endpoint": "http://127.0.0.1:11434/api/chat",
        "chat_model": "local-chat",
        "embed_endpoint": "http://127.0.0.1:11434/api/embed",
        "embed_model": "local-embed",
        "timeout": 60.0,
        "max_retries": 2,
        "backoff": 0.5,
        "deterministic_temperature": 0.0,
        "generative_temperature": 0.9,
    },
    "thresholds": {
        "context": 0.5,
        "groundedness": 0.8,
        "answer_relevance": 0.5,
        "baseline_distance": 0.5,
    },
    "pipeline": {
        "mode": "full",
        "top_k": 10,
        "max_loop_iterations": 3,
        "search_mode": "approximate",
        "trace_dir": "traces",
    },
}


def _merge(base: dict, override: dict, trail: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{trail}{key}"
        if key not in base:
            raise ValueError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config section {dotted} must be an object")
            merged[key] = _merge(base[key], value, trail=f"{dotted}.")
        else:
            merged[key] = value
    return merged


@dataclass
class Settings:
    """Fully merged configuration plus the directory paths resolve against."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def section(self, name: str) -> dict:
        return self.data[name]

    def resolve(self, value: str | Path) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def corpus_path(self) -> Path:
        return self.resolve(self.data["corpus"]["path"])

    @property
    def index_path(self) -> Path:
        return self.resolve(self.data["index"]["path"])

    @property
    def trace_dir(self) -> Path:
        return self.resolve(self.data["pipeline"]["trace_dir"])

    def pipeline_config(self, mode: str | None = None) -> PipelineConfig:
        pipe = self.data["pipeline"]
        thresholds = self.data["thresholds"]
        return PipelineConfig(
            mode=mode if mode is not None else pipe["mode"],
            top_k=int(pipe["top_k"]),
            max_loop_iterations=int(pipe["max_loop_iterations"]),
            context_threshold=float(thresholds["context"]),
            groundedness_threshold=float(thresholds["groundedness"]),
            relevance_threshold=float(thresholds["answer_relevance"]),
            baseline_distance_threshold=float(thresholds["baseline_distance"]),
            search_mode=pipe["search_mode"],
        )

    def embedding_backend(self) -> EmbeddingBackend:
        backends = self.data["backends"]
        dimension = int(self.data["index"]["dimension"])
        kind = backends["embedding"]
        if kind == "hashed":
            return HashedNgramBackend(dimension=dimension)
        if kind == "http":
            return HTTPEmbeddingBackend(
                endpoint=backends["embed_endpoint"],
                model=backends["embed_model"],
                dimension=dimension,
                timeout=float(backends["timeout"]),
                max_retries=int(backends["max_retries"]),
                backoff=float(backends["backoff"]),
            )
        raise ValueError(f"unknown embedding backend kind: {kind!r}")

    def chat_backends(self, scripted: str | Path | None = None,
                      ) -> tuple[ChatBackend, ChatBackend]:
        """The two chat bindings: temperature 0.0 for grading, extraction,
        and verdicts; a higher temperature for generation and rewriting.
        A scripted replies file replaces both with offline replay."""
        backends = self.data["backends"]
        det_temp = float(backends["deterministic_temperature"])
        gen_temp = float(backends["generative_temperature"])
        if scripted is not None:
            with open(scripted, encoding="utf-8") as fh:
                script = json.load(fh)
            return (
                ScriptedChatBackend(script, temperature=det_temp),
                ScriptedChatBackend(script, temperature=gen_temp),
            )
        common = dict(
            endpoint=backends["chat_endpoint"],
            model_name=backends["chat_model"],
            timeout=float(backends["timeout"]),
            max_retries=int(backends["max_retries"]),
            backoff=float(backends["backoff"]),
        )
        return (
            HTTPChatBackend(temperature=det_temp, **common),
            HTTPChatBackend(temperature=gen_temp, **common),
        )


def _apply_env_overrides(data: dict, environ=os.environ) -> None:
    for (section, key), var in ENV_OVERRIDES.items():
        value = environ.get(var)
        if value:
            data[section][key] = value


def load_settings(path: str | Path | None = None, environ=os.environ) -> Settings:
    """Defaults, overlaid by the config file (explicit path or the
    LEXGRID_CONFIG environment variable), overlaid by env overrides."""
    if path is None:
        path = environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        data = copy.deepcopy(DEFAULTS)
        base_dir = Path.cwd()
    else:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError("config file must contain a JSON object")
        data = _merge(DEFAULTS, loaded)
        base_dir = path.resolve().parent
    _apply_env_overrides(data, environ)
    return Settings(data=data, base_dir=base_dir)
