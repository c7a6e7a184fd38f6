"""Chat completion backends and the retrying transport beneath every agent.

Three backends share one contract: send a prompt, get text back. The HTTP
backend speaks the JSON chat format of common local model servers; the
scripted backend replays canned replies keyed by a digest of the rendered
prompt (the offline test and CI path); callers can plug any object with
the same surface.

Transport failures are retried with exponential backoff; contract
violations (empty completion, unscripted prompt) are not, because retrying
cannot fix them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from abc import ABC, abstractmethod
from pathlib import Path

import requests

from .errors import (
    BackendTimeout,
    BackendUnavailable,
    EmptyCompletion,
    UnscriptedPrompt,
)

logger = logging.getLogger(__name__)


def prompt_digest(prompt: str) -> str:
    """Canonical digest of a rendered prompt; keys scripted replies and the
    input_digest field of trace steps."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ChatBackend(ABC):
    """A chat completion source. temperature 0.0 is the deterministic
    regime (graders, extraction, verdicts); 0.9 the generative one
    (generation, query rewriting)."""

    model_name: str = "unknown"
    temperature: float = 0.0
    max_retries: int = 2
    backoff: float = 0.5

    @abstractmethod
    def chat(self, prompt: str) -> str:
        """Return the completion text for one prompt."""


def complete(backend: ChatBackend, prompt: str) -> str:
    """Send a prompt, retrying transport failures with exponential backoff.

    Raises BackendUnavailable/BackendTimeout once retries are exhausted and
    EmptyCompletion when the backend returns blank text.
    """
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    max_retries = max(0, int(backend.max_retries))
    last: Exception | None = None
    for attempt in range(max_retries + 1):
        try:
            text = backend.chat(prompt)
            break
        except (BackendTimeout, BackendUnavailable) as exc:
            last = exc
            logger.warning("backend %s attempt %d/%d failed: %s",
                           backend.model_name, attempt + 1, max_retries + 1, exc)
            if attempt < max_retries:
                time.sleep(backend.backoff * (2 ** attempt))
    else:
        assert last is not None
        raise last
    if not text or not text.strip():
        raise EmptyCompletion(f"backend {backend.model_name} returned an empty completion")
    return text


class ScriptedChatBackend(ChatBackend):
    """Replays canned completions from a digest -> reply mapping.

    strict mode treats an unknown prompt as an error (the acceptance and CI
    setting: every prompt must have been recorded); lax mode echoes the
    prompt back, which keeps exploratory runs alive.
    """

    def __init__(self, script: dict[str, str], strict: bool = True,
                 model_name: str = "scripted", temperature: float = 0.0):
        self.script = dict(script)
        self.strict = strict
        self.model_name = model_name
        self.temperature = temperature
        self.max_retries = 0
        self.backoff = 0.0

    @classmethod
    def from_file(cls, path: str | Path, strict: bool = True,
                  temperature: float = 0.0) -> "ScriptedChatBackend":
        with open(path, encoding="utf-8") as fh:
            script = json.load(fh)
        return cls(script, strict=strict, temperature=temperature)

    def chat(self, prompt: str) -> str:
        digest = prompt_digest(prompt)
        if digest in self.script:
            return self.script[digest]
        if self.strict:
            raise UnscriptedPrompt(digest)
        return prompt


class HTTPChatBackend(ChatBackend):
    """Client for an HTTP chat endpoint.

    Wire contract: POST {"model", "messages": [{"role", "content"}],
    "temperature", "stream": false}. The reply text is read from the first
    of these shapes found in the response body: {"message": {"content"}},
    {"choices": [{"message": {"content"}}]}, or {"response"}.
    """

    def __init__(self, endpoint: str, model_name: str, temperature: float = 0.0,
                 timeout: float = 60.0, max_retries: int = 2, backoff: float = 0.5):
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.endpoint = endpoint
        self.model_name = model_name
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def chat(self, prompt: str) -> str:
        payload = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "stream": False,
        }
        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except requests.Timeout as exc:
            raise BackendTimeout(f"chat endpoint timed out after {self.timeout}s: {exc}") from exc
        except (requests.RequestException, ValueError) as exc:
            raise BackendUnavailable(f"chat endpoint failed: {exc}") from exc
        return self._extract_text(body)

    @staticmethod
    def _extract_text(body) -> str:
        if isinstance(body, dict):
            message = body.get("message")
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                return message["content"]
            choices = body.get("choices")
            if isinstance(choices, list) and choices:
                message = choices[0].get("message", {})
                if isinstance(message, dict) and isinstance(message.get("content"), str):
                    return message["content"]
            if isinstance(body.get("response"), str):
                return body["response"]
        raise BackendUnavailable(f"unrecognized chat response shape: {str(body)[:200]}")
