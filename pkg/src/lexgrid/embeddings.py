"""Embedding backends: a deterministic in-process stub and an HTTP client.

Both implement the same contract: a fixed output dimension and a batch
embed call returning one finite vector per input text. The stub hashes
character 3-grams so related texts land near each other without any model;
the HTTP client speaks the plain JSON wire format of common local
embedding servers.
"""

from __future__ import annotations

import hashlib
import logging
import time
from abc import ABC, abstractmethod

import numpy as np
import requests

from .errors import BackendTimeout, BackendUnavailable, DimensionMismatch

logger = logging.getLogger(__name__)


class EmbeddingBackend(ABC):
    dimension: int

    @abstractmethod
    def embed_batch(self, texts: list[str]) -> np.ndarray:
        """Return a (len(texts), dimension) float64 array."""


def embed(text: str, backend: EmbeddingBackend) -> np.ndarray:
    """Embed one text, validating the backend's output shape and finiteness."""
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    out = np.asarray(backend.embed_batch([text]), dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != 1 or out.shape[1] != backend.dimension:
        raise DimensionMismatch(backend.dimension, int(out.shape[-1]) if out.ndim else 0)
    vec = out[0]
    if not np.all(np.isfinite(vec)):
        raise DimensionMismatch(backend.dimension, backend.dimension)
    return vec


class HashedNgramBackend(EmbeddingBackend):
    """Deterministic test embedder: hash character 3-grams of the lowercased
    text into `dimension` buckets (+1 per occurrence), then L2-normalize.
    Texts shorter than 3 characters contribute themselves as a single gram.
    Uses a keyed content hash, not Python's salted hash(), so vectors are
    stable across processes.
    """

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            lowered = text.lower()
            grams = (
                [lowered[i: i + 3] for i in range(len(lowered) - 2)]
                if len(lowered) >= 3
                else [lowered]
            )
            for g in grams:
                out[row, self._bucket(g)] += 1.0
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class HTTPEmbeddingBackend(EmbeddingBackend):
    """Client for an HTTP embedding endpoint.

    Wire contract: POST a JSON body {"model": ..., "input": [texts]} and
    read back {"embeddings": [[...], ...]}.
    """

    def __init__(self, endpoint: str, model: str, dimension: int,
                 timeout: float = 30.0, max_retries: int = 2, backoff: float = 0.5):
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        payload = {"model": self.model, "input": list(texts)}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                rows = resp.json()["embeddings"]
                break
            except requests.Timeout as exc:
                last = BackendTimeout(f"embedding endpoint timed out: {exc}")
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = BackendUnavailable(f"embedding endpoint failed: {exc}")
            if attempt < self.max_retries:
                time.sleep(self.backoff * (2 ** attempt))
        else:
            assert last is not None
            raise last
        out = np.asarray(rows, dtype=np.float64)
        if out.ndim != 2 or out.shape != (len(texts), self.dimension):
            got = int(out.shape[-1]) if out.ndim >= 1 and out.size else 0
            raise DimensionMismatch(self.dimension, got)
        return out
