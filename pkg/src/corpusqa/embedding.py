"""Text-to-vector contract with two backends.

The reference backend is a deterministic hashed bag of character 3-grams,
so the whole pipeline is testable without a model. The remote backend speaks
a minimal JSON POST contract and plugs in real embedding services.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import httpx
import numpy as np

from .errors import DimensionMismatch, EmptyText, RemoteUnavailable

ENV_ENDPOINT = "CORPUSQA_EMBED_ENDPOINT"
ENV_KEY = "CORPUSQA_EMBED_KEY"

_WS = re.compile(r"\s+")


class EmbedBackend(str, Enum):
    REFERENCE = "REFERENCE"
    REMOTE = "REMOTE"


@dataclass
class EmbeddingVector:
    values: np.ndarray  # float32, unit L2 norm
    dim: int
    model_tag: str


@dataclass
class EmbedderConfig:
    backend: EmbedBackend = EmbedBackend.REFERENCE
    dim: int = 256
    endpoint_uri: str = ""
    api_key_ref: str = ""
    model_tag: str = ""


def _normalize_text(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


def _char_trigrams(norm: str) -> list[str]:
    if len(norm) < 3:
        return [norm]
    return [norm[i : i + 3] for i in range(len(norm) - 2)]


def reference_embed(text: str, dim: int = 256, model_tag: str | None = None) -> EmbeddingVector:
    """Deterministic signed feature hashing of character 3-grams.

    Bit-identical across runs and platforms (hashlib, not the salted builtin).
    """
    if dim < 16:
        raise ValueError("dim must be >= 16")
    norm = _normalize_text(text)
    if not norm:
        raise EmptyText("text is empty after normalization")
    vec = np.zeros(dim, dtype=np.float64)
    for gram in _char_trigrams(norm):
        h = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big")
        bucket = h % dim
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[bucket] += sign
    n = float(np.linalg.norm(vec))
    if n == 0.0:
        # opposite-sign grams cancelled; fall back to a single deterministic bucket
        h = int.from_bytes(hashlib.blake2b(norm.encode("utf-8"), digest_size=8).digest(), "big")
        vec[h % dim] = 1.0
        n = 1.0
    out = (vec / n).astype(np.float32)
    tag = model_tag or f"ref3gram-d{dim}"
    return EmbeddingVector(values=out, dim=dim, model_tag=tag)


class ReferenceEmbedder:
    """Stateless, pure function of (text, dim); safe for concurrent calls."""

    def __init__(self, dim: int = 256, model_tag: str | None = None) -> None:
        self.dim = dim
        self.model_tag = model_tag or f"ref3gram-d{dim}"

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        if not texts:
            raise EmptyText("no texts given")
        out = []
        for text in texts:
            if not text.strip():
                raise EmptyText("text is empty after trimming")
            out.append(reference_embed(text, self.dim, self.model_tag))
        return out

    def embed_one(self, text: str) -> EmbeddingVector:
        return self.embed([text])[0]


class RemoteEmbedder:
    """Adapter for a remote embedding service.

    Contract: POST {"texts": [...]} -> {"model": str, "dim": N, "vectors": [[...], ...]}.
    Retries transient failures with exponential backoff; in-flight requests are
    bounded by a semaphore.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str = "",
        dim: int = 256,
        model_tag: str = "remote",
        max_in_flight: int = 4,
        attempts: int = 3,
        backoff_base: float = 0.2,
        client: httpx.Client | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.api_key = api_key
        self.dim = dim
        self.model_tag = model_tag
        self.attempts = attempts
        self.backoff_base = backoff_base
        self._sem = threading.Semaphore(max_in_flight)
        self._client = client or httpx.Client(timeout=30.0)

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        if not texts:
            raise EmptyText("no texts given")
        for text in texts:
            if not text.strip():
                raise EmptyText("text is empty after trimming")
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_err: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._sem:
                    resp = self._client.post(self.endpoint, json={"texts": texts}, headers=headers)
            except httpx.HTTPError as exc:
                last_err = exc
                continue
            if resp.status_code != 200:
                last_err = RemoteUnavailable(f"status {resp.status_code}")
                continue
            payload = resp.json()
            if payload.get("dim") != self.dim:
                raise DimensionMismatch(
                    f"remote returned dim {payload.get('dim')}, expected {self.dim}"
                )
            vectors = payload.get("vectors", [])
            if len(vectors) != len(texts):
                raise RemoteUnavailable(
                    f"remote returned {len(vectors)} vectors for {len(texts)} texts"
                )
            out = []
            for row in vectors:
                arr = np.asarray(row, dtype=np.float32)
                if arr.shape != (self.dim,):
                    raise DimensionMismatch(f"vector of length {arr.shape}, expected {self.dim}")
                n = float(np.linalg.norm(arr))
                if n == 0.0:
                    raise RemoteUnavailable("remote returned a zero vector")
                out.append(EmbeddingVector(values=arr / n, dim=self.dim, model_tag=self.model_tag))
            return out
        raise RemoteUnavailable(f"embedding endpoint failed after {self.attempts} attempts: {last_err}")

    def embed_one(self, text: str) -> EmbeddingVector:
        return self.embed([text])[0]


def make_embedder(config: EmbedderConfig):
    if config.backend is EmbedBackend.REFERENCE:
        return ReferenceEmbedder(dim=config.dim, model_tag=config.model_tag or None)
    endpoint = config.endpoint_uri or os.environ.get(ENV_ENDPOINT, "")
    if not endpoint:
        raise ValueError(f"remote embedder needs endpoint_uri or {ENV_ENDPOINT}")
    api_key = config.api_key_ref or os.environ.get(ENV_KEY, "")
    return RemoteEmbedder(
        endpoint=endpoint,
        api_key=api_key,
        dim=config.dim,
        model_tag=config.model_tag or "remote",
    )
