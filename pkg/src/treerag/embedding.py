"""Embedding providers and cosine similarity.

Two providers share one interface: a remote OpenAI-style ``/embeddings`` client and a
deterministic hashed bag-of-words embedder used for offline builds and tests.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Protocol, Sequence

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import EmbeddingError, RemoteError
from .text import eval_tokenize

logger = logging.getLogger(__name__)


class EmbedderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    provider: Literal["remote_api", "deterministic_local"] = "deterministic_local"
    model_id: str = "hashed-bow-v1"
    dimension: int = Field(64, ge=2)
    batch_size: int = Field(64, ge=1)
    endpoint: str | None = None
    credential_env_var: str | None = None
    max_in_flight: int = Field(4, ge=1)
    timeout_s: float = Field(30.0, gt=0)
    hash_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _remote_needs_endpoint(self) -> "EmbedderConfig":
        if self.provider == "remote_api" and not (self.endpoint and self.credential_env_var):
            raise ValueError("remote_api provider requires 'endpoint' and 'credential_env_var'")
        return self


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    model_id: str

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])


class Embedder(Protocol):
    model_id: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dimension)`` float64 array, row i for ``texts[i]``."""
        ...


def token_bucket(token: str, dimension: int, seed: int = 0) -> int:
    """Bucket index for ``token`` under a keyed BLAKE2b hash."""
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little") % dimension


class HashedBowEmbedder:
    """Hashed bag-of-words: count eval tokens per hash bucket, then L2-normalize.

    Text with no tokens maps to the basis vector e_1 so cosine stays defined.
    """

    def __init__(self, dimension: int = 64, model_id: str = "hashed-bow-v1", seed: int = 0):
        if dimension < 2:
            raise EmbeddingError("dimension must be >= 2")
        self.dimension = dimension
        self.model_id = model_id
        self.seed = seed

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension)
        for tok in eval_tokenize(text):
            vec[token_bucket(tok, self.dimension, self.seed)] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        return np.vstack([self.embed_one(t) for t in texts])


_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


def with_retries(
    call: Callable[[], object],
    retries: int = 3,
    base_delay: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
):
    """Run ``call``, retrying retryable :class:`RemoteError` with exponential backoff."""
    attempt = 0
    while True:
        try:
            return call()
        except RemoteError as exc:
            if not exc.retryable or attempt >= retries:
                raise
            delay = base_delay * 2**attempt
            logger.warning("remote call failed (%s); retrying in %.1fs", exc, delay)
            sleep(delay)
            attempt += 1


def post_json(client: httpx.Client, url: str, body: dict, headers: dict[str, str]) -> dict:
    try:
        resp = client.post(url, json=body, headers=headers)
    except httpx.TransportError as exc:
        raise RemoteError(f"transport error calling {url}: {exc}", retryable=True) from exc
    if resp.status_code >= 400:
        raise RemoteError(
            f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}",
            status=resp.status_code,
            retryable=resp.status_code in _RETRYABLE_STATUS,
        )
    try:
        return resp.json()
    except ValueError as exc:
        raise RemoteError(f"{url} returned a non-JSON body", status=resp.status_code) from exc


class RemoteEmbedder:
    """Client for an OpenAI-compatible embeddings endpoint.

    Sends ``{"input": [...], "model": model_id}`` and reads ``data[i].embedding``.
    Batches run concurrently up to ``max_in_flight``; results are memoized per text.
    """

    def __init__(
        self,
        config: EmbedderConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not config.endpoint or not config.credential_env_var:
            raise EmbeddingError("remote embedder needs endpoint and credential_env_var")
        self.config = config
        self.model_id = config.model_id
        self.dimension = config.dimension
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self._sleep = sleep
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.credential_env_var or "")
        if not key:
            raise EmbeddingError(
                f"credential environment variable {self.config.credential_env_var!r} is not set"
            )
        return {"Authorization": f"Bearer {key}"}

    def _request(self, batch: list[str], headers: dict[str, str]) -> np.ndarray:
        body = {"input": batch, "model": self.model_id}

        def call():
            return post_json(self._client, self.config.endpoint, body, headers)

        payload = with_retries(call, sleep=self._sleep)
        try:
            rows = [item["embedding"] for item in payload["data"]]
        except (KeyError, TypeError) as exc:
            raise EmbeddingError("embedding response is missing data[].embedding") from exc
        out = np.asarray(rows, dtype=np.float64)
        if out.shape != (len(batch), self.dimension):
            raise EmbeddingError(
                f"expected {len(batch)}x{self.dimension} embeddings, got shape {out.shape}"
            )
        if not np.all(np.isfinite(out)):
            raise EmbeddingError("embedding response contains non-finite values")
        return out

    @staticmethod
    def _key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        headers = self._headers()
        with self._lock:
            missing = list(dict.fromkeys(t for t in texts if self._key(t) not in self._memo))
        bs = self.config.batch_size
        batches = [missing[i : i + bs] for i in range(0, len(missing), bs)]
        if batches:
            with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
                results = list(pool.map(lambda b: self._request(b, headers), batches))
            with self._lock:
                for batch, arr in zip(batches, results):
                    for text, row in zip(batch, arr):
                        self._memo[self._key(text)] = row
        with self._lock:
            return np.vstack([self._memo[self._key(t)] for t in texts])


def make_embedder(config: EmbedderConfig, client: httpx.Client | None = None) -> Embedder:
    if config.provider == "deterministic_local":
        # A different hash seed yields different vectors, so it must yield a different id.
        model_id = config.model_id if config.hash_seed == 0 else f"{config.model_id}@seed{config.hash_seed}"
        return HashedBowEmbedder(config.dimension, model_id, config.hash_seed)
    return RemoteEmbedder(config, client=client)


def embed_batch(
    texts: Sequence[str], config: EmbedderConfig | None = None, embedder: Embedder | None = None
) -> list[EmbeddingVector]:
    """Embed ``texts`` in order, one :class:`EmbeddingVector` per input."""
    if not texts:
        raise EmbeddingError("embed_batch requires at least one text")
    embedder = embedder or make_embedder(config or EmbedderConfig())
    matrix = embedder.embed(list(texts))
    return [EmbeddingVector(row, embedder.model_id) for row in matrix]


def _as_array(v: EmbeddingVector | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        v = v.values
    return np.asarray(v, dtype=np.float64)


def cosine_similarity(
    a: EmbeddingVector | Sequence[float] | np.ndarray,
    b: EmbeddingVector | Sequence[float] | np.ndarray,
) -> float:
    """dot(a, b) / (|a| |b|), clipped to [-1, 1]."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape or x.ndim != 1:
        raise EmbeddingError(f"dimension mismatch: {x.shape} vs {y.shape}")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise EmbeddingError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(float(np.dot(x, y)) / (nx * ny), -1.0, 1.0))


def cosine_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Cosine of ``query`` against every row of ``matrix``."""
    m = np.asarray(matrix, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if m.size == 0:
        return np.zeros(m.shape[0])
    if m.shape[1] != q.shape[0]:
        raise EmbeddingError(f"dimension mismatch: index d={m.shape[1]}, query d={q.shape[0]}")
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise EmbeddingError("query embedding has zero norm")
    norms = np.linalg.norm(m, axis=1)
    norms[norms == 0.0] = np.inf
    return np.clip((m @ q) / (norms * qn), -1.0, 1.0)
