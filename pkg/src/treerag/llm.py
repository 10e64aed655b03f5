"""Minimal chat-completions client used for summaries, judging and answer generation."""

from __future__ import annotations

import os
import time
from typing import Callable, Protocol

import httpx
from pydantic import BaseModel, ConfigDict, Field

from .embedding import post_json, with_retries
from .errors import RemoteError


class LlmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    endpoint: str
    model: str
    credential_env_var: str
    timeout_s: float = Field(60.0, gt=0)
    temperature: float = 0.0
    max_tokens: int = Field(1024, ge=1)


class TextGenerator(Protocol):
    def complete(self, prompt: str, max_tokens: int | None = None, **extra) -> str: ...


class ChatClient:
    """POSTs ``{"model", "messages", "max_tokens", "temperature"}`` and returns
    ``choices[0].message.content``. Extra keyword arguments (e.g. ``logit_bias``)
    are forwarded in the request body."""

    def __init__(
        self,
        config: LlmConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self._sleep = sleep

    def complete(self, prompt: str, max_tokens: int | None = None, **extra) -> str:
        key = os.environ.get(self.config.credential_env_var)
        if not key:
            raise RemoteError(
                f"credential environment variable {self.config.credential_env_var!r} is not set",
                status=401,
            )
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens or self.config.max_tokens,
            "temperature": self.config.temperature,
            **extra,
        }
        headers = {"Authorization": f"Bearer {key}"}
        payload = with_retries(
            lambda: post_json(self._client, self.config.endpoint, body, headers), sleep=self._sleep
        )
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise RemoteError("chat response is missing choices[0].message.content") from exc


ANSWER_PROMPT = (
    "Answer the question using only the context below.\n\n"
    "Context:\n{context}\n\nQuestion: {question}\nAnswer:"
)


def generate_answer(client: TextGenerator, question: str, contexts: list[str]) -> str:
    context = "\n\n".join(f"[{i}] {c}" for i, c in enumerate(contexts, start=1))
    return client.complete(ANSWER_PROMPT.format(context=context, question=question)).strip()
