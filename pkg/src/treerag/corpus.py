"""Corpus loading and token-window chunking.

Chunks become the leaves of the summary tree. Boundaries are token positions under
the configured budget tokenizer; sentence boundaries are not respected.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import CorpusError
from .text import DEFAULT_TOKENIZER, Tokenizer, WhitespaceTokenizer, count_tokens

logger = logging.getLogger(__name__)

_NON_SPACE = re.compile(r"\S+")


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["jsonl", "plain_dir"] = "jsonl"
    max_tokens: int = Field(600, ge=1)
    overlap_tokens: int = Field(0, ge=0)
    allow_empty: bool = True

    @model_validator(mode="after")
    def _overlap_below_max(self) -> "CorpusConfig":
        if self.overlap_tokens >= self.max_tokens:
            raise ValueError("overlap_tokens must be smaller than max_tokens")
        return self


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    seq: int
    text: str
    token_count: int


def _parse_metadata(raw: object, lineno: int) -> dict[str, str]:
    if raw is None:
        return {}
    if not isinstance(raw, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in raw.items()
    ):
        raise CorpusError(f"line {lineno}: 'metadata' must be an object of string to string")
    return dict(raw)


def _load_jsonl(path: Path, allow_empty: bool) -> list[Document]:
    docs: list[Document] = []
    seen: dict[str, int] = {}
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            doc_id, text = rec.get("id"), rec.get("text")
            if not isinstance(doc_id, str) or not doc_id:
                raise CorpusError(f"line {lineno}: 'id' must be a non-empty string")
            if not isinstance(text, str):
                raise CorpusError(f"line {lineno}: 'text' must be a string")
            if not text and not allow_empty:
                raise CorpusError(f"line {lineno}: document {doc_id!r} has empty text")
            if doc_id in seen:
                raise CorpusError(
                    f"line {lineno}: duplicate id {doc_id!r} (first seen on line {seen[doc_id]})"
                )
            seen[doc_id] = lineno
            docs.append(Document(doc_id, text, _parse_metadata(rec.get("metadata"), lineno)))
    return docs


def _load_dir(path: Path, allow_empty: bool) -> list[Document]:
    docs = []
    for entry in sorted(path.iterdir(), key=lambda p: p.name):
        if not entry.is_file():
            continue
        try:
            text = entry.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CorpusError(f"cannot read {entry}: {exc}") from exc
        if not text and not allow_empty:
            raise CorpusError(f"document {entry.name!r} has empty text")
        docs.append(Document(entry.name, text))
    return docs


def load_corpus(
    path: str | Path,
    format: Literal["jsonl", "plain_dir"] = "jsonl",
    allow_empty: bool = True,
) -> list[Document]:
    """Load documents from a JSONL file or a directory of plain-text files."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    if format == "jsonl":
        if not path.is_file():
            raise CorpusError(f"expected a JSONL file: {path}")
        return _load_jsonl(path, allow_empty)
    if format == "plain_dir":
        if not path.is_dir():
            raise CorpusError(f"expected a directory: {path}")
        return _load_dir(path, allow_empty)
    raise CorpusError(f"unknown corpus format {format!r}")


def _token_spans(text: str, tokenizer: Tokenizer) -> list[tuple[int, int]] | None:
    # Character spans are only recoverable for the whitespace rule; other tokenizers
    # get their chunks re-joined with single spaces.
    if isinstance(tokenizer, WhitespaceTokenizer):
        return [m.span() for m in _NON_SPACE.finditer(text)]
    return None


def token_windows(n_tokens: int, max_tokens: int, overlap_tokens: int) -> list[tuple[int, int]]:
    """Half-open token ranges covering ``n_tokens`` with the given size and overlap."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if overlap_tokens < 0 or overlap_tokens >= max_tokens:
        raise ValueError("overlap_tokens must satisfy 0 <= overlap < max_tokens")
    windows: list[tuple[int, int]] = []
    start, step = 0, max_tokens - overlap_tokens
    while start < n_tokens:
        end = min(start + max_tokens, n_tokens)
        windows.append((start, end))
        if end == n_tokens:
            break
        start += step
    return windows


def chunk_document(
    doc: Document,
    max_tokens: int = 600,
    overlap_tokens: int = 0,
    tokenizer: Tokenizer | None = None,
) -> list[Chunk]:
    """Split ``doc`` into overlapping token windows; chunk ids are ``<doc_id>#<seq>``."""
    if overlap_tokens >= max_tokens:
        raise CorpusError(f"overlap_tokens ({overlap_tokens}) must be < max_tokens ({max_tokens})")
    tokenizer = tokenizer or DEFAULT_TOKENIZER
    tokens = tokenizer.tokenize(doc.text)
    spans = _token_spans(doc.text, tokenizer)
    windows = token_windows(len(tokens), max_tokens, overlap_tokens)
    chunks = []
    for seq, (lo, hi) in enumerate(windows):
        if spans is not None:
            text = doc.text[spans[lo][0] : spans[hi - 1][1]]
        else:
            text = " ".join(tokens[lo:hi])
        chunks.append(Chunk(f"{doc.doc_id}#{seq}", doc.doc_id, seq, text, hi - lo))
    return chunks


def chunk_corpus(
    docs: list[Document], config: CorpusConfig | None = None, tokenizer: Tokenizer | None = None
) -> list[Chunk]:
    config = config or CorpusConfig()
    chunks: list[Chunk] = []
    for doc in docs:
        if count_tokens(doc.text, tokenizer) == 0:
            logger.warning("skipping empty document %r", doc.doc_id)
            continue
        chunks.extend(chunk_document(doc, config.max_tokens, config.overlap_tokens, tokenizer))
    return chunks
