"""Tokenizers shared by chunking, keyword search, embeddings and evaluation.

Two tokenizers exist and they are deliberately different:

* :func:`count_tokens` / :func:`whitespace_tokens` count budget units (chunk sizes,
  summary lengths, context budgets).
* :func:`eval_tokenize` produces normalized terms for the inverted index, the hashed
  embedder, and the precision/recall metrics, so search and scoring never disagree
  about what a term is.
"""

from __future__ import annotations

import re
import unicodedata
from typing import Protocol

_TERM = re.compile(r"[^\W_]+")


class Tokenizer(Protocol):
    """Anything that can split text into budget tokens."""

    def tokenize(self, text: str) -> list[str]: ...


class WhitespaceTokenizer:
    """Maximal runs of non-whitespace characters."""

    def tokenize(self, text: str) -> list[str]:
        return text.split()


DEFAULT_TOKENIZER: Tokenizer = WhitespaceTokenizer()


def whitespace_tokens(text: str, tokenizer: Tokenizer | None = None) -> list[str]:
    return (tokenizer or DEFAULT_TOKENIZER).tokenize(text)


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    """Count budget tokens in ``text`` under the configured tokenizer.

    >>> count_tokens("a  b\\tc\\n")
    3
    """
    return len(whitespace_tokens(text, tokenizer))


def _fold(text: str) -> str:
    decomposed = unicodedata.normalize("NFKD", text.lower())
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def eval_tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on every non-alphanumeric character.

    Accented letters are folded to their base form (``"Café"`` -> ``"cafe"``).
    Duplicates are preserved and empty runs are dropped.

    >>> eval_tokenize("Microsoft's Q4-FY2024")
    ['microsoft', 's', 'q4', 'fy2024']
    """
    return _TERM.findall(_fold(text))
