import json

import numpy as np
import pytest

from treerag.corpus import Chunk
from treerag.embedding import HashedBowEmbedder, token_bucket
from treerag.index import Index, make_record
from treerag.tree import TreeNode, quantize

DIM = 64

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def split_vocabularies(size: int = 60, dim: int = DIM) -> tuple[list[str], list[str]]:
    """Two word lists whose hash buckets fall in disjoint halves of [0, dim)."""
    low = [w for w in (f"ax{i}" for i in range(5000)) if token_bucket(w, dim) < dim // 2][:size]
    high = [w for w in (f"bz{i}" for i in range(5000)) if token_bucket(w, dim) >= dim // 2][:size]
    return low, high


def two_blob_chunks(n_per_blob: int = 50, words: int = 40, seed: int = 7) -> list[Chunk]:
    low, high = split_vocabularies()
    rng = np.random.default_rng(seed)
    chunks = []
    for i in range(2 * n_per_blob):
        vocab = low if i < n_per_blob else high
        text = " ".join(rng.choice(vocab, size=words)) + "."
        chunks.append(Chunk(f"d{i:03d}#0", f"d{i:03d}", 0, text, words))
    return chunks


def random_corpus_records(n_docs: int, seed: int, words_per_doc: int = 60) -> list[dict]:
    rng = np.random.default_rng(seed)
    vocab = [f"term{i}" for i in range(300)]
    recs = []
    for i in range(n_docs):
        sentences = []
        for _ in range(4):
            sentences.append(" ".join(rng.choice(vocab, size=words_per_doc // 4)).capitalize() + ".")
        recs.append({"id": f"doc{i:02d}", "text": " ".join(sentences)})
    return recs


PLANTED_TEXT = "Zyzzogeton revenue rose sharply. Zyzzogeton margins widened in the quarter."
PLANTED_EVIDENCE = "Zyzzogeton margins widened"


def planted_records() -> list[dict]:
    recs = random_corpus_records(30, seed=11)
    recs.insert(13, {"id": "planted", "text": PLANTED_TEXT})
    return recs


def write_jsonl(path, records) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


@pytest.fixture
def embedder() -> HashedBowEmbedder:
    return HashedBowEmbedder(DIM)


def leaf_node(node_id: str, text: str, embedder, children: tuple[str, ...] = (), level: int = 0) -> TreeNode:
    kind = "summary" if children else "leaf"
    vec = quantize(embedder.embed([text])[0])
    return TreeNode(node_id, level, kind, text, vec, children, len(text.split()))


def flat_index(texts: dict[str, str], embedder, with_root: bool = False) -> Index:
    """Index over the given leaves; optionally adds a root summarizing all of them."""
    nodes = [leaf_node(nid, t, embedder) for nid, t in texts.items()]
    roots = [n.node_id for n in nodes]
    if with_root:
        nodes.append(leaf_node("root", "root summary", embedder, tuple(sorted(texts)), level=1))
        roots = ["root"]
    return Index([make_record(n) for n in nodes], embedder.model_id, embedder.dimension, roots)
