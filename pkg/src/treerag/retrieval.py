"""Query-time retrieval over an :class:`~treerag.index.Index` or a tree.

Ranks start at 1 and every tie is broken by ascending node_id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .embedding import Embedder, cosine_scores
from .errors import EmbeddingError
from .index import Index
from .text import eval_tokenize
from .tree import HierarchyTree, TreeNode, quantize

BM25_K1 = 1.2
BM25_B = 0.75


class RrfConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(60, ge=0)
    top_k: int = Field(10, ge=1)
    top_n: int = Field(5, ge=1)
    token_budget: int | None = Field(None, ge=0)


class TraversalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(10, ge=1)
    token_budget: int = Field(3500, ge=0)


class RetrievalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["trex", "traversal", "collapsed"] = "trex"
    rrf: RrfConfig = RrfConfig()
    traversal: TraversalConfig = TraversalConfig()
    collapsed: TraversalConfig = TraversalConfig()


@dataclass(frozen=True)
class RankedEntry:
    node_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    modality: str  # "vector" | "keyword" | "fused"
    entries: tuple[RankedEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def node_ids(self) -> list[str]:
        return [e.node_id for e in self.entries]

    def rank_of(self, node_id: str) -> int | None:
        for e in self.entries:
            if e.node_id == node_id:
                return e.rank
        return None

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "entries": [{"node_id": e.node_id, "score": e.score, "rank": e.rank} for e in self.entries],
        }


def _ranked(modality: str, scored: Sequence[tuple[str, float]]) -> RankedList:
    ordered = sorted(scored, key=lambda p: (-p[1], p[0]))
    return RankedList(
        modality, tuple(RankedEntry(nid, float(s), r) for r, (nid, s) in enumerate(ordered, start=1))
    )


@dataclass(frozen=True)
class Context:
    node_id: str
    text: str
    level: int
    kind: str
    score: float
    token_count: int
    provenance: dict[str, int | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "level": self.level,
            "kind": self.kind,
            "score": self.score,
            "token_count": self.token_count,
            "provenance": self.provenance,
            "text": self.text,
        }


@dataclass(frozen=True)
class QueryResult:
    query: str
    mode: str
    contexts: tuple[Context, ...]

    @property
    def total_tokens(self) -> int:
        return sum(c.token_count for c in self.contexts)

    @property
    def texts(self) -> list[str]:
        return [c.text for c in self.contexts]

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "mode": self.mode,
            "total_tokens": self.total_tokens,
            "contexts": [c.to_dict() for c in self.contexts],
        }


def _query_vector(query: str, embedder: Embedder, model_id: str) -> np.ndarray:
    if embedder.model_id != model_id:
        raise EmbeddingError(
            f"query embedder model_id {embedder.model_id!r} does not match index {model_id!r}"
        )
    return quantize(embedder.embed([query]))[0]


def vector_search(query: str, index: Index, top_k: int, embedder: Embedder) -> RankedList:
    """Exact cosine top-k over every node in the index."""
    q = _query_vector(query, embedder, index.model_id)
    if len(index) == 0:
        return RankedList("vector", ())
    scores = cosine_scores(index.matrix, q)
    order = np.lexsort((index.id_rank, -scores))[:top_k]
    return RankedList(
        "vector",
        tuple(
            RankedEntry(index.node_ids[i], float(scores[i]), r) for r, i in enumerate(order, start=1)
        ),
    )


def bm25_scores(query: str, index: Index, k1: float = BM25_K1, b: float = BM25_B) -> dict[str, float]:
    """Okapi BM25 with IDF = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)), summed per query token."""
    n_docs, avg = index.doc_count, index.avg_length
    scores: dict[str, float] = {}
    for term in eval_tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = math.log(1.0 + (n_docs - len(plist) + 0.5) / (len(plist) + 0.5))
        for node_id, tf in plist:
            norm = 1.0 - b + b * index.lengths[node_id] / avg
            scores[node_id] = scores.get(node_id, 0.0) + idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    return scores


def keyword_search(query: str, index: Index, top_k: int) -> RankedList:
    ranked = _ranked("keyword", list(bm25_scores(query, index).items()))
    return RankedList("keyword", ranked.entries[:top_k])


def rrf_fuse(rankings: Sequence[RankedList], config: RrfConfig | None = None) -> RankedList:
    """Reciprocal Rank Fusion: score(d) = sum over lists containing d of 1 / (k + rank).

    Contributions are summed with :func:`math.fsum`, so the result does not depend on
    the order of ``rankings``.
    """
    if not rankings:
        raise ValueError("rrf_fuse needs at least one ranking")
    k = (config or RrfConfig()).k
    parts: dict[str, list[float]] = {}
    for ranking in rankings:
        for e in ranking.entries:
            parts.setdefault(e.node_id, []).append(1.0 / (k + e.rank))
    return _ranked("fused", [(nid, math.fsum(v)) for nid, v in parts.items()])


def _take_within_budget(
    candidates: Sequence[tuple[TreeNode, float, dict]], budget: int | None, used: int = 0
) -> tuple[list[Context], int, bool]:
    """Greedy accumulation in rank order; stops at the first node that does not fit."""
    out = []
    for node, score, prov in candidates:
        if budget is not None and used + node.token_count > budget:
            return out, used, True
        used += node.token_count
        out.append(Context(node.node_id, node.text, node.level, node.kind, score, node.token_count, prov))
    return out, used, False


def hybrid_retrieve(
    query: str, index: Index, embedder: Embedder, config: RrfConfig | None = None
) -> QueryResult:
    """Vector and keyword top-k fused by RRF, truncated to ``top_n`` contexts."""
    config = config or RrfConfig()
    vec = vector_search(query, index, config.top_k, embedder)
    kw = keyword_search(query, index, config.top_k)
    fused = rrf_fuse([vec, kw], config)
    candidates = [
        (
            index.records[e.node_id].node,
            e.score,
            {"vector": vec.rank_of(e.node_id), "keyword": kw.rank_of(e.node_id)},
        )
        for e in fused.entries[: config.top_n]
    ]
    contexts, _, _ = _take_within_budget(candidates, config.token_budget)
    return QueryResult(query, "trex", tuple(contexts))


def tree_traversal_retrieve(
    query: str, tree: HierarchyTree, embedder: Embedder, k: int = 10, token_budget: int = 3500
) -> QueryResult:
    """Top-down descent: rank the candidates at one level, keep the top k, then move to
    their children. Descent starts below the root, since the root alone offers no
    choice. Selected nodes are added in level-then-rank order under the token budget.
    """
    q = _query_vector(query, embedder, tree.model_id)
    candidates = list(tree.nodes[tree.root_id].children) or [tree.root_id]
    contexts: list[Context] = []
    used = 0
    while candidates and token_budget > 0:
        nodes = [tree.nodes[c] for c in candidates]
        scores = cosine_scores(np.vstack([n.embedding for n in nodes]), q)
        ranked = sorted(zip(nodes, scores), key=lambda p: (-p[1], p[0].node_id))[:k]
        picked, used, exhausted = _take_within_budget(
            [(n, float(s), {"level_rank": r}) for r, (n, s) in enumerate(ranked, start=1)],
            token_budget,
            used,
        )
        contexts.extend(picked)
        if exhausted:
            break
        candidates = list(dict.fromkeys(c for n, _ in ranked for c in n.children))
    return QueryResult(query, "traversal", tuple(contexts))


def collapsed_retrieve(
    query: str, index: Index, embedder: Embedder, k: int = 10, token_budget: int = 3500
) -> QueryResult:
    """One cosine ranking over all nodes of every level, then greedy budget fill."""
    ranking = vector_search(query, index, k, embedder)
    candidates = [(index.records[e.node_id].node, e.score, {"vector": e.rank}) for e in ranking.entries]
    contexts, _, _ = _take_within_budget(candidates, token_budget)
    return QueryResult(query, "collapsed", tuple(contexts))


def retrieve(
    query: str,
    index: Index,
    embedder: Embedder,
    config: RetrievalConfig | None = None,
    tree: HierarchyTree | None = None,
) -> QueryResult:
    """Dispatch on ``config.mode``."""
    config = config or RetrievalConfig()
    if config.mode == "trex":
        return hybrid_retrieve(query, index, embedder, config.rrf)
    if config.mode == "collapsed":
        return collapsed_retrieve(query, index, embedder, config.collapsed.k, config.collapsed.token_budget)
    if len(index) == 0:
        return QueryResult(query, "traversal", ())
    return tree_traversal_retrieve(
        query, tree or index.tree(), embedder, config.traversal.k, config.traversal.token_budget
    )
