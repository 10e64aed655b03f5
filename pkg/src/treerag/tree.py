"""Recursive cluster-and-summarize tree construction.

Level 0 holds one leaf per chunk. Each pass reduces the current level's embeddings,
picks a cluster count by BIC, summarizes every cluster into a node on the next level,
and embeds the summaries. The loop ends at a single root node.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .clustering import (
    ClusterConfig,
    Reducer,
    assign_clusters,
    default_reduced_dim,
    reduce_dimensions,
    select_num_clusters,
)
from .corpus import Chunk
from .embedding import Embedder
from .errors import TreeError
from .llm import ChatClient, LlmConfig, TextGenerator
from .text import count_tokens

logger = logging.getLogger(__name__)

DEFAULT_SUMMARY_PROMPT = (
    "Write a concise summary of the following passages. Keep every key fact, name "
    "and number.\n\n{texts}\n\nSummary:"
)

_SENTENCE_END = re.compile(r"[.!?]")


class SummarizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    provider: Literal["remote_llm", "extractive_fallback"] = "extractive_fallback"
    max_summary_tokens: int = Field(256, ge=1)
    prompt_template: str = DEFAULT_SUMMARY_PROMPT
    llm: LlmConfig | None = None


@dataclass
class UsageMeter:
    input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, input_tokens: int, output_tokens: int) -> None:
        with self._lock:
            self.input_tokens += input_tokens
            self.output_tokens += output_tokens
            self.calls += 1

    def to_dict(self) -> dict:
        return {
            "calls": self.calls,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
        }


class Summarizer(Protocol):
    meter: UsageMeter

    def summarize(self, texts: Sequence[str]) -> str: ...


def first_sentence(text: str) -> str:
    text = text.strip()
    m = _SENTENCE_END.search(text)
    return text[: m.end()] if m else text


class ExtractiveSummarizer:
    """First sentence of each input, joined by one space, cut to the token budget."""

    def __init__(self, max_summary_tokens: int = 256, meter: UsageMeter | None = None):
        self.max_summary_tokens = max_summary_tokens
        self.meter = meter or UsageMeter()

    def summarize(self, texts: Sequence[str]) -> str:
        _check_cluster(texts)
        joined = " ".join(first_sentence(t) for t in texts)
        tokens = joined.split()[: self.max_summary_tokens]
        out = " ".join(tokens)
        self.meter.add(sum(count_tokens(t) for t in texts), len(tokens))
        return out


class LlmSummarizer:
    def __init__(
        self,
        client: TextGenerator,
        prompt_template: str = DEFAULT_SUMMARY_PROMPT,
        max_summary_tokens: int = 256,
        meter: UsageMeter | None = None,
    ):
        self.client = client
        self.prompt_template = prompt_template
        self.max_summary_tokens = max_summary_tokens
        self.meter = meter or UsageMeter()

    def summarize(self, texts: Sequence[str]) -> str:
        _check_cluster(texts)
        prompt = self.prompt_template.format(texts="\n\n".join(texts))
        out = self.client.complete(prompt, max_tokens=self.max_summary_tokens).strip()
        if not out:
            raise TreeError("summarizer returned an empty summary")
        self.meter.add(count_tokens(prompt), count_tokens(out))
        return out


def _check_cluster(texts: Sequence[str]) -> None:
    if not texts:
        raise TreeError("cannot summarize an empty cluster")
    if any(not t.strip() for t in texts):
        raise TreeError("cannot summarize a cluster containing empty text")


def make_summarizer(config: SummarizerConfig, client: TextGenerator | None = None) -> Summarizer:
    if config.provider == "extractive_fallback":
        return ExtractiveSummarizer(config.max_summary_tokens)
    if client is None:
        if config.llm is None:
            raise TreeError("remote_llm summarizer requires an 'llm' section")
        client = ChatClient(config.llm)
    return LlmSummarizer(client, config.prompt_template, config.max_summary_tokens)


def summarize_cluster(
    texts: Sequence[str], config: SummarizerConfig | None = None, summarizer: Summarizer | None = None
) -> str:
    summarizer = summarizer or make_summarizer(config or SummarizerConfig())
    return summarizer.summarize(list(texts))


# --- tree types ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TreeNode:
    node_id: str
    level: int
    kind: str  # "leaf" | "summary"
    text: str
    embedding: np.ndarray
    children: tuple[str, ...]
    token_count: int

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "level": self.level,
            "kind": self.kind,
            "text": self.text,
            "children": list(self.children),
            "token_count": self.token_count,
        }


@dataclass
class HierarchyTree:
    nodes: dict[str, TreeNode]
    levels: list[list[str]]
    root_id: str
    model_id: str
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def dimension(self) -> int:
        return int(next(iter(self.nodes.values())).embedding.shape[0])

    def ordered_nodes(self) -> list[TreeNode]:
        """Nodes level by level, in level order; this is the serialization order."""
        return [self.nodes[nid] for level in self.levels for nid in level]

    def parents(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.ordered_nodes():
            for child in node.children:
                out[child].append(node.node_id)
        return out


def quantize(vectors: np.ndarray) -> np.ndarray:
    """Round to float32 precision so in-memory and persisted vectors are identical."""
    return np.asarray(vectors, dtype=np.float32).astype(np.float64)


def validate_tree(tree: HierarchyTree, soft: bool = False) -> None:
    """Raise :class:`TreeError` unless every structural invariant holds.

    With ``soft=True`` a node may have several parents and levels need not be
    partitioned.
    """
    nodes = tree.nodes
    listed = [nid for level in tree.levels for nid in level]
    if len(listed) != len(set(listed)) or set(listed) != set(nodes):
        raise TreeError("levels do not list every node exactly once")
    for l, level in enumerate(tree.levels):
        for nid in level:
            node = nodes[nid]
            if node.level != l:
                raise TreeError(f"{nid} listed on level {l} but has level {node.level}")
            is_leaf = node.kind == "leaf"
            if is_leaf != (l == 0) or is_leaf != (not node.children):
                raise TreeError(f"{nid}: leaf <=> level 0 <=> no children violated")
            if not is_leaf and not node.text.strip():
                raise TreeError(f"{nid}: summary text is empty")
            for child in node.children:
                if child not in nodes:
                    raise TreeError(f"{nid}: unknown child {child}")
                if nodes[child].level != l - 1:
                    raise TreeError(f"{nid}: child {child} is not one level below")
    if tree.root_id not in nodes or tree.levels[-1] != [tree.root_id]:
        raise TreeError("the top level must consist of the root alone")
    parents = tree.parents()
    for nid, ps in parents.items():
        if nid == tree.root_id:
            if ps:
                raise TreeError("root has a parent")
        elif not ps or (not soft and len(ps) != 1):
            raise TreeError(f"{nid} has {len(ps)} parents")

    # Topological scan from the root: a revisit on the current path is a cycle.
    state: dict[str, int] = {}
    stack: list[tuple[str, int]] = [(tree.root_id, 0)]
    while stack:
        nid, i = stack.pop()
        if i == 0:
            if state.get(nid) == 1:
                raise TreeError(f"cycle through {nid}")
            if state.get(nid) == 2:
                continue
            state[nid] = 1
        children = nodes[nid].children
        if i < len(children):
            stack.append((nid, i + 1))
            child = children[i]
            if state.get(child) == 1:
                raise TreeError(f"cycle through {child}")
            if state.get(child) != 2:
                stack.append((child, 0))
        else:
            state[nid] = 2
    if len(state) != len(nodes):
        raise TreeError("some nodes are unreachable from the root")


# --- construction -------------------------------------------------------------------


def _summary_nodes(
    level: int,
    groups: list[list[str]],
    nodes: dict[str, TreeNode],
    embedder: Embedder,
    summarizer: Summarizer,
    jobs: int,
) -> list[TreeNode]:
    inputs = [[nodes[c].text for c in group] for group in groups]
    if jobs > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            texts = list(pool.map(summarizer.summarize, inputs))
    else:
        texts = [summarizer.summarize(x) for x in inputs]
    vectors = quantize(embedder.embed(texts))
    return [
        TreeNode(f"L{level}/C{j}", level, "summary", text, vectors[j], tuple(group), count_tokens(text))
        for j, (text, group) in enumerate(zip(texts, groups))
    ]


def build_tree(
    chunks: Sequence[Chunk],
    embedder: Embedder,
    summarizer: Summarizer,
    cluster_config: ClusterConfig | None = None,
    seed: int = 0,
    reducer: Reducer | None = None,
    jobs: int = 1,
) -> HierarchyTree:
    """Build the summary tree over ``chunks``.

    Every clustering pass caps k at ceil(|level| / 2), so each level at least
    halves; the pass at ``max_levels`` is forced into a single cluster.
    """
    cfg = cluster_config or ClusterConfig()
    if not chunks:
        raise TreeError("build_tree needs at least one chunk")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        raise TreeError("duplicate chunk ids")

    vectors = quantize(embedder.embed([c.text for c in chunks]))
    nodes: dict[str, TreeNode] = {
        c.chunk_id: TreeNode(c.chunk_id, 0, "leaf", c.text, vectors[i], (), c.token_count)
        for i, c in enumerate(chunks)
    }
    levels: list[list[str]] = [ids]
    diagnostics: list[dict] = []

    while True:
        current = levels[-1]
        m, nxt = len(current), len(levels)
        if nxt > 1 and m == 1:
            break
        diag: dict = {"level": nxt, "input_nodes": m}
        if m == 1 or nxt >= cfg.max_levels:
            groups = [sorted(current)]
            diag["forced_single_cluster"] = True
        else:
            X = np.vstack([nodes[nid].embedding for nid in current])
            dim = min(cfg.reduced_dim or default_reduced_dim(m, X.shape[1], cfg.max_reduced_dim), X.shape[1])
            level_seed = seed * 1009 + nxt
            reduced = reduce_dimensions(X, dim, reducer, seed=level_seed)
            k_cap = min(cfg.k_max, math.ceil(m / 2))
            k, params, report = select_num_clusters(reduced, k_cap, cfg, level_seed)
            assignment = assign_clusters(params, reduced, cfg.assignment, cfg.soft_threshold)
            groups = [
                sorted(current[i] for i in members) for members in assignment.clusters(k) if members
            ]
            diag.update(reduced_dim=dim, k_cap=k_cap, k=k, fit=report.to_dict())
        new_nodes = _summary_nodes(nxt, groups, nodes, embedder, summarizer, jobs)
        for node in new_nodes:
            nodes[node.node_id] = node
        levels.append([n.node_id for n in new_nodes])
        diag["output_nodes"] = len(new_nodes)
        diagnostics.append(diag)
        logger.info("level %d: %d nodes -> %d summaries", nxt, m, len(new_nodes))

    tree = HierarchyTree(nodes, levels, levels[-1][0], embedder.model_id, diagnostics)
    validate_tree(tree, soft=cfg.assignment == "soft")
    return tree


# --- serialization ------------------------------------------------------------------

NODES_FILE = "nodes.json"
VECTORS_FILE = "vectors.f32"


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True) + "\n").encode("utf-8")


def encode_nodes(
    nodes: Sequence[TreeNode], model_id: str, root_ids: Sequence[str]
) -> tuple[bytes, bytes]:
    """JSON node listing plus little-endian float32 vectors, row i = nodes[i]."""
    doc = {
        "model_id": model_id,
        "root_ids": list(root_ids),
        "nodes": [n.to_dict() for n in nodes],
    }
    matrix = np.vstack([n.embedding for n in nodes]) if nodes else np.zeros((0, 0))
    return dumps_json(doc), matrix.astype("<f4").tobytes()


def decode_nodes(nodes_bytes: bytes, vector_bytes: bytes, dimension: int) -> tuple[dict, list[TreeNode]]:
    doc = json.loads(nodes_bytes.decode("utf-8"))
    raw = doc["nodes"]
    flat = np.frombuffer(vector_bytes, dtype="<f4")
    if flat.size != len(raw) * dimension:
        raise TreeError(f"vector file holds {flat.size} floats, expected {len(raw) * dimension}")
    matrix = flat.reshape(len(raw), dimension).astype(np.float64) if raw else flat
    nodes = [
        TreeNode(
            r["node_id"], r["level"], r["kind"], r["text"], matrix[i], tuple(r["children"]), r["token_count"]
        )
        for i, r in enumerate(raw)
    ]
    return doc, nodes


def tree_from_nodes(nodes: Sequence[TreeNode], root_id: str, model_id: str) -> HierarchyTree:
    depth = max(n.level for n in nodes)
    levels: list[list[str]] = [[] for _ in range(depth + 1)]
    for n in nodes:
        levels[n.level].append(n.node_id)
    return HierarchyTree({n.node_id: n for n in nodes}, levels, root_id, model_id)


def save_tree(tree: HierarchyTree, dir_path: str | Path) -> None:
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    nodes_bytes, vec_bytes = encode_nodes(tree.ordered_nodes(), tree.model_id, [tree.root_id])
    (path / NODES_FILE).write_bytes(nodes_bytes)
    (path / VECTORS_FILE).write_bytes(vec_bytes)
    (path / "tree.json").write_bytes(
        dumps_json({"dimension": tree.dimension, "root_id": tree.root_id, "diagnostics": tree.diagnostics})
    )


def load_tree(dir_path: str | Path) -> HierarchyTree:
    path = Path(dir_path)
    meta = json.loads((path / "tree.json").read_text(encoding="utf-8"))
    doc, nodes = decode_nodes(
        (path / NODES_FILE).read_bytes(), (path / VECTORS_FILE).read_bytes(), meta["dimension"]
    )
    tree = tree_from_nodes(nodes, meta["root_id"], doc["model_id"])
    tree.diagnostics = meta.get("diagnostics", [])
    validate_tree(tree, soft=True)
    return tree
