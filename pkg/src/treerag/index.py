"""Dual-modality index over every tree node: dense vectors plus keyword postings.

On-disk layout (one directory)::

    manifest.json   format_version, model_id, d, N, root_ids, sha256 per file
    nodes.json      node listing in row order
    vectors.f32     little-endian float32, row i = nodes.json entry i
    postings.json   term -> [[node_id, tf], ...] sorted by node_id
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ChecksumError, IndexStoreError
from .text import eval_tokenize
from .tree import (
    NODES_FILE,
    VECTORS_FILE,
    HierarchyTree,
    TreeNode,
    decode_nodes,
    dumps_json,
    encode_nodes,
    tree_from_nodes,
)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
POSTINGS_FILE = "postings.json"

Postings = dict[str, list[tuple[str, int]]]


@dataclass(frozen=True, eq=False)
class IndexRecord:
    node: TreeNode
    terms: Counter
    length: int

    @property
    def node_id(self) -> str:
        return self.node.node_id

    @property
    def text(self) -> str:
        return self.node.text

    @property
    def level(self) -> int:
        return self.node.level

    @property
    def kind(self) -> str:
        return self.node.kind

    @property
    def embedding(self) -> np.ndarray:
        return self.node.embedding


def make_record(node: TreeNode) -> IndexRecord:
    terms = eval_tokenize(node.text)
    return IndexRecord(node, Counter(terms), len(terms))


def build_postings(records: Iterable[IndexRecord]) -> Postings:
    postings: dict[str, list[tuple[str, int]]] = {}
    for rec in sorted(records, key=lambda r: r.node_id):
        for term, tf in rec.terms.items():
            postings.setdefault(term, []).append((rec.node_id, tf))
    return {t: postings[t] for t in sorted(postings)}


class Index:
    """Read-only after construction. Queries never mutate it."""

    def __init__(
        self,
        records: list[IndexRecord],
        model_id: str,
        dimension: int,
        root_ids: list[str],
        postings: Postings | None = None,
    ):
        self.records: dict[str, IndexRecord] = {}
        for rec in records:
            if rec.node_id in self.records:
                raise IndexStoreError(f"duplicate node_id {rec.node_id!r}")
            if rec.embedding.shape != (dimension,):
                raise IndexStoreError(
                    f"{rec.node_id}: embedding dimension {rec.embedding.shape} != index d={dimension}"
                )
            self.records[rec.node_id] = rec
        self.model_id = model_id
        self.dimension = dimension
        self.root_ids = list(root_ids)
        self.postings = postings if postings is not None else build_postings(records)
        self.node_ids = [r.node_id for r in records]
        self.matrix = (
            np.vstack([r.embedding for r in records]) if records else np.zeros((0, dimension))
        )
        self.matrix.setflags(write=False)
        self.lengths = {r.node_id: r.length for r in records}
        self.avg_length = sum(self.lengths.values()) / len(records) if records else 0.0
        # id_rank[i] = position of node_ids[i] in ascending id order (tie-breaking key).
        order = sorted(range(len(self.node_ids)), key=self.node_ids.__getitem__)
        self.id_rank = np.empty(len(order), dtype=np.int64)
        self.id_rank[order] = np.arange(len(order))

    @property
    def doc_count(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def tree(self) -> HierarchyTree:
        if len(self.root_ids) != 1:
            raise IndexStoreError(f"index holds {len(self.root_ids)} trees; expected exactly one")
        return tree_from_nodes([r.node for r in self.records.values()], self.root_ids[0], self.model_id)


def build_index(trees: HierarchyTree | list[HierarchyTree]) -> Index:
    """Index every leaf and summary node of one or more trees built with one embedder."""
    if isinstance(trees, HierarchyTree):
        trees = [trees]
    if not trees:
        raise IndexStoreError("build_index needs at least one tree")
    model_ids = {t.model_id for t in trees}
    if len(model_ids) != 1:
        raise IndexStoreError(f"cannot mix embedder model_ids in one index: {sorted(model_ids)}")
    dims = {t.dimension for t in trees}
    if len(dims) != 1:
        raise IndexStoreError(f"embedding dimension mismatch across trees: {sorted(dims)}")
    records = [make_record(node) for t in trees for node in t.ordered_nodes()]
    return Index(records, trees[0].model_id, dims.pop(), [t.root_id for t in trees])


def _postings_bytes(postings: Postings) -> bytes:
    return dumps_json({t: [[nid, tf] for nid, tf in lst] for t, lst in postings.items()})


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_index(index: Index, dir_path: str | Path) -> str:
    """Write the index; returns the SHA-256 of ``manifest.json``."""
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    nodes_bytes, vec_bytes = encode_nodes(
        [r.node for r in index.records.values()], index.model_id, index.root_ids
    )
    files = {
        NODES_FILE: nodes_bytes,
        VECTORS_FILE: vec_bytes,
        POSTINGS_FILE: _postings_bytes(index.postings),
    }
    for name, data in files.items():
        (path / name).write_bytes(data)
    manifest = dumps_json(
        {
            "format_version": FORMAT_VERSION,
            "model_id": index.model_id,
            "d": index.dimension,
            "N": index.doc_count,
            "root_ids": index.root_ids,
            "files": {name: _sha256(data) for name, data in files.items()},
        }
    )
    (path / MANIFEST_FILE).write_bytes(manifest)
    return _sha256(manifest)


def load_index(dir_path: str | Path) -> Index:
    path = Path(dir_path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.is_file():
        raise IndexStoreError(f"missing {MANIFEST_FILE} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IndexStoreError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IndexStoreError(
            f"unsupported index format_version {manifest.get('format_version')!r}; "
            f"expected {FORMAT_VERSION}"
        )
    blobs: dict[str, bytes] = {}
    for name, digest in manifest["files"].items():
        try:
            blobs[name] = (path / name).read_bytes()
        except OSError as exc:
            raise IndexStoreError(f"missing index file {name}: {exc}") from exc
        if _sha256(blobs[name]) != digest:
            raise ChecksumError(f"checksum mismatch for {name}: file is corrupt")

    doc, nodes = decode_nodes(blobs[NODES_FILE], blobs[VECTORS_FILE], manifest["d"])
    if doc["model_id"] != manifest["model_id"] or len(nodes) != manifest["N"]:
        raise IndexStoreError("nodes.json disagrees with manifest")
    records = [make_record(n) for n in nodes]
    stored = json.loads(blobs[POSTINGS_FILE].decode("utf-8"))
    postings = {t: [(nid, tf) for nid, tf in lst] for t, lst in stored.items()}
    if postings != build_postings(records):
        raise IndexStoreError("postings.json is inconsistent with node texts")
    return Index(records, manifest["model_id"], manifest["d"], manifest["root_ids"], postings)
