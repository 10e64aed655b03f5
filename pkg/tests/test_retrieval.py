import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flat_index, random_corpus_records
from treerag.corpus import CorpusConfig, Document, chunk_corpus
from treerag.embedding import HashedBowEmbedder
from treerag.errors import EmbeddingError
from treerag.index import Index, build_index
from treerag.retrieval import (
    RankedEntry,
    RankedList,
    RetrievalConfig,
    RrfConfig,
    bm25_scores,
    keyword_search,
    collapsed_retrieve,
    tree_traversal_retrieve,
    retrieve,
    rrf_fuse,
    hybrid_retrieve,
    vector_search,
)
from treerag.tree import ExtractiveSummarizer, build_tree

EMB = HashedBowEmbedder(64)


def ranked(modality: str, ids: list[str]) -> RankedList:
    return RankedList(modality, tuple(RankedEntry(nid, 1.0 / r, r) for r, nid in enumerate(ids, start=1)))


def empty_index() -> Index:
    return Index([], EMB.model_id, EMB.dimension, [])


@pytest.fixture(scope="module")
def corpus_tree():
    docs = [Document(r["id"], r["text"]) for r in random_corpus_records(25, seed=3)]
    return build_tree(chunk_corpus(docs, CorpusConfig(max_tokens=30)), EMB, ExtractiveSummarizer(), seed=1)


class TestVectorSearch:
    def test_self_query_ranks_first(self, embedder):
        texts = {f"n{i}": f"alpha{i} beta gamma{i * 7}" for i in range(8)}
        index = flat_index(texts, embedder)
        result = vector_search(texts["n5"], index, 10, embedder)
        assert result.entries[0].node_id == "n5"
        assert result.entries[0].score == pytest.approx(1.0, abs=1e-12)

    def test_empty_index(self, embedder):
        assert len(vector_search("anything", empty_index(), 10, embedder)) == 0

    def test_truncation_to_available(self, embedder):
        index = flat_index({"a": "x", "b": "y", "c": "z"}, embedder)
        result = vector_search("x", index, 10, embedder)
        assert len(result) == 3 and [e.rank for e in result.entries] == [1, 2, 3]

    def test_ties_break_by_node_id(self, embedder):
        index = flat_index({"c": "same text", "a": "same text", "b": "same text"}, embedder)
        assert vector_search("same text", index, 3, embedder).node_ids == ["a", "b", "c"]

    def test_model_mismatch(self, embedder):
        index = flat_index({"a": "x"}, embedder)
        with pytest.raises(EmbeddingError):
            vector_search("x", index, 1, HashedBowEmbedder(64, model_id="other"))

    def test_matches_brute_force_cosine(self, corpus_tree, embedder):
        index = build_index(corpus_tree)
        query = "term5 term17 term200 term42"
        q = embedder.embed([query])[0]
        oracle = []
        for nid, node in corpus_tree.nodes.items():
            v = node.embedding.astype(np.float64)
            oracle.append((-float(v @ q) / (np.linalg.norm(v) * np.linalg.norm(q)), nid))
        expected = [nid for _, nid in sorted(oracle)[:10]]
        assert vector_search(query, index, 10, embedder).node_ids == expected


class TestKeywordSearch:
    def test_sole_match(self, embedder):
        index = flat_index({"a": "we fit a gmm here", "b": "nothing relevant", "c": "other words"}, embedder)
        assert keyword_search("gmm", index, 10).node_ids == ["a"]

    def test_no_matching_terms(self, embedder):
        index = flat_index({"a": "one two", "b": "three"}, embedder)
        assert len(keyword_search("absent", index, 10)) == 0

    def test_single_node_hand_computed(self, embedder):
        index = flat_index({"a": "alpha beta"}, embedder)
        assert bm25_scores("alpha", index)["a"] == pytest.approx(math.log(4 / 3), abs=1e-5)
        assert bm25_scores("alpha", index)["a"] == pytest.approx(0.28768, abs=1e-5)

    def test_against_textbook_formula(self, embedder):
        texts = {"a": "cat cat dog", "b": "dog bird bird bird fish", "c": "cat"}
        index = flat_index(texts, embedder)
        toks = {k: v.split() for k, v in texts.items()}
        avg = sum(map(len, toks.values())) / 3

        def oracle(doc, query):
            total = 0.0
            for term in query.split():
                n_t = sum(term in t for t in toks.values())
                if n_t == 0:
                    continue
                idf = math.log(1 + (3 - n_t + 0.5) / (n_t + 0.5))
                tf = toks[doc].count(term)
                total += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len(toks[doc]) / avg))
            return total

        scores = bm25_scores("cat bird", index)
        for doc in texts:
            if oracle(doc, "cat bird") > 0:
                assert scores[doc] == pytest.approx(oracle(doc, "cat bird"), rel=1e-12)
            else:
                assert doc not in scores

    def test_empty_index(self):
        assert len(keyword_search("x", empty_index(), 5)) == 0


class TestRrf:
    def test_top_in_both_lists(self):
        fused = rrf_fuse([ranked("vector", ["d"]), ranked("keyword", ["d"])])
        assert abs(fused.entries[0].score - 2 / 61) < 1e-12
        assert fused.entries[0].score == pytest.approx(0.032787, abs=1e-6)

    def test_single_list_rank_three(self):
        fused = rrf_fuse([ranked("vector", ["x", "y", "d"]), ranked("keyword", [])])
        assert {e.node_id: e.score for e in fused.entries}["d"] == pytest.approx(1 / 63, abs=1e-15)

    def test_rank_inversion(self):
        one = ["A", "B"] + [f"f{i:02d}" for i in range(18)]
        two = ["z", "B"] + [f"g{i:02d}" for i in range(17)] + ["A"]
        assert one.index("A") + 1 == 1 and two.index("A") + 1 == 20
        assert one.index("B") + 1 == 2 and two.index("B") + 1 == 2
        scores = {e.node_id: e.score for e in rrf_fuse([ranked("v", one), ranked("k", two)]).entries}
        assert scores["A"] == pytest.approx(0.028893, abs=1e-6)
        assert scores["B"] == pytest.approx(0.032258, abs=1e-6)
        assert scores["B"] > scores["A"]

    def test_tie_break_example(self):
        fused = rrf_fuse([ranked("vector", ["A", "B"]), ranked("keyword", ["C"])])
        assert fused.node_ids == ["A", "C", "B"]
        assert [e.rank for e in fused.entries] == [1, 2, 3]

    def test_needs_a_list(self):
        with pytest.raises(ValueError):
            rrf_fuse([])

    @given(
        st.lists(st.lists(st.sampled_from("abcdefghij"), unique=True, max_size=10), min_size=1, max_size=4),
        st.randoms(use_true_random=False),
    )
    def test_order_of_lists_does_not_matter(self, lists, rnd):
        rankings = [ranked(f"m{i}", ids) for i, ids in enumerate(lists)]
        shuffled = rankings[:]
        rnd.shuffle(shuffled)
        a, b = rrf_fuse(rankings), rrf_fuse(shuffled)
        assert [(e.node_id, e.score) for e in a.entries] == [(e.node_id, e.score) for e in b.entries]

    @given(st.lists(st.lists(st.sampled_from("abcdefghij"), unique=True, max_size=10), min_size=1, max_size=4))
    def test_matches_formula(self, lists):
        fused = rrf_fuse([ranked(f"m{i}", ids) for i, ids in enumerate(lists)])
        expected = {}
        for ids in lists:
            for r, nid in enumerate(ids, start=1):
                expected[nid] = expected.get(nid, 0.0) + 1 / (60 + r)
        assert {e.node_id: e.score for e in fused.entries} == pytest.approx(expected, abs=1e-15)
        scores = [e.score for e in fused.entries]
        assert scores == sorted(scores, reverse=True)


class TestHybrid:
    def test_identical_rankings_keep_order(self, embedder):
        texts = {"a": "w1 w2 w3 w4 w5", "b": "w1 w2 w3 w4", "c": "w1 w2 w3", "d": "w1 w2", "e": "w1", "f": "zz"}
        index = flat_index(texts, embedder)
        query = "w1 w2 w3 w4 w5"
        vec = vector_search(query, index, 10, embedder).node_ids[:5]
        kw = keyword_search(query, index, 10).node_ids[:5]
        assert vec == kw
        result = hybrid_retrieve(query, index, embedder, RrfConfig(top_n=5))
        assert [c.node_id for c in result.contexts] == vec

    def test_planted_chunk_wins_both_modalities(self, embedder):
        texts = {f"n{i:02d}": f"common filler words number{i}" for i in range(20)}
        texts["planted"] = "Quixotic zebrafish anomaly report"
        index = flat_index(texts, embedder)
        query = "quixotic zebrafish anomaly"
        assert vector_search(query, index, 10, embedder).node_ids[0] == "planted"
        assert keyword_search(query, index, 10).node_ids[0] == "planted"
        result = hybrid_retrieve(query, index, embedder)
        assert result.contexts[0].node_id == "planted"
        assert result.contexts[0].provenance == {"vector": 1, "keyword": 1}
        assert len(result.contexts) <= 5

    def test_empty_index(self, embedder):
        assert hybrid_retrieve("q", empty_index(), embedder).contexts == ()


class TestTraversal:
    def test_zero_budget(self, corpus_tree, embedder):
        assert tree_traversal_retrieve("term1", corpus_tree, embedder, token_budget=0).contexts == ()

    def test_single_root_equals_leaf_search(self, embedder):
        texts = {f"n{i:02d}": f"t{i} t{i + 1} t{i + 2} shared" for i in range(15)}
        with_root = flat_index(texts, embedder, with_root=True)
        leaves_only = flat_index(texts, embedder)
        tree = with_root.tree()
        for budget in (3500, 9, 4):
            result = tree_traversal_retrieve("t3 t4 shared", tree, embedder, k=10, token_budget=budget)
            expected = [c.node_id for c in collapsed_retrieve("t3 t4 shared", leaves_only, embedder, 10, budget).contexts]
            assert [c.node_id for c in result.contexts] == expected

    def test_budget_respected(self, corpus_tree, embedder):
        for budget in (0, 5, 50, 200, 3500):
            result = tree_traversal_retrieve("term3 term99", corpus_tree, embedder, token_budget=budget)
            assert result.total_tokens <= budget

    def test_descends_levels(self, corpus_tree, embedder):
        result = tree_traversal_retrieve("term3 term99", corpus_tree, embedder, k=2, token_budget=10**6)
        levels = [c.level for c in result.contexts]
        assert levels == sorted(levels, reverse=True)
        assert 0 in levels and corpus_tree.root_id not in [c.node_id for c in result.contexts]


class TestCollapsed:
    def test_large_budget_is_cosine_order(self, corpus_tree, embedder):
        index = build_index(corpus_tree)
        result = collapsed_retrieve("term8 term9", index, embedder, k=10, token_budget=10**9)
        assert [c.node_id for c in result.contexts] == vector_search("term8 term9", index, 10, embedder).node_ids

    def test_budget_fits_only_first(self, corpus_tree, embedder):
        index = build_index(corpus_tree)
        first = vector_search("term8 term9", index, 1, embedder).entries[0].node_id
        budget = corpus_tree.nodes[first].token_count
        result = collapsed_retrieve("term8 term9", index, embedder, k=10, token_budget=budget)
        assert [c.node_id for c in result.contexts][:1] == [first]
        assert result.total_tokens <= budget

    def test_rank1_alone_when_next_does_not_fit(self, embedder):
        index = flat_index({"a": "q q q", "b": "q x y z w"}, embedder)
        result = collapsed_retrieve("q", index, embedder, k=10, token_budget=4)
        assert [c.node_id for c in result.contexts] == ["a"]


class TestDispatch:
    @pytest.mark.parametrize("mode", ["trex", "traversal", "collapsed"])
    def test_modes(self, mode, corpus_tree, embedder):
        index = build_index(corpus_tree)
        before = index.matrix.tobytes()
        result = retrieve("term12 term40", index, embedder, RetrievalConfig(mode=mode))
        assert result.mode == mode and result.contexts
        assert index.matrix.tobytes() == before

    @pytest.mark.parametrize("mode", ["trex", "traversal", "collapsed"])
    def test_empty_index(self, mode, embedder):
        assert retrieve("x", empty_index(), embedder, RetrievalConfig(mode=mode)).contexts == ()

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            RetrievalConfig(mode="bogus")


@settings(max_examples=60, deadline=None)
@given(
    words=st.lists(st.integers(0, 320), min_size=0, max_size=12),
    budget=st.integers(0, 400),
    k=st.integers(1, 12),
)
def test_budget_never_exceeded(words, budget, k):
    tree = _small_tree()
    index = build_index(tree)
    query = " ".join(f"term{w}" for w in words)
    for result in (
        tree_traversal_retrieve(query, tree, EMB, k=k, token_budget=budget),
        collapsed_retrieve(query, index, EMB, k=k, token_budget=budget),
    ):
        assert result.total_tokens <= budget
        if budget == 0:
            assert result.contexts == ()


@functools.cache
def _small_tree():
    docs = [Document(r["id"], r["text"]) for r in random_corpus_records(12, seed=5)]
    return build_tree(chunk_corpus(docs, CorpusConfig(max_tokens=20)), EMB, ExtractiveSummarizer())
