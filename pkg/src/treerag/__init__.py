"""Hierarchical summary-tree retrieval with hybrid vector/keyword search."""

from .clustering import (
    ClusterAssignment,
    ClusterConfig,
    FitReport,
    GmmParams,
    PCAReducer,
    assign_clusters,
    bic_score,
    fit_gmm,
    reduce_dimensions,
    select_num_clusters,
)
from .corpus import Chunk, CorpusConfig, Document, chunk_corpus, chunk_document, load_corpus
from .embedding import (
    EmbedderConfig,
    EmbeddingVector,
    HashedBowEmbedder,
    RemoteEmbedder,
    cosine_similarity,
    embed_batch,
    make_embedder,
)
from .evaluation import (
    GroundTruth,
    PrecisionRecall,
    judge_oltp,
    pairwise_win_rate,
    run_eval,
    substring_precision_recall,
    token_precision_recall,
)
from .index import Index, build_index, load_index, save_index
from .retrieval import (
    QueryResult,
    RankedList,
    RrfConfig,
    keyword_search,
    collapsed_retrieve,
    tree_traversal_retrieve,
    retrieve,
    rrf_fuse,
    hybrid_retrieve,
    vector_search,
)
from .text import count_tokens, eval_tokenize
from .tree import (
    ExtractiveSummarizer,
    HierarchyTree,
    SummarizerConfig,
    TreeNode,
    build_tree,
    summarize_cluster,
    validate_tree,
)

__version__ = "0.1.0"
