"""Exception types shared across the package."""


class TreeRagError(Exception):
    """Base class for all errors raised by treerag."""


class CorpusError(TreeRagError):
    """Raised when a corpus cannot be read or parsed."""


class EmbeddingError(TreeRagError):
    """Raised for embedding provider failures."""


class RemoteError(TreeRagError):
    """A remote HTTP call failed.

    ``status`` is the HTTP status code, or ``None`` for transport-level failures.
    """

    def __init__(self, message: str, status: int | None = None, retryable: bool = False):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


class ClusteringError(TreeRagError):
    """Raised for invalid clustering inputs (bad k, non-finite data, shape mismatch)."""


class TreeError(TreeRagError):
    """Raised when a tree is malformed or cannot be built."""


class IndexStoreError(TreeRagError):
    """Raised for index build, persistence, or integrity failures."""


class ChecksumError(IndexStoreError):
    """A persisted index file does not match the checksum in its manifest."""


class JudgeError(TreeRagError):
    """Raised when a judge response cannot be parsed."""
