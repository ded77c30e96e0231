"""
Item embedding providers.

The identifier tree is clustered from an N x d item embedding matrix that
carries prior knowledge about items. Three providers:

- svd: collaborative-filtering factors from a truncated randomized SVD of the
  binary user-item matrix,
- random: i.i.d. uniform [-1, 1] vectors (the no-prior variant),
- file: vectors trained elsewhere, in a `N d` header + rows text format.
"""

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.utils.extmath import randomized_svd

logger = logging.getLogger(__name__)


class EmbeddingFormatError(ValueError):
    """Malformed embedding file or matrix."""


@dataclass
class ItemEmbeddingMatrix:
    """Row i is the embedding of item i."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise EmbeddingFormatError(f"embedding matrix must be 2-d, got shape {self.values.shape}")
        if self.n_items < 1 or self.dim < 2:
            raise EmbeddingFormatError(f"need N >= 1 and d >= 2, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise EmbeddingFormatError("embedding matrix has non-finite entries")

    @property
    def n_items(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def interaction_matrix(histories, n_items):
    """Binary users x items CSR matrix (repeat interactions count once)."""
    rows, cols = [], []
    for row, history in enumerate(histories):
        rows.extend([row] * len(history.items))
        cols.extend(history.items)
    data = np.ones(len(rows), dtype=np.float64)
    mat = sp.csr_matrix((data, (rows, cols)), shape=(len(histories), n_items))
    mat.sum_duplicates()
    mat.data[:] = 1.0
    return mat


def truncated_svd(matrix, dim, seed=0, n_iter=4):
    """Rank-dim randomized SVD with at least 4 power iterations: (U, s, Vt)."""
    return randomized_svd(matrix, n_components=dim, n_iter=max(4, n_iter), random_state=seed)


def svd_embeddings(histories, n_items, dim, seed=0, n_iter=4):
    """
    Item factors V * diag(s) of the binary user-item matrix.

    Args:
        histories (list[UserHistory]): training histories.
        n_items (int): catalog size N.
        dim (int): embedding size d, at most min(N, number of users).
        seed (int): randomized SVD seed.
        n_iter (int): power iterations (raised to 4 when smaller).
    """
    if not histories or n_items < 1:
        raise ValueError("svd_embeddings needs a non-empty corpus")
    if dim > min(n_items, len(histories)):
        raise ValueError(f"dim={dim} exceeds min(N={n_items}, users={len(histories)})")
    mat = interaction_matrix(histories, n_items)
    _, s, vt = truncated_svd(mat, dim, seed, n_iter)
    logger.info("SVD embeddings: N=%d d=%d, top singular value %.4f", n_items, dim, s[0])
    return ItemEmbeddingMatrix(vt.T * s)


def random_embeddings(n_items, dim, seed=0):
    if n_items < 1 or dim < 1:
        raise ValueError(f"random_embeddings needs N, d >= 1, got {n_items}, {dim}")
    rng = np.random.default_rng(seed)
    return ItemEmbeddingMatrix(rng.uniform(-1.0, 1.0, size=(n_items, dim)))


def load_embeddings(path):
    """
    Read `N d` then N rows of d floats.

    Raises:
        EmbeddingFormatError: header/body mismatch or non-finite values.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise EmbeddingFormatError(f"{path}: empty embedding file")
    try:
        n_items, dim = (int(x) for x in lines[0].split())
    except ValueError:
        raise EmbeddingFormatError(f"{path}: header must be 'N d', got {lines[0]!r}") from None
    body = lines[1:]
    if len(body) != n_items:
        raise EmbeddingFormatError(f"{path}: expected {n_items} rows, found {len(body)}")
    values = np.empty((n_items, dim), dtype=np.float64)
    for row, line in enumerate(body):
        parts = line.split()
        if len(parts) != dim:
            raise EmbeddingFormatError(f"{path}: row {row} has {len(parts)} values, expected {dim}")
        try:
            values[row] = [float(x) for x in parts]
        except ValueError:
            raise EmbeddingFormatError(f"{path}: row {row} is not numeric") from None
        if not all(math.isfinite(x) for x in values[row]):
            raise EmbeddingFormatError(f"{path}: row {row} has non-finite values")
    return ItemEmbeddingMatrix(values)


def save_embeddings(matrix, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.n_items} {matrix.dim}\n")
        for row in matrix.values:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def build_embeddings(config, histories, n_items, seed):
    """Dispatch on `embedding.provider`."""
    if config.provider == "svd":
        return svd_embeddings(histories, n_items, config.dim, seed, config.svd_iters)
    if config.provider == "random":
        return random_embeddings(n_items, config.dim, seed)
    if config.provider == "file":
        if not config.path:
            raise FileNotFoundError("embedding.provider=file needs embedding.path")
        matrix = load_embeddings(config.path)
        if matrix.n_items != n_items:
            raise EmbeddingFormatError(f"{config.path}: {matrix.n_items} rows but the corpus has N={n_items}")
        return matrix
    raise ValueError(f"unknown embedding provider {config.provider!r}")
