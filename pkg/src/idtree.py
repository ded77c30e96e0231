"""
Balanced k-ary identifier tree.

Items are clustered recursively into k groups (sizes floor(m/k) or
floor(m/k)+1) until a group holds at most k items, whose members become
leaves. Every item's identifier is its root-to-leaf token path:

- tokens 0..N-1 are the leaves and equal the item ids,
- token N is the start token and the tree root,
- tokens N+1..M-1 are internal nodes, numbered on first visit while walking
  items in id order.

Paths shorter than the deepest one are right-padded with the item's own leaf
token; such a padding step has the leaf as its only candidate.
"""

import json
import logging
import os
import warnings
from functools import cached_property

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans, kmeans_plusplus
from sklearn.exceptions import ConvergenceWarning

logger = logging.getLogger(__name__)

TREE_FORMAT = "seater-tree/1"


class TreeFormatError(ValueError):
    """Tree file or structure that violates the identifier-tree invariants."""


def _capacity_assign(points, centers, min_size, max_size):
    """
    Greedy capacity-constrained assignment, then pairwise exchange.

    (point, cluster) pairs are visited by ascending margin, the squared
    distance to the cluster minus the point's distance to its farthest
    center (ties: lower point index, then lower cluster index). A cluster
    accepts a point while below min_size, or while below max_size and slack
    remains. Points are then swapped between clusters while an exchange
    lowers the summed point-to-center distance; sizes are unchanged by it.
    """
    n, k = len(points), len(centers)
    dist = cdist(points, centers, "sqeuclidean")
    margin = dist - dist.max(axis=1, keepdims=True)
    point_idx, cluster_idx = np.divmod(np.arange(n * k), k)
    order = np.lexsort((cluster_idx, point_idx, margin.ravel()))

    labels = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    slack = n - k * min_size
    assigned = 0
    for flat in order:
        i, c = point_idx[flat], cluster_idx[flat]
        if labels[i] >= 0 or sizes[c] >= max_size:
            continue
        if sizes[c] >= min_size:
            if slack == 0:
                continue
            slack -= 1
        labels[i] = c
        sizes[c] += 1
        assigned += 1
        if assigned == n:
            break
    return _exchange(dist, labels, k)


def _exchange(dist, labels, k, max_passes=50):
    for _ in range(max_passes):
        swapped = False
        for a in range(k):
            for b in range(a + 1, k):
                while True:
                    ia, ib = np.flatnonzero(labels == a), np.flatnonzero(labels == b)
                    if not len(ia) or not len(ib):
                        break
                    gain = (dist[ia, a][:, None] + dist[ib, b][None, :]) - (dist[ia, b][:, None] + dist[ib, a][None, :])
                    best = int(np.argmax(gain))
                    if gain.flat[best] <= 1e-12:
                        break
                    i, j = ia[best // len(ib)], ib[best % len(ib)]
                    labels[i], labels[j] = b, a
                    swapped = True
        if not swapped:
            break
    return labels


def _sse(points, labels, k):
    total = 0.0
    for c in range(k):
        members = points[labels == c]
        if len(members):
            total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def constrained_kmeans(points, k, min_size, max_size, seed=0, max_iters=100, n_init=3):
    """
    k-means whose cluster sizes stay within [min_size, max_size].

    Args:
        points: (n, d) array.
        k (int): number of clusters, at most n.
        min_size, max_size (int): size bounds with min_size * k <= n <= max_size * k.
        seed (int): seed for k-means++ initialisation of every restart.
        max_iters (int): Lloyd iterations per restart.
        n_init (int): restarts; the lowest within-cluster SSE wins.

    Returns:
        np.ndarray: cluster label per point.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"constrained_kmeans: need 1 <= k <= n, got k={k}, n={n}")
    if min_size < 0 or min_size > max_size or min_size * k > n or max_size * k < n:
        raise ValueError(f"constrained_kmeans: sizes [{min_size}, {max_size}] infeasible for n={n}, k={k}")

    rng = np.random.default_rng(seed)
    best_labels, best_sse = None, np.inf
    for _ in range(max(1, n_init)):
        centers, _ = kmeans_plusplus(points, n_clusters=k, random_state=int(rng.integers(2**31 - 1)))
        labels = None
        for _ in range(max_iters):
            new_labels = _capacity_assign(points, centers, min_size, max_size)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(k):
                members = points[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        sse = _sse(points, labels, k)
        if sse < best_sse - 1e-12:
            best_labels, best_sse = labels, sse
    return best_labels


def _plain_kmeans(points, k, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return KMeans(n_clusters=k, n_init=1, random_state=seed).fit_predict(points)


class IdentifierTree:
    """
    Immutable identifier tree.

    Attributes:
        k (int): branch factor.
        depth (int): identifier length l (uniform).
        n_items (int): N.
        n_tokens (int): M.
        parent (np.ndarray): (M,) parent token; the root maps to itself.
        item_paths (np.ndarray): (N, depth) identifiers.
        mode (str): balanced or unbalanced.
    """

    def __init__(self, k, depth, n_items, n_tokens, parent, item_paths, mode="balanced"):
        self.k = int(k)
        self.depth = int(depth)
        self.n_items = int(n_items)
        self.n_tokens = int(n_tokens)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.item_paths = np.asarray(item_paths, dtype=np.int64).reshape(self.n_items, self.depth)
        self.mode = mode
        self.parent.setflags(write=False)
        self.item_paths.setflags(write=False)
        self.validate()

    @property
    def start_token(self):
        return self.n_items

    @property
    def extra_token_rows(self):
        """Embedding rows beyond the item table: start token plus internal nodes."""
        return self.n_tokens - self.n_items

    def is_leaf(self, token):
        return 0 <= token < self.n_items

    @cached_property
    def children(self):
        """token -> ascending tuple of real children (leaves have none)."""
        kids = [[] for _ in range(self.n_tokens)]
        for token in range(self.n_tokens):
            if token != self.start_token:
                kids[int(self.parent[token])].append(token)
        return [tuple(sorted(c)) for c in kids]

    @cached_property
    def subtree_sizes(self):
        """token -> number of items below it."""
        sizes = np.zeros(self.n_tokens, dtype=np.int64)
        for item in range(self.n_items):
            sizes[item] += 1
            node = item
            while node != self.start_token:
                node = int(self.parent[node])
                sizes[node] += 1
        return sizes

    def _is_edge(self, node, token):
        """Whether `token` may follow `node` on an identifier."""
        if not 0 <= token < self.n_tokens or token == self.start_token:
            return False
        if self.is_leaf(node):
            # pass-through padding
            return token == node
        return int(self.parent[token]) == node

    def _walk(self, prefix):
        node = self.start_token
        if len(prefix) > self.depth:
            raise ValueError(f"prefix of length {len(prefix)} exceeds depth {self.depth}")
        for position, token in enumerate(prefix):
            token = int(token)
            if not self._is_edge(node, token):
                raise ValueError(f"invalid prefix {list(prefix)}: token {token} at position {position} is not a child of {node}")
            node = token
        return node

    def children_of_prefix(self, prefix):
        """
        Legal next tokens after `prefix`, ascending.

        An empty prefix means "at the start token"; a complete identifier has
        no continuation; a padded position continues only with its leaf.
        """
        node = self._walk(prefix)
        if len(prefix) == self.depth:
            return []
        if self.is_leaf(node):
            return [node]
        return list(self.children[node])

    def item_to_identifier(self, item_id):
        if not 0 <= item_id < self.n_items:
            raise ValueError(f"item {item_id} out of range [0, {self.n_items})")
        return [int(t) for t in self.item_paths[item_id]]

    def identifier_to_item(self, identifier):
        if len(identifier) != self.depth:
            raise ValueError(f"identifier length {len(identifier)} != depth {self.depth}")
        leaf = self._walk(identifier)
        if not self.is_leaf(leaf):
            raise ValueError(f"identifier {list(identifier)} does not end at a leaf")
        return leaf

    @cached_property
    def step_candidates(self):
        """
        Per-item candidate tables for forced-decoding scoring.

        Returns:
            tuple: cand_ids (N, l, K), cand_mask (N, l, K) and target_pos (N, l),
            where K is the largest child count and target_pos indexes the true
            token among the candidates.
        """
        width = max(1, max(len(c) for c in self.children))
        cand_ids = np.zeros((self.n_items, self.depth, width), dtype=np.int64)
        cand_mask = np.zeros((self.n_items, self.depth, width), dtype=bool)
        target_pos = np.zeros((self.n_items, self.depth), dtype=np.int64)
        for item in range(self.n_items):
            node = self.start_token
            for position, token in enumerate(self.item_paths[item]):
                options = [node] if self.is_leaf(node) else self.children[node]
                cand_ids[item, position, :len(options)] = options
                cand_mask[item, position, :len(options)] = True
                target_pos[item, position] = options.index(int(token))
                node = int(token)
        return cand_ids, cand_mask, target_pos

    def validate(self):
        """Re-check every structural invariant; raises TreeFormatError."""
        n, m = self.n_items, self.n_tokens
        if self.k < 2:
            raise TreeFormatError(f"k must be >= 2, got {self.k}")
        if n < 1 or m < n + 1 or self.depth < 1:
            raise TreeFormatError(f"bad sizes N={n}, M={m}, depth={self.depth}")
        if self.parent.shape != (m,):
            raise TreeFormatError(f"parent array has {self.parent.size} entries, expected {m}")
        if self.parent[self.start_token] != self.start_token:
            raise TreeFormatError("the start token must be its own parent")
        if np.any(self.parent < n) or np.any(self.parent >= m):
            raise TreeFormatError("every parent must be the start token or an internal token")

        used = np.zeros(m, dtype=bool)
        used[self.start_token] = True
        for item in range(n):
            path = self.item_paths[item]
            if path[-1] != item:
                raise TreeFormatError(f"identifier of item {item} does not end in its leaf token")
            node = self.start_token
            for position, token in enumerate(path):
                if not self._is_edge(node, int(token)):
                    raise TreeFormatError(f"identifier of item {item} breaks at position {position}")
                used[token] = True
                node = int(token)
        if not used.all():
            raise TreeFormatError(f"{int((~used).sum())} tokens are not on any identifier")
        for token, kids in enumerate(self.children):
            if token >= n and not 1 <= len(kids) <= self.k:
                raise TreeFormatError(f"token {token} has {len(kids)} children, expected 1..{self.k}")
        if len(self.children[self.start_token]) != min(self.k, n) and self.mode == "balanced":
            raise TreeFormatError("the root of a balanced tree must have min(k, N) children")

    def stats(self):
        return {
            "n_items": self.n_items,
            "n_tokens": self.n_tokens,
            "k": self.k,
            "depth": self.depth,
            "extra_token_rows": self.extra_token_rows,
            "mode": self.mode,
        }


def _split(points, k, seed, mode, max_iters, n_init):
    m = len(points)
    if mode == "unbalanced":
        labels = _plain_kmeans(points, k, seed)
        groups = [np.flatnonzero(labels == c) for c in range(k)]
        groups = [g for g in groups if len(g)]
        if len(groups) >= 2:
            return groups
        logger.debug("k-means collapsed %d points into one cluster, splitting balanced", m)
    labels = constrained_kmeans(points, k, m // k, m // k + 1, seed, max_iters, n_init)
    return [np.flatnonzero(labels == c) for c in range(k)]


def cluster_paths(values, k, seed=0, mode="balanced", max_iters=100, n_init=3):
    """
    Recursive clustering: per-item lists of child positions, root first.

    A group with more than k items is split into k clusters; a group of at
    most k items becomes leaves.
    """
    n = len(values)
    paths = [[] for _ in range(n)]
    rng = np.random.default_rng(seed)
    stack = [np.arange(n)]
    while stack:
        members = stack.pop()
        if len(members) <= k:
            for position, item in enumerate(members):
                paths[item].append(position)
            continue
        groups = _split(values[members], k, int(rng.integers(2**31 - 1)), mode, max_iters, n_init)
        for c, group in enumerate(groups):
            sub = members[group]
            for item in sub:
                paths[item].append(c)
        stack.extend(members[g] for g in reversed(groups))
    return paths


def build_identifier_tree(embeddings, k, seed=0, mode="balanced", max_iters=100, n_init=3):
    """
    Cluster item embeddings into an identifier tree and number its tokens.

    Args:
        embeddings (ItemEmbeddingMatrix | np.ndarray): (N, d) item vectors.
        k (int): branch factor, at least 2.
        seed (int): clustering seed.
        mode (str): 'balanced' (constrained k-means) or 'unbalanced' (plain k-means).

    Returns:
        IdentifierTree
    """
    values = np.asarray(getattr(embeddings, "values", embeddings), dtype=np.float64)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if values.ndim != 2 or len(values) == 0:
        raise ValueError("build_identifier_tree needs a non-empty (N, d) embedding matrix")
    if mode not in ("balanced", "unbalanced"):
        raise ValueError(f"unknown tree mode {mode!r}")

    n = len(values)
    paths = cluster_paths(values, k, seed, mode, max_iters, n_init)
    depth = max(len(p) for p in paths)

    start = n
    visited = {}
    next_id = n + 1
    parents = {}
    item_paths = np.empty((n, depth), dtype=np.int64)
    for item, labels in enumerate(paths):
        tokens = []
        for level in range(1, len(labels)):
            key = tuple(labels[:level])
            if key not in visited:
                visited[key] = next_id
                next_id += 1
            tokens.append(visited[key])
        tokens.append(item)
        for i, token in enumerate(tokens):
            parents[token] = tokens[i - 1] if i else start
        item_paths[item] = tokens + [item] * (depth - len(tokens))

    parent = np.empty(next_id, dtype=np.int64)
    parent[start] = start
    for token, p in parents.items():
        parent[token] = p
    tree = IdentifierTree(k, depth, n, next_id, parent, item_paths, mode)
    logger.info("Built %s tree: N=%d k=%d depth=%d M=%d", mode, n, k, depth, next_id)
    return tree


def serialize(tree, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    doc = {
        "format": TREE_FORMAT,
        "k": tree.k,
        "depth": tree.depth,
        "n_items": tree.n_items,
        "n_tokens": tree.n_tokens,
        "mode": tree.mode,
        "parent": [int(p) for p in tree.parent],
        "item_paths": [[int(t) for t in row] for row in tree.item_paths],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def deserialize(path):
    """Load a tree file and re-validate every invariant."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise TreeFormatError(f"{path}: not a tree file ({e})") from None
    if not isinstance(doc, dict) or doc.get("format") != TREE_FORMAT:
        raise TreeFormatError(f"{path}: expected format {TREE_FORMAT!r}, got {doc.get('format') if isinstance(doc, dict) else None!r}")
    try:
        paths = np.asarray(doc["item_paths"], dtype=np.int64)
        if paths.shape != (doc["n_items"], doc["depth"]):
            raise TreeFormatError(f"{path}: item_paths shape {paths.shape} != ({doc['n_items']}, {doc['depth']})")
        return IdentifierTree(
            doc["k"], doc["depth"], doc["n_items"], doc["n_tokens"], doc["parent"], paths, doc.get("mode", "balanced")
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, TreeFormatError):
            raise
        raise TreeFormatError(f"{path}: invalid tree document ({e})") from None
