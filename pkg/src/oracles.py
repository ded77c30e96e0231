"""
Brute-force references for tests and the benchmark.

Each oracle recomputes its answer with plain loops from raw inputs (tree
parent array, decoder states, raw lists) and shares no helpers with the code
it checks.
"""

import itertools
import logging
import math

import numpy as np

from src.autodiff import numerical_grad  # noqa: F401 - re-exported for gradient checks

logger = logging.getLogger(__name__)

MAX_EXHAUSTIVE_ITEMS = 4096
MAX_PARTITION_POINTS = 12


def _children_from_parent(parent, start):
    children = {}
    for token, p in enumerate(parent):
        if token != start:
            children.setdefault(int(p), []).append(token)
    return {node: sorted(kids) for node, kids in children.items()}


def _path_from_parent(parent, start, item, depth):
    path = [item]
    node = item
    while int(parent[node]) != start:
        node = int(parent[node])
        path.append(node)
    path.reverse()
    return path + [item] * (depth - len(path))


def exhaustive_rank(model, tree, history, chunk=256):
    """
    Score every item by its full identifier probability and sort.

    Returns:
        tuple: (item ids, log-probabilities), best first, ties by lower item
        id then lexicographic identifier.
    """
    n, depth, start = tree.n_items, tree.depth, tree.start_token
    if n > MAX_EXHAUSTIVE_ITEMS:
        raise ValueError(f"exhaustive_rank is limited to {MAX_EXHAUSTIVE_ITEMS} items, got {n}")
    children = _children_from_parent(tree.parent, start)
    paths = [_path_from_parent(tree.parent, start, item, depth) for item in range(n)]
    table = model.token_embeddings.data
    enc = model.encode(history)

    scores = []
    for lo in range(0, n, chunk):
        block = paths[lo:lo + chunk]
        dec = model.decode(enc.take(np.zeros(len(block), dtype=np.int64)), np.array([p[:-1] for p in block]))
        for row, path in enumerate(block):
            total = 0.0
            node = start
            for step in range(depth):
                options = [node] if node < n else children[node]
                logits = [float(np.dot(dec.states.data[row, step], table[c])) for c in options]
                top = max(logits)
                norm = top + math.log(sum(math.exp(v - top) for v in logits))
                total += logits[options.index(path[step])] - norm
                node = path[step]
            scores.append(total)

    order = sorted(range(n), key=lambda i: (-scores[i], i, paths[i]))
    return np.array(order, dtype=np.int64), np.array([scores[i] for i in order])


def sse(points, labels):
    """Within-cluster sum of squared distances to each cluster mean."""
    total = 0.0
    for label in set(labels):
        members = [points[i] for i in range(len(points)) if labels[i] == label]
        dim = len(members[0])
        center = [sum(m[j] for m in members) / len(members) for j in range(dim)]
        total += sum(sum((m[j] - center[j]) ** 2 for j in range(dim)) for m in members)
    return total


def brute_balanced_partition(points, k=2):
    """
    Optimal 2-way split with sizes differing by at most one, by enumeration.

    Returns:
        tuple: (labels list, SSE).
    """
    points = [list(map(float, p)) for p in points]
    n = len(points)
    if k != 2:
        raise ValueError("brute_balanced_partition only enumerates k=2")
    if not 2 <= n <= MAX_PARTITION_POINTS:
        raise ValueError(f"brute_balanced_partition needs 2..{MAX_PARTITION_POINTS} points, got {n}")
    best_labels, best = None, math.inf
    for size in sorted({n // 2, n - n // 2}):
        for group in itertools.combinations(range(n), size):
            labels = [0 if i in group else 1 for i in range(n)]
            cost = sse(points, labels)
            if cost < best - 1e-12:
                best_labels, best = labels, cost
    return best_labels, best


def naive_metrics(retrieved, positives, k):
    """(HR@K, Recall@K, NDCG@K) by explicit loops."""
    positives = set(positives)
    hits = 0
    dcg = 0.0
    for rank in range(1, k + 1):
        if retrieved[rank - 1] in positives:
            hits += 1
            dcg += 1.0 / math.log2(rank + 1)
    idcg = 0.0
    for rank in range(1, min(k, len(positives)) + 1):
        idcg += 1.0 / math.log2(rank + 1)
    return (1.0 if hits else 0.0), hits / len(positives), dcg / idcg
