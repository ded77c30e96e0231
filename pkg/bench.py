"""
Complexity Benchmark

Builds identifier trees over synthetic embeddings for a grid of catalog sizes
and branch factors, runs seeded beam searches with a fixed random model, and
reports per configuration:

    max_identifier_length, mean_expansions, max_expansions, expansion_bound,
    extra_token_rows, build_seconds, wall_micros

The embeddings are skewed (cluster sizes follow a power law) so that the
plain k-means tree comes out deeper than the balanced one.
"""

import logging
import math
import time

import numpy as np
import pandas as pd

from retriever import constrained_beam_search
from src.config import ModelConfig
from src.idtree import build_identifier_tree
from src.model import RetrievalModel

logger = logging.getLogger(__name__)

# --- CONFIG ---
SKEW_EXPONENT = 1.5
SKEW_CLUSTERS = 32


def skewed_embeddings(n_items, dim, seed=0):
    """Gaussian blobs whose sizes decay as rank ** -1.5."""
    rng = np.random.default_rng(seed)
    n_clusters = min(SKEW_CLUSTERS, n_items)
    weights = np.arange(1, n_clusters + 1, dtype=np.float64) ** -SKEW_EXPONENT
    labels = rng.choice(n_clusters, size=n_items, p=weights / weights.sum())
    centers = rng.normal(0.0, 4.0, size=(n_clusters, dim))
    return centers[labels] + rng.normal(0.0, 0.5, size=(n_items, dim))


def balanced_depth(n_items, k):
    """ceil(log_k N) in integers (1 for N <= k)."""
    depth, capacity = 1, k
    while capacity < n_items:
        capacity *= k
        depth += 1
    return depth


def bench_one(values, k, mode, bench, seed):
    started = time.perf_counter()
    tree = build_identifier_tree(values, k, seed=seed, mode=mode)
    build_seconds = time.perf_counter() - started

    config = ModelConfig(d=bench.d, dropout=0.0, max_history_len=bench.history_len).with_tree(tree)
    model = RetrievalModel(config, seed=seed).eval()
    rng = np.random.default_rng(seed)
    top_n = min(bench.beam_size, tree.n_items)

    expansions, micros = [], []
    for _ in range(bench.queries):
        history = rng.integers(tree.n_items, size=bench.history_len).tolist()
        started = time.perf_counter()
        result = constrained_beam_search(model, tree, history, bench.beam_size, top_n)
        micros.append((time.perf_counter() - started) * 1e6)
        expansions.append(result.expansions)

    return {
        "n_items": tree.n_items,
        "k": k,
        "mode": mode,
        "max_identifier_length": tree.depth,
        "mean_expansions": float(np.mean(expansions)),
        "max_expansions": int(np.max(expansions)),
        "expansion_bound": bench.beam_size * k * tree.depth,
        "extra_token_rows": tree.extra_token_rows,
        "build_seconds": round(build_seconds, 4),
        "wall_micros": round(float(np.mean(micros)), 1),
    }


def run_benchmark(bench, seed=0):
    """
    Run the (N, k, mode) grid of a BenchConfig.

    Returns:
        pd.DataFrame: one row per configuration.
    """
    rows = []
    for n in bench.n_items:
        values = skewed_embeddings(n, bench.dim, seed)
        grid = [(k, "balanced") for k in bench.k_list] + [(k, "unbalanced") for k in bench.unbalanced_k]
        for k, mode in grid:
            row = bench_one(values, k, mode, bench, seed)
            print(
                f"N={n} k={k} {mode}: length {row['max_identifier_length']}, "
                f"expansions {row['mean_expansions']:.1f} (bound {row['expansion_bound']}), "
                f"{row['wall_micros']:.0f}us/query"
            )
            rows.append(row)
    return pd.DataFrame(rows)


def check_bounds(table):
    """
    Assert the structural claims of a benchmark table.

    - every query scored at most b * k * length candidates,
    - balanced trees have length ceil(log_k N) and extra rows (N - 1)/(k - 1)
      whenever N is a power of k,
    - balanced length is non-increasing in k at fixed N,
    - an unbalanced tree is never shorter than the balanced one with the same k.

    Raises:
        AssertionError: naming the first violated bound.
    """
    for row in table.itertuples():
        if row.max_expansions > row.expansion_bound:
            raise AssertionError(f"N={row.n_items} k={row.k} {row.mode}: {row.max_expansions} expansions > {row.expansion_bound}")

    balanced = table[table["mode"] == "balanced"]
    for row in balanced.itertuples():
        expected = balanced_depth(row.n_items, row.k)
        if row.max_identifier_length != expected:
            raise AssertionError(f"N={row.n_items} k={row.k}: depth {row.max_identifier_length}, expected {expected}")
        power = round(math.log(row.n_items, row.k)) if row.n_items > 1 else 0
        if row.k ** power == row.n_items and row.extra_token_rows != (row.n_items - 1) // (row.k - 1):
            raise AssertionError(f"N={row.n_items} k={row.k}: {row.extra_token_rows} extra rows")

    for n, group in balanced.groupby("n_items"):
        depths = group.sort_values("k")["max_identifier_length"].tolist()
        if any(b > a for a, b in zip(depths, depths[1:])):
            raise AssertionError(f"N={n}: balanced depth increases with k: {depths}")

    for row in table[table["mode"] == "unbalanced"].itertuples():
        reference = balanced[(balanced["n_items"] == row.n_items) & (balanced["k"] == row.k)]
        depth = int(reference["max_identifier_length"].iloc[0]) if len(reference) else balanced_depth(row.n_items, row.k)
        if row.max_identifier_length < depth:
            raise AssertionError(f"N={row.n_items} k={row.k}: unbalanced length {row.max_identifier_length} < balanced {depth}")


if __name__ == "__main__":
    # Example usage: a quick grid at desk scale
    from src.config import BenchConfig

    table = run_benchmark(BenchConfig(n_items=[512], k_list=[2, 8], unbalanced_k=[8], queries=3))
    check_bounds(table)
    print(table.to_string(index=False))
