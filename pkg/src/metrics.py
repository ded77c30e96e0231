"""
Top-K evaluation with binary relevance.

    HR@K      1 if any positive is in the top K
    Recall@K  |top K ∩ positives| / |positives|
    NDCG@K    DCG@K / IDCG@K, IDCG over min(K, |positives|) ideal ranks

IDCG counts every positive, including those never retrieved.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

METRICS = ("hr", "recall", "ndcg")


@dataclass(frozen=True)
class EvalRecord:
    user_id: int
    retrieved: tuple
    positives: frozenset

    @classmethod
    def build(cls, user_id, retrieved, targets):
        retrieved = tuple(int(i) for i in retrieved)
        if len(set(retrieved)) != len(retrieved):
            raise ValueError(f"user {user_id}: retrieved items are not distinct")
        positives = frozenset(int(i) for i in targets)
        if not positives:
            raise ValueError(f"user {user_id}: empty positive set")
        return cls(int(user_id), retrieved, positives)


def _top_hits(record, k):
    if not record.positives:
        raise ValueError(f"user {record.user_id}: empty positive set")
    if k < 1 or k > len(record.retrieved):
        raise ValueError(f"K={k} but user {record.user_id} has {len(record.retrieved)} retrieved items")
    return np.array([item in record.positives for item in record.retrieved[:k]], dtype=bool)


def recall_at_k(record, k):
    return float(_top_hits(record, k).sum()) / len(record.positives)


def hr_at_k(record, k):
    return float(_top_hits(record, k).any())


def ndcg_at_k(record, k):
    hits = _top_hits(record, k)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(discounts[hits].sum())
    idcg = float(discounts[:min(k, len(record.positives))].sum())
    return dcg / idcg


_METRIC_FNS = {"hr": hr_at_k, "recall": recall_at_k, "ndcg": ndcg_at_k}


def evaluate_records(records, k_list=(20, 50)):
    """
    Per-metric per-K means over records.

    Returns:
        pd.DataFrame: columns metric, K, value; metric-major, K in k_list order.
    """
    if not records:
        raise ValueError("no evaluation records")
    rows = []
    for metric in METRICS:
        fn = _METRIC_FNS[metric]
        for k in k_list:
            rows.append({"metric": metric, "K": int(k), "value": float(np.mean([fn(r, k) for r in records]))})
    return pd.DataFrame(rows, columns=["metric", "K", "value"])


def evaluate_split(results, targets, k_list=(20, 50)):
    """
    Score retrieval results of one split.

    Args:
        results (dict): user id -> ranked item ids (a RetrievalResult works).
        targets (dict): user id -> held-out items of that user.
        k_list: cutoffs, reported in this order.

    Returns:
        pd.DataFrame: see evaluate_records.
    """
    missing = [u for u in targets if u not in results]
    if missing:
        raise ValueError(f"{len(missing)} eval users have no retrieval result (first: {missing[0]})")
    records = [EvalRecord.build(u, getattr(results[u], "items", results[u]), targets[u]) for u in sorted(targets)]
    table = evaluate_records(records, k_list)
    logger.info("Evaluated %d users: %s", len(records), _summary(table))
    return table


def _summary(table):
    return ", ".join(f"{r.metric}@{r.K}={r.value:.4f}" for r in table.itertuples())


def write_report(table, out_dir, stem="metrics"):
    """Write `<stem>.csv` and its JSON mirror; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    table.to_csv(csv_path, index=False, float_format="%.6f")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(table.to_dict(orient="records"), fh, indent=2)
        fh.write("\n")
    return csv_path, json_path
