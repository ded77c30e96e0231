"""
Interaction Corpus Loader

Loads `user<TAB>item<TAB>timestamp` interaction logs into a DuckDB table and
derives per-user histories, the 8:1:1 user split and the 80/20
context/target partition used for evaluation.

Also synthesizes a desk-scale Markov corpus: every item has one preferred
successor taken with probability 0.8, so a trained model can be checked
against chance.
"""

import logging
import os
import re
from dataclasses import dataclass, field

import duckdb
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SUCCESSOR_PROB = 0.8
_DIGITS = re.compile(r"[0-9]+")


class CorpusFormatError(ValueError):
    """A malformed interactions file; `line_no` is 1-based."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    items: tuple

    @property
    def length(self):
        return len(self.items)


@dataclass
class DatasetSplit:
    """
    Disjoint train/valid/test users plus the context/target cut of eval users.

    Attributes:
        train_users, valid_users, test_users (tuple): user ids.
        histories (dict): user id -> UserHistory for every retained user.
        context (dict): eval user id -> first ceil(0.8 t) items.
        targets (dict): eval user id -> remaining items.
        excluded (int): eval users dropped because their target set was empty.
    """

    train_users: tuple
    valid_users: tuple
    test_users: tuple
    histories: dict
    context: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    excluded: int = 0

    def eval_users(self, split):
        if split == "valid":
            return self.valid_users
        if split == "test":
            return self.test_users
        raise ValueError(f"unknown eval split {split!r}")

    def train_histories(self):
        return [self.histories[u] for u in self.train_users]


def load_interactions(path, n_items_hint=None):
    """
    Parse an interactions file.

    Args:
        path (str): UTF-8 text, one `user<TAB>item<TAB>timestamp` event per
            line; lines starting with '#' and blank lines are skipped.
        n_items_hint (int | None): declared catalog size; item ids must be below it.

    Returns:
        tuple: (list of Interaction in file order, catalog size N).
    """
    interactions = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.rstrip("\r\n")
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            fields = text.split("\t")
            if len(fields) != 3:
                raise CorpusFormatError(f"line {line_no}: expected 3 tab-separated fields, got {len(fields)}", line_no)
            fields = [f.strip() for f in fields]
            if not all(_DIGITS.fullmatch(f) for f in fields):
                raise CorpusFormatError(f"line {line_no}: fields must be non-negative base-10 integers: {text!r}", line_no)
            user_id, item_id, timestamp = (int(f) for f in fields)
            if n_items_hint is not None and item_id >= n_items_hint:
                raise CorpusFormatError(f"line {line_no}: item {item_id} >= declared catalog size {n_items_hint}", line_no)
            interactions.append(Interaction(user_id, item_id, timestamp))

    if n_items_hint is not None:
        n_items = n_items_hint
    else:
        n_items = max((i.item_id for i in interactions), default=-1) + 1
    logger.info("Loaded %d interactions (N=%d) from %s", len(interactions), n_items, path)
    return interactions, n_items


def write_interactions(interactions, path):
    """Write interactions in the loader's TSV format."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for i in interactions:
            fh.write(f"{i.user_id}\t{i.item_id}\t{i.timestamp}\n")


class InteractionDb:
    """
    DuckDB table of interactions with the file order kept as `seq`.

    Attributes:
        con: the DuckDB connection (in-memory unless db_path is given).
    """

    def __init__(self, interactions, db_path=":memory:"):
        self.db_path = db_path
        self.con = duckdb.connect(database=db_path, read_only=False)
        frame = pd.DataFrame(
            {
                "user_id": np.array([i.user_id for i in interactions], dtype=np.int64),
                "item_id": np.array([i.item_id for i in interactions], dtype=np.int64),
                "ts": np.array([i.timestamp for i in interactions], dtype=np.int64),
                "seq": np.arange(len(interactions), dtype=np.int64),
            }
        )
        self.con.register("raw_events", frame)
        self.con.execute("CREATE OR REPLACE TABLE interactions AS SELECT * FROM raw_events")
        self.con.unregister("raw_events")

    def close(self):
        self.con.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def n_users(self):
        return self.con.execute("SELECT count(DISTINCT user_id) FROM interactions").fetchone()[0]

    def histories(self, min_history_len):
        rows = self.con.execute(
            """
            SELECT user_id, list(item_id ORDER BY ts, seq) AS items
            FROM interactions
            GROUP BY user_id
            HAVING count(*) >= ?
            ORDER BY user_id
            """,
            [min_history_len],
        ).fetchall()
        return [UserHistory(int(user_id), tuple(int(x) for x in items)) for user_id, items in rows]


def build_histories(interactions, min_history_len=5):
    """
    Group interactions per user in (timestamp, file order).

    Returns:
        tuple: (list of UserHistory sorted by user id, number of dropped users).
    """
    with InteractionDb(interactions) as db:
        histories = db.histories(min_history_len)
        dropped = db.n_users() - len(histories)
    if dropped:
        logger.info("Dropped %d users with fewer than %d interactions", dropped, min_history_len)
    return histories, dropped


def context_size(t):
    """ceil(0.8 * t) in integer arithmetic."""
    return (4 * t + 4) // 5


def split_users(histories, seed):
    """
    Shuffle users by seed and partition them 8:1:1.

    Eval (valid/test) users get the context/target cut; an eval user whose
    target set would be empty is removed from its split and counted in
    `excluded`.
    """
    n = len(histories)
    if n < 10:
        raise ValueError(f"split_users needs at least 10 users, got {n}")
    by_user = {h.user_id: h for h in histories}
    order = sorted(by_user)
    rng = np.random.default_rng(seed)
    shuffled = [order[i] for i in rng.permutation(n)]

    n_train = int(round(0.8 * n))
    n_valid = int(round(0.1 * n))
    train = tuple(shuffled[:n_train])
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:]

    context, targets = {}, {}
    excluded = 0
    kept = {"valid": [], "test": []}
    for name, users in (("valid", valid), ("test", test)):
        for u in users:
            items = by_user[u].items
            cut = context_size(len(items))
            if cut >= len(items):
                excluded += 1
                continue
            context[u] = list(items[:cut])
            targets[u] = list(items[cut:])
            kept[name].append(u)

    return DatasetSplit(
        train_users=train,
        valid_users=tuple(kept["valid"]),
        test_users=tuple(kept["test"]),
        histories=by_user,
        context=context,
        targets=targets,
        excluded=excluded,
    )


def successor_map(n_items, rule_seed):
    """A seeded single cycle through all items: item -> preferred successor."""
    order = np.random.default_rng(rule_seed).permutation(n_items)
    succ = np.empty(n_items, dtype=np.int64)
    succ[order] = np.roll(order, -1)
    return succ


def synthesize_corpus(n_users, n_items, rule_seed, min_len=6, max_len=12, seed=None):
    """
    Generate Markov interaction sequences.

    Each step follows the item's preferred successor with probability 0.8 and
    otherwise jumps uniformly to one of the other n_items - 1 items.

    Args:
        n_users (int): number of users (0 gives an empty corpus).
        n_items (int): catalog size, at least 2.
        rule_seed (int): seed of the successor map.
        min_len, max_len (int): sequence length range, inclusive.
        seed (int | None): sampling seed, defaults to rule_seed.

    Returns:
        list[Interaction]: user-major, timestamps are step indices.
    """
    if n_items < 2:
        raise ValueError("synthesize_corpus needs at least 2 items")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"bad length range [{min_len}, {max_len}]")
    succ = successor_map(n_items, rule_seed)
    rng = np.random.default_rng(rule_seed if seed is None else seed)
    interactions = []
    for user in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(n_items))
        for step in range(length):
            interactions.append(Interaction(user, item, step))
            if rng.random() < SUCCESSOR_PROB:
                item = int(succ[item])
            else:
                other = int(rng.integers(n_items - 1))
                item = other if other < succ[item] else other + 1
    return interactions


def load_corpus(corpus_config):
    """Interactions and catalog size from a file or, failing that, the synthetic generator."""
    c = corpus_config
    if c.interactions_path:
        return load_interactions(c.interactions_path, c.n_items or None)
    if c.synthetic_users > 0 and c.synthetic_items >= 2:
        interactions = synthesize_corpus(
            c.synthetic_users, c.synthetic_items, c.synthetic_seed, c.synthetic_min_len, c.synthetic_max_len
        )
        return interactions, c.synthetic_items
    raise FileNotFoundError("no corpus configured: set corpus.interactions_path or corpus.synthetic_users/items")


if __name__ == "__main__":
    # Example usage: summarize a small synthetic corpus
    events = synthesize_corpus(n_users=100, n_items=50, rule_seed=0)
    histories, dropped = build_histories(events)
    split = split_users(histories, seed=0)
    print(f"{len(events)} events, {len(histories)} users ({dropped} dropped)")
    print(f"train={len(split.train_users)} valid={len(split.valid_users)} test={len(split.test_users)}")
