"""
Generative Retriever

Ranks items for a user by generating identifiers token by token with the
encoder-decoder model. Decoding is constrained to the identifier tree, so
every finished hypothesis is a real item.

GenerativeRetriever is the inference entry point used by the CLI, the
trainer's validation pass and the benchmark.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from orchestra import run_parallel
from src.checkpoint import load_checkpoint
from src.idtree import deserialize

logger = logging.getLogger(__name__)


@dataclass
class BeamHypothesis:
    """A partial identifier; log_prob sums the constrained step log-probabilities."""

    log_prob: float
    prefix: tuple = field(default=())

    @property
    def sort_key(self):
        return (-self.log_prob, self.prefix[-1] if self.prefix else -1, self.prefix)


@dataclass
class RetrievalResult:
    """
    Attributes:
        items (tuple): ranked item ids, best first.
        scores (tuple): identifier log-probabilities, non-increasing.
        expansions (int): candidates scored (pass-through steps excluded).
    """

    items: tuple
    scores: tuple
    expansions: int = 0
    user_id: int = -1

    def as_record(self):
        return {"user_id": self.user_id, "items": list(self.items), "scores": [round(s, 10) for s in self.scores]}


def constrained_beam_search(model, tree, history, beam_size=50, top_n=50):
    """
    Prefix-constrained beam search over the identifier tree.

    Every step expands each live hypothesis over its legal children, scores
    them with the constrained softmax and keeps the global top beam_size by
    cumulative log-probability (ties: smaller last token, then lexicographic
    prefix). The encoder runs once per query.

    Args:
        model (RetrievalModel): in eval mode.
        tree (IdentifierTree): the model's tree.
        history (list[int]): the user's item history.
        beam_size (int): b.
        top_n (int): n <= b.

    Returns:
        RetrievalResult: top_n items with scores and the expansion count.
    """
    if not 1 <= top_n <= beam_size:
        raise ValueError(f"need beam_size >= top_n >= 1, got beam_size={beam_size}, top_n={top_n}")
    if top_n > tree.n_items:
        raise ValueError(f"top_n={top_n} exceeds the catalog size {tree.n_items}")
    if len(history) == 0:
        raise ValueError("cannot retrieve for an empty history")

    enc = model.encode(history)
    beams = [BeamHypothesis(0.0)]
    expansions = 0
    for step in range(tree.depth):
        options = []
        for hyp in beams:
            node = hyp.prefix[-1] if hyp.prefix else tree.start_token
            options.append((node,) if tree.is_leaf(node) else tree.children[node])
        width = max(len(o) for o in options)
        cand_ids = np.zeros((len(beams), 1, width), dtype=np.int64)
        cand_mask = np.zeros((len(beams), 1, width), dtype=bool)
        for row, opts in enumerate(options):
            cand_ids[row, 0, :len(opts)] = opts
            cand_mask[row, 0, :len(opts)] = True
            if len(opts) > 1:
                expansions += len(opts)

        prefixes = np.array([hyp.prefix for hyp in beams], dtype=np.int64).reshape(len(beams), step)
        dec = model.decode(enc.take(np.zeros(len(beams), dtype=np.int64)), prefixes)
        last = dec.states[:, step:step + 1]
        log_probs = model.step_log_probs(last, cand_ids, cand_mask).data[:, 0]

        grown = []
        for row, (hyp, opts) in enumerate(zip(beams, options)):
            for col, token in enumerate(opts):
                gain = 0.0 if len(opts) == 1 else float(log_probs[row, col])
                grown.append(BeamHypothesis(hyp.log_prob + gain, hyp.prefix + (int(token),)))
        grown.sort(key=lambda h: h.sort_key)
        beams = grown[:beam_size]

    top = beams[:top_n]
    return RetrievalResult(
        items=tuple(h.prefix[-1] for h in top),
        scores=tuple(h.log_prob for h in top),
        expansions=expansions,
    )


class GenerativeRetriever:
    """
    Top-n retrieval for many users over one read-only model.
    """

    def __init__(self, model, tree, beam_size=50, top_n=50, workers=1):
        """
        Args:
            model (RetrievalModel): trained model, switched to eval mode here.
            tree (IdentifierTree): the tree the model was trained on.
            beam_size (int): beam width b.
            top_n (int): items returned per user.
            workers (int): threads used by retrieve_topn.
        """
        if (model.config.n_items, model.config.n_tokens, model.config.depth) != (tree.n_items, tree.n_tokens, tree.depth):
            raise ValueError("model and identifier tree disagree on N, M or depth")
        self.model = model.eval()
        self.tree = tree
        self.beam_size = beam_size
        self.top_n = top_n
        self.workers = workers

    @classmethod
    def from_files(cls, checkpoint_path, tree_path, **kwargs):
        tree = deserialize(tree_path)
        model, _ = load_checkpoint(checkpoint_path, tree)
        return cls(model, tree, **kwargs)

    def retrieve(self, history, beam_size=None, top_n=None):
        return constrained_beam_search(
            self.model, self.tree, history, beam_size or self.beam_size, top_n or self.top_n
        )

    def retrieve_topn(self, histories, beam_size=None, top_n=None, workers=None):
        """
        Retrieve for every user.

        Args:
            histories (dict): user id -> item history.

        Returns:
            dict: user id -> RetrievalResult, in ascending user order.
        """
        users = sorted(histories)

        def one(user):
            result = self.retrieve(histories[user], beam_size, top_n)
            result.user_id = user
            return result

        results = run_parallel(one, users, workers or self.workers)
        if results:
            logger.info(
                "Retrieved top-%d for %d users (mean expansions %.1f)",
                len(results[0].items), len(users), np.mean([r.expansions for r in results]),
            )
        return dict(zip(users, results))


def write_results(results, path):
    """JSON lines {user_id, items, scores}, ascending user id."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(results):
            fh.write(json.dumps(results[user].as_record()) + "\n")


def read_results(path):
    """Inverse of write_results: user id -> ranked item list."""
    results = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                results[int(record["user_id"])] = [int(i) for i in record["items"]]
            except (ValueError, KeyError, TypeError):
                raise ValueError(f"{path}: line {line_no} is not a retrieval record") from None
    return results
