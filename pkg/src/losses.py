"""
Multi-task training objective.

    total = L_gen + lambda_a * L_ali + lambda_r * L_rank

- L_gen: forced-decoding cross-entropy of the target identifier, each step a
  softmax restricted to the legal children of the true prefix.
- L_ali: infoNCE pulling every token embedding towards its parent's, with the
  other pool tokens (minus parent and children) as negatives.
- L_rank: triplet hinge over pairs of identifiers that share different
  prefix lengths with the target; more shared tokens must score higher.

Weight decay is not part of the scalar; Adam applies it at the step.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingExample:
    user_id: int
    context: tuple
    target: int
    identifier: tuple


@dataclass(frozen=True)
class NegativeSet:
    """
    Attributes:
        identifiers (tuple): sampled identifiers, one per shared-prefix length.
        shared (tuple): leading tokens each one shares with the positive.
        items (tuple): the items the identifiers lead to.
    """

    identifiers: tuple
    shared: tuple
    items: tuple

    def __len__(self):
        return len(self.identifiers)


@dataclass
class Batch:
    """
    Attributes:
        examples (list[TrainingExample]): the rows.
        identifiers (np.ndarray): (B, Q, l) column 0 is the target, the rest negatives.
        nums (np.ndarray): (B, Q) shared leading tokens with the target (l for the target).
        valid (np.ndarray): (B, Q) False on padding columns.
    """

    examples: list
    identifiers: np.ndarray
    nums: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.examples)

    @property
    def contexts(self):
        return [e.context for e in self.examples]

    @property
    def items(self):
        return np.array([e.target for e in self.examples], dtype=np.int64)


@dataclass
class LossBreakdown:
    total: Tensor
    gen: float
    ali: float
    rank: float

    def as_dict(self):
        return {"loss_gen": self.gen, "loss_ali": self.ali, "loss_rank": self.rank, "loss_total": self.total.item()}


def make_examples(histories, tree, min_history_len=5, max_history_len=50):
    """
    Sliding next-item examples: for j in [min_history_len - 1, t - 1] the
    context is items[:j] (last max_history_len kept) and the target items[j].
    """
    examples = []
    start = max(1, min_history_len - 1)
    for history in histories:
        items = history.items
        for j in range(start, len(items)):
            context = tuple(items[max(0, j - max_history_len):j])
            target = int(items[j])
            examples.append(TrainingExample(history.user_id, context, target, tuple(tree.item_to_identifier(target))))
    return examples


# --- ranking negatives ---

def eligible_prefix_lengths(tree, identifier):
    """Prefix lengths p <= l - 2 where the next position has a real alternative."""
    node = tree.start_token
    eligible = []
    for p in range(tree.depth - 1):
        if not tree.is_leaf(node) and len(tree.children[node]) >= 2:
            eligible.append(p)
        node = int(identifier[p])
    return eligible


def sample_ranking_negatives(tree, positive, q, rng):
    """
    Sample up to q identifiers, each sharing a distinct prefix length with `positive`.

    Args:
        tree (IdentifierTree): the identifier tree.
        positive: the target identifier (length l).
        q (int): requested count; shrinks to the number of eligible lengths.
        rng (np.random.Generator): sampling state.

    Returns:
        NegativeSet: ordered by descending shared length; empty when no
        prefix length has a sibling to branch to (a depth-1 tree).

    Raises:
        ValueError: q < 1, or a single-item catalog.
    """
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    if tree.n_items < 2:
        raise ValueError("a single-item catalog has no ranking negatives")
    positive = [int(t) for t in positive]
    eligible = eligible_prefix_lengths(tree, positive)
    if not eligible:
        return NegativeSet((), (), ())
    chosen = sorted(rng.choice(eligible, size=min(q, len(eligible)), replace=False).tolist(), reverse=True)

    identifiers, items = [], []
    for p in chosen:
        node = tree.start_token if p == 0 else positive[p - 1]
        siblings = [c for c in tree.children[node] if c != positive[p]]
        path = positive[:p] + [int(rng.choice(siblings))]
        while len(path) < tree.depth:
            last = path[-1]
            path.append(last if tree.is_leaf(last) else int(rng.choice(tree.children[last])))
        identifiers.append(tuple(path))
        items.append(path[-1])
    return NegativeSet(tuple(identifiers), tuple(chosen), tuple(items))


def make_batch(examples, tree, q, rng):
    """Stack targets and (when q > 0) their ranking negatives into padded arrays."""
    negatives = [sample_ranking_negatives(tree, e.identifier, q, rng) for e in examples] if q > 0 else []
    width = 1 + max((len(n) for n in negatives), default=0)
    b, depth = len(examples), tree.depth
    identifiers = np.zeros((b, width, depth), dtype=np.int64)
    nums = np.zeros((b, width), dtype=np.int64)
    valid = np.zeros((b, width), dtype=bool)
    for row, example in enumerate(examples):
        # padding columns repeat the target so every decoded row is a real path
        identifiers[row, :] = example.identifier
        nums[row, 0] = depth
        valid[row, 0] = True
        neg = negatives[row] if negatives else None
        if neg:
            identifiers[row, 1:1 + len(neg)] = neg.identifiers
            nums[row, 1:1 + len(neg)] = neg.shared
            valid[row, 1:1 + len(neg)] = True
    return Batch(list(examples), identifiers, nums, valid)


# --- losses ---

def generation_loss(log_probs, target_pos):
    """
    Mean over rows of -sum_i log p(y_i | x, y_<i).

    Args:
        log_probs (Tensor): (B, l, K) constrained log-probabilities.
        target_pos (np.ndarray): (B, l) index of the true token among the candidates.
    """
    b, depth = target_pos.shape
    picked = ad.getitem(log_probs, (np.arange(b)[:, None], np.arange(depth)[None, :], target_pos))
    return ad.scale(ad.sum(picked), -1.0 / b)


def info_nce(similarity, positive_col, negative_mask, tau):
    """
    Mean over anchors of -log(exp(s_pos / tau) / (exp(s_pos / tau) + sum_neg exp(s_neg / tau))).

    Args:
        similarity (Tensor): (A, P) anchor-to-pool similarities.
        positive_col (np.ndarray): (A,) pool column of each anchor's positive.
        negative_mask (np.ndarray): (A, P) True where the pool token is a negative.
        tau (float): temperature.
    """
    a = similarity.shape[0]
    allowed = np.asarray(negative_mask, dtype=bool).copy()
    allowed[np.arange(a), positive_col] = True
    logp = ad.log_softmax(ad.masked_fill(ad.scale(similarity, 1.0 / tau), ~allowed), axis=-1)
    return ad.scale(ad.sum(ad.getitem(logp, (np.arange(a), positive_col))), -1.0 / a)


def alignment_pool(tree, identifiers):
    """
    Token pool of a batch and its anchors.

    Returns:
        tuple: (pool token ids, anchor rows into the pool, positive column of
        each anchor, (A, P) negative mask).
    """
    tokens = np.unique(np.asarray(identifiers, dtype=np.int64))
    pool = np.union1d(tokens, tree.parent[tokens])
    column = {int(t): n for n, t in enumerate(pool)}
    anchors = [n for n, t in enumerate(pool) if t != tree.start_token]
    if not anchors:
        raise ValueError("alignment pool has no anchor token")
    positive_col = np.array([column[int(tree.parent[pool[n]])] for n in anchors], dtype=np.int64)
    negative_mask = np.ones((len(anchors), len(pool)), dtype=bool)
    for row, n in enumerate(anchors):
        token = int(pool[n])
        excluded = [token, int(tree.parent[token])] + list(tree.children[token])
        negative_mask[row, [column[t] for t in excluded if t in column]] = False
    return pool, np.array(anchors, dtype=np.int64), positive_col, negative_mask


def alignment_loss(token_embeddings, tree, identifiers, tau):
    """
    infoNCE over the batch's target tokens and their parents, by cosine similarity.

    Args:
        token_embeddings (Tensor): the (M, d) token table.
        tree (IdentifierTree): supplies parents and children.
        identifiers: (B, l) target identifiers.
        tau (float): temperature.
    """
    pool, anchors, positive_col, negative_mask = alignment_pool(tree, identifiers)
    pool_emb = ad.embedding_lookup(token_embeddings, pool)
    similarity = ad.cosine_similarity(ad.embedding_lookup(token_embeddings, pool[anchors]), pool_emb)
    return info_nce(similarity, positive_col, negative_mask, tau)


def ranking_pairs(nums):
    """
    Ordered pairs (lower, higher) of positions whose shared lengths differ.

    With q + 1 distinct shared lengths this is the full C(q + 1, 2) pair set;
    `higher` is the identifier required to score above `lower`.
    """
    return [(i, j) for i in range(len(nums)) for j in range(len(nums)) if nums[j] > nums[i]]


def ranking_loss(scores, nums, beta, valid=None):
    """
    Mean over rows of sum_pairs max(0, s_lower - s_higher + beta * (num_higher - num_lower)).

    Args:
        scores (Tensor): (B, Q) similarities.
        nums (np.ndarray): (B, Q) shared leading tokens with the target.
        beta (float): margin per shared-token gap.
        valid (np.ndarray | None): (B, Q) mask of real columns.
    """
    nums = np.asarray(nums, dtype=np.int64)
    valid = np.ones(nums.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    rows, lower, higher = [], [], []
    for row in range(nums.shape[0]):
        cols = np.flatnonzero(valid[row])
        for i, j in ranking_pairs(nums[row, cols].tolist()):
            rows.append(row)
            lower.append(cols[i])
            higher.append(cols[j])
    if not rows:
        return Tensor(0.0)
    rows, lower, higher = (np.array(a, dtype=np.int64) for a in (rows, lower, higher))
    margin = beta * (nums[rows, higher] - nums[rows, lower])
    hinge = ad.relu(ad.getitem(scores, (rows, lower)) - ad.getitem(scores, (rows, higher)) + margin)
    return ad.scale(ad.sum(hinge), 1.0 / nums.shape[0])


def compute_losses(model, tree, batch, config):
    """
    One forward pass of the composite objective.

    The encoder runs once per example. Every identifier of the batch (target
    plus negatives) gets one forced decoder pass over
    [start, y_1..y_l]; the target's first l rows feed L_gen and the mean of
    all l + 1 rows is z_y for L_rank.

    Args:
        model (RetrievalModel): the model.
        tree (IdentifierTree): the identifier tree it was built for.
        batch (Batch): from make_batch.
        config (TrainConfig): loss weights and constants.

    Returns:
        LossBreakdown: the total Tensor and each component as a float.
    """
    use_rank = config.lambda_r > 0 and batch.identifiers.shape[1] > 1
    width = batch.identifiers.shape[1] if use_rank else 1
    b, depth = len(batch), tree.depth

    enc = model.encode_batch(batch.contexts)
    flat = batch.identifiers[:, :width].reshape(b * width, depth)
    dec = model.decode(enc.take(np.repeat(np.arange(b), width)), flat)

    cand_ids, cand_mask, target_pos = (a[batch.items] for a in tree.step_candidates)
    target_states = ad.getitem(dec.states, (np.arange(b) * width, slice(0, depth)))
    gen = generation_loss(model.step_log_probs(target_states, cand_ids, cand_mask), target_pos)
    total = gen

    ali_value = 0.0
    if config.lambda_a > 0:
        ali = alignment_loss(model.token_embeddings, tree, batch.identifiers[:, 0], config.tau)
        ali_value = ali.item()
        total = total + ad.scale(ali, config.lambda_a)

    rank_value = 0.0
    if use_rank:
        z_x = ad.masked_mean(enc.states, enc.mask)
        z_y = ad.reshape(ad.mean(dec.states, axis=1), (b, width, model.config.d))
        rank = ranking_loss(model.pair_scores(z_x, z_y), batch.nums, config.beta, batch.valid)
        rank_value = rank.item()
        total = total + ad.scale(rank, config.lambda_r)

    return LossBreakdown(total, gen.item(), ali_value, rank_value)


def total_loss(model, tree, batch, config):
    return compute_losses(model, tree, batch, config).total
