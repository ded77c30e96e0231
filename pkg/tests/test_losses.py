import dataclasses

import numpy as np
import pytest

from conftest import small_tree, tiny_model
from db.interactions import UserHistory
from src.autodiff import Adam, Tape, Tensor, grad_check
from src.config import TrainConfig
from src.losses import (
    alignment_loss,
    alignment_pool,
    compute_losses,
    eligible_prefix_lengths,
    info_nce,
    make_batch,
    make_examples,
    ranking_loss,
    ranking_pairs,
    sample_ranking_negatives,
    total_loss,
)


def _batch(tree, items, q, seed=0, context=(1, 2, 3)):
    histories = [UserHistory(u, tuple(context) + (item,)) for u, item in enumerate(items)]
    examples = make_examples(histories, tree, min_history_len=len(context) + 1)
    return make_batch(examples, tree, q, np.random.default_rng(seed))


@pytest.mark.parametrize("n, k, depth", [(8, 2, 3), (16, 4, 2)])
def test_uniform_predictor_costs_depth_times_log_k(n, k, depth, train_config):
    tree = small_tree(n=n, k=k, seed=1)
    assert tree.depth == depth
    model = tiny_model(tree)
    model.params["token_emb"].data[...] = 0.0
    config = dataclasses.replace(train_config, lambda_a=0.0, lambda_r=0.0)
    losses = compute_losses(model, tree, _batch(tree, [0, n - 1, n // 2], q=0), config)
    assert abs(losses.gen - depth * np.log(k)) < 1e-6


def test_generation_loss_is_non_negative(tree8, model8, train_config):
    losses = compute_losses(model8, tree8, _batch(tree8, range(8), q=2), train_config)
    assert losses.gen >= 0.0
    assert losses.ali >= 0.0 and losses.rank >= 0.0


def test_info_nce_scalar_case():
    # columns: parent (cos 1), one negative (cos 0), the anchor itself
    sim = Tensor([[1.0, 0.0, 1.0]])
    loss = info_nce(sim, np.array([0]), np.array([[False, True, False]]), tau=1.0)
    assert abs(loss.item() - (-np.log(np.e / (np.e + 1)))) < 1e-12
    assert abs(loss.item() - 0.3133) < 1e-4


def test_info_nce_small_temperature_vanishes():
    sim = Tensor([[1.0, 0.5]])
    assert info_nce(sim, np.array([0]), np.array([[False, True]]), tau=0.01).item() < 1e-6


def test_alignment_pool_excludes_parent_and_children(tree8):
    pool, anchors, positive_col, negative_mask = alignment_pool(tree8, [[9, 10, 0]])
    assert pool.tolist() == [0, 8, 9, 10]
    assert [int(pool[a]) for a in anchors] == [0, 9, 10]
    assert [int(pool[c]) for c in positive_col] == [10, 8, 9]
    # anchor 9: self, parent 8 and child 10 are out, leaving token 0
    assert pool[negative_mask[1]].tolist() == [0]
    # anchor 10: self, parent 9 and child 0 are out, leaving the start token
    assert pool[negative_mask[2]].tolist() == [8]


def test_alignment_with_no_negatives_is_zero():
    tree = small_tree(n=1, k=2)
    table = Tensor(np.random.default_rng(0).normal(size=(tree.n_tokens, 4)), requires_grad=True)
    assert alignment_loss(table, tree, [[0]], tau=0.07).item() == pytest.approx(0.0, abs=1e-12)


def test_ranking_scalar_case():
    loss = ranking_loss(Tensor([[0.6, 0.7]]), np.array([[3, 0]]), beta=0.001)
    assert loss.item() == pytest.approx(0.103)


def test_ranking_pairs_count():
    nums = [5, 3, 2, 1, 0]
    pairs = ranking_pairs(nums)
    assert len(pairs) == 10
    assert all(nums[higher] > nums[lower] for lower, higher in pairs)
    assert ranking_pairs([3]) == []


def test_ranking_loss_ignores_padding_columns():
    scores = Tensor([[0.6, 0.7, 0.99]])
    nums = np.array([[3, 0, 0]])
    valid = np.array([[True, True, False]])
    assert ranking_loss(scores, nums, 0.001, valid).item() == pytest.approx(0.103)
    assert ranking_loss(scores, nums, 0.001, np.array([[True, False, False]])).item() == 0.0


def test_ranking_loss_ignores_identifier_order():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=(3, 5))
    nums = np.array([[3, 2, 1, 0, 0], [3, 1, 0, 2, 2], [3, 0, 1, 2, 0]])
    expected = ranking_loss(Tensor(scores), nums, beta=0.01).item()
    for _ in range(10):
        perm = rng.permutation(5)
        assert ranking_loss(Tensor(scores[:, perm]), nums[:, perm], beta=0.01).item() == pytest.approx(expected, abs=1e-12)


def test_ranking_loss_zero_when_order_is_respected():
    assert ranking_loss(Tensor([[0.9, 0.5, 0.1]]), np.array([[3, 1, 0]]), beta=0.01).item() == 0.0


def test_negatives_share_the_expected_prefixes(tree8):
    rng = np.random.default_rng(0)
    negatives = sample_ranking_negatives(tree8, [12, 14, 7], 2, rng)
    assert negatives.shared == (1, 0)
    assert negatives.identifiers[0][0] == 12 and negatives.identifiers[0][1] == 13
    assert negatives.identifiers[1][0] == 9

    capped = sample_ranking_negatives(tree8, [12, 14, 7], 4, rng)
    assert len(capped) == 2


def test_negatives_are_always_valid_and_distinct(tree8):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        target = int(rng.integers(8))
        positive = tree8.item_to_identifier(target)
        negatives = sample_ranking_negatives(tree8, positive, 2, rng)
        for identifier, shared, item in zip(negatives.identifiers, negatives.shared, negatives.items):
            assert tree8.identifier_to_item(identifier) == item != target
            assert list(identifier[:shared]) == positive[:shared]
            assert identifier[shared] != positive[shared]


def test_negatives_on_padded_tree_repeat_the_leaf():
    tree = small_tree(n=5, k=2, seed=3)
    rng = np.random.default_rng(0)
    for item in range(5):
        positive = tree.item_to_identifier(item)
        if not eligible_prefix_lengths(tree, positive):
            continue
        for identifier in sample_ranking_negatives(tree, positive, 4, rng).identifiers:
            assert tree.identifier_to_item(identifier) != item


def test_single_item_catalog_raises():
    tree = small_tree(n=1, k=2)
    with pytest.raises(ValueError):
        sample_ranking_negatives(tree, tree.item_to_identifier(0), 2, np.random.default_rng(0))


def test_depth_one_tree_has_no_ranking_negatives(train_config):
    tree = small_tree(n=8, k=8)
    assert tree.depth == 1
    assert len(sample_ranking_negatives(tree, tree.item_to_identifier(4), 4, np.random.default_rng(0))) == 0

    batch = _batch(tree, [0, 4, 7], q=4)
    assert batch.identifiers.shape == (3, 1, 1)
    losses = compute_losses(tiny_model(tree), tree, batch, train_config)
    assert losses.rank == 0.0
    assert np.isfinite(losses.total.item())


def test_padded_tree_negative_counts_follow_eligibility(train_config):
    tree = small_tree(n=5, k=2, seed=3)
    items = list(range(5))
    counts = [len(eligible_prefix_lengths(tree, tree.item_to_identifier(i))) for i in items]
    batch = _batch(tree, items, q=4)
    assert batch.valid.sum(axis=1).tolist() == [1 + c for c in counts]
    assert np.isfinite(compute_losses(tiny_model(tree), tree, batch, train_config).total.item())


def test_make_examples_sliding_window(tree8):
    history = UserHistory(3, (0, 1, 2, 3, 4, 5))
    examples = make_examples([history], tree8, min_history_len=5)
    assert len(examples) == 2
    assert examples[0].context == (0, 1, 2, 3) and examples[0].target == 4
    assert examples[1].context == (0, 1, 2, 3, 4) and examples[1].target == 5
    assert examples[1].identifier == (12, 13, 5)

    clipped = make_examples([history], tree8, min_history_len=5, max_history_len=2)
    assert clipped[1].context == (3, 4)


def test_make_batch_layout(tree8):
    batch = _batch(tree8, [0, 5], q=2)
    assert batch.identifiers.shape == (2, 3, 3)
    assert batch.nums[:, 0].tolist() == [3, 3]
    assert batch.nums[0, 1:].tolist() == [1, 0]
    assert batch.valid.all()
    assert _batch(tree8, [0, 5], q=0).identifiers.shape == (2, 1, 3)


def test_zero_weights_leave_generation_only(tree8, model8, train_config):
    batch = _batch(tree8, [1, 6], q=2)
    config = dataclasses.replace(train_config, lambda_a=0.0, lambda_r=0.0)
    losses = compute_losses(model8, tree8, batch, config)
    assert losses.ali == 0.0 and losses.rank == 0.0
    assert losses.total.item() == pytest.approx(losses.gen)

    full = compute_losses(model8, tree8, batch, train_config)
    assert full.gen == pytest.approx(losses.gen)
    expected = full.gen + train_config.lambda_a * full.ali + train_config.lambda_r * full.rank
    assert full.total.item() == pytest.approx(expected)
    assert set(full.as_dict()) == {"loss_gen", "loss_ali", "loss_rank", "loss_total"}


@pytest.mark.parametrize(
    "n, items, context",
    [(4, [0, 3], (1, 2)), (2, [0, 1], (1, 0))],
)
def test_composite_loss_gradients(n, items, context):
    tree = small_tree(n=n, k=2, seed=2)
    model = tiny_model(tree, d=8, seed=2)
    batch = _batch(tree, items, q=1, context=context)
    config = TrainConfig(lambda_a=0.5, lambda_r=0.5, tau=0.5, q=1, beta=0.01)

    def f():
        return total_loss(model, tree, batch, config)

    assert grad_check(f, model.params, max_coords=200, floor=1e-8) < 1e-4


@pytest.mark.slow
def test_one_adam_step_reduces_the_loss(tree8, train_config):
    improved = 0
    for seed in range(100):
        model = tiny_model(tree8, seed=seed)
        batch = _batch(tree8, [seed % 8], q=2, seed=seed)
        with Tape() as tape:
            before = total_loss(model, tree8, batch, train_config)
        tape.backward(before)
        Adam(model.params, lr=1e-3).step()
        after = total_loss(model, tree8, batch, train_config)
        improved += after.item() < before.item()
    assert improved >= 95
