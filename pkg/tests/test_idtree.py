import json

import numpy as np
import pytest

from conftest import toy_tree
from src.idtree import (
    TREE_FORMAT,
    IdentifierTree,
    TreeFormatError,
    _exchange,
    build_identifier_tree,
    constrained_kmeans,
    deserialize,
    serialize,
)
from src.oracles import brute_balanced_partition, sse


def _ceil_log(n, k):
    depth, capacity = 1, k
    while capacity < n:
        capacity *= k
        depth += 1
    return depth


def _check_structure(tree):
    n, k = tree.n_items, tree.k
    # identifiers are unique root-to-leaf paths
    assert len({tuple(p) for p in tree.item_paths}) == n
    for item in range(n):
        assert tree.identifier_to_item(tree.item_to_identifier(item)) == item
    # sibling groups never exceed k and sizes differ by at most one
    for token, kids in enumerate(tree.children):
        if token >= n:
            assert 1 <= len(kids) <= k
            sizes = [int(tree.subtree_sizes[c]) for c in kids]
            assert max(sizes) - min(sizes) <= 1
    assert tree.subtree_sizes[tree.start_token] == n


def test_toy_tree_layout(tree8):
    assert tree8.depth == 3
    assert tree8.n_tokens == 15
    assert tree8.extra_token_rows == 7
    assert tree8.item_to_identifier(5) == [12, 13, 5]
    assert tree8.children_of_prefix([]) == [9, 12]
    assert tree8.children_of_prefix([12]) == [13, 14]
    assert tree8.children_of_prefix([12, 14]) == [6, 7]
    assert tree8.children_of_prefix([12, 14, 7]) == []


def test_invalid_prefix_is_rejected(tree8):
    with pytest.raises(ValueError):
        tree8.children_of_prefix([12, 10])
    with pytest.raises(ValueError):
        tree8.identifier_to_item([9, 10])
    with pytest.raises(ValueError):
        tree8.item_to_identifier(8)


def test_built_toy_tree_matches_layout_rules():
    # four tight pairs on two rows: balanced clustering keeps pairs together
    points = np.array([[0, 0], [0, 0.1], [1, 0], [1, 0.1], [0, 10], [0, 10.1], [1, 10], [1, 10.1]], dtype=float)
    tree = build_identifier_tree(points, k=2, seed=0)
    assert tree.depth == 3
    assert tree.n_tokens == 15
    assert tree.start_token == 8
    # internal tokens are numbered on first visit in item order
    assert tree.item_to_identifier(0)[:2] == [9, 10]
    for a, b in [(0, 1), (2, 3), (4, 5), (6, 7)]:
        assert tree.parent[a] == tree.parent[b]
    _check_structure(tree)


@pytest.mark.parametrize(
    "n, k",
    [(1, 2), (7, 2), (8, 2), (64, 4), (64, 8), (1000, 16), (100, 3), (37, 4)],
)
def test_balanced_build_invariants(n, k):
    rng = np.random.default_rng(n * 31 + k)
    tree = build_identifier_tree(rng.normal(size=(n, 4)), k, seed=n + k)
    _check_structure(tree)
    assert tree.depth == _ceil_log(n, k)
    assert len(tree.children[tree.start_token]) == min(k, n)
    assert np.all(tree.item_paths[:, -1] == np.arange(n))


@pytest.mark.parametrize("n, k", [(8, 2), (64, 4), (256, 4), (4096, 16)])
def test_internal_count_for_powers_of_k(n, k):
    tree = build_identifier_tree(np.random.default_rng(0).normal(size=(n, 3)), k, seed=0)
    assert tree.n_tokens - n == (n - 1) // (k - 1)
    assert tree.n_tokens - n - 1 == (n - 1) // (k - 1) - 1


def test_padding_steps_are_pass_through():
    tree = build_identifier_tree(np.random.default_rng(3).normal(size=(5, 2)), k=2, seed=3)
    padded = [i for i in range(5) if len(set(tree.item_paths[i][-2:])) == 1]
    assert padded, "a 2/3 split leaves the pair one level short"
    item = padded[0]
    path = tree.item_to_identifier(item)
    first = path.index(item)
    assert tree.children_of_prefix(path[:first + 1]) == [item]
    _, cand_mask, _ = tree.step_candidates
    assert cand_mask[item, first + 1].sum() == 1


def test_unbalanced_tree_is_at_least_as_deep():
    rng = np.random.default_rng(0)
    values = np.concatenate([rng.normal(0, 0.1, size=(200, 2)), rng.normal(10, 0.1, size=(8, 2))])
    balanced = build_identifier_tree(values, 4, seed=0)
    unbalanced = build_identifier_tree(values, 4, seed=0, mode="unbalanced")
    assert unbalanced.mode == "unbalanced"
    assert unbalanced.depth >= balanced.depth
    for item in range(len(values)):
        assert unbalanced.identifier_to_item(unbalanced.item_to_identifier(item)) == item


def test_unbalanced_identical_points_fall_back_to_balanced():
    tree = build_identifier_tree(np.ones((9, 2)), 2, seed=0, mode="unbalanced")
    assert tree.depth == _ceil_log(9, 2)


def test_constrained_kmeans_respects_sizes():
    points = np.random.default_rng(1).normal(size=(23, 3))
    labels = constrained_kmeans(points, 4, 5, 6, seed=0)
    sizes = np.bincount(labels, minlength=4)
    assert sizes.sum() == 23
    assert sizes.min() >= 5 and sizes.max() <= 6


def test_constrained_kmeans_rejects_infeasible_sizes():
    with pytest.raises(ValueError):
        constrained_kmeans(np.zeros((5, 2)), 2, 3, 3)


def test_exchange_swaps_misplaced_pairs():
    dist = np.array([[0.0, 4.0], [4.0, 0.0], [1.0, 5.0], [5.0, 1.0]])
    labels = _exchange(dist, np.array([1, 0, 0, 1]), 2)
    assert labels.tolist() == [0, 1, 0, 1]


def test_constrained_kmeans_close_to_brute_force():
    for seed in range(50):
        points = np.random.default_rng(seed).normal(size=(8, 2))
        labels = constrained_kmeans(points, 2, 4, 4, seed=seed)
        got = sse(points.tolist(), labels.tolist())
        _, best = brute_balanced_partition(points.tolist())
        assert best <= got + 1e-9
        assert got <= best * 1.1 + 1e-9, f"seed {seed}: {got:.4f} vs optimum {best:.4f}"


def test_serialize_round_trip(tmp_path, tree8):
    path = str(tmp_path / "tree.json")
    serialize(tree8, path)
    doc = json.loads(open(path, encoding="utf-8").read())
    assert doc["format"] == TREE_FORMAT == "seater-tree/1"
    loaded = deserialize(path)
    np.testing.assert_array_equal(loaded.parent, tree8.parent)
    np.testing.assert_array_equal(loaded.item_paths, tree8.item_paths)
    assert loaded.stats() == tree8.stats()


def test_deserialize_rejects_corruption(tmp_path, tree8):
    path = tmp_path / "tree.json"
    serialize(tree8, str(path))
    doc = json.loads(path.read_text(encoding="utf-8"))
    doc["item_paths"][0] = [9, 11, 0]
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(TreeFormatError):
        deserialize(str(path))

    path.write_text(json.dumps({"format": "other"}), encoding="utf-8")
    with pytest.raises(TreeFormatError):
        deserialize(str(path))

    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(TreeFormatError):
        deserialize(str(path))


def test_tree_rejects_orphan_tokens():
    parent = [3, 3, 2, 2, 2]
    with pytest.raises(TreeFormatError):
        IdentifierTree(2, 2, 2, 5, parent, [[3, 0], [3, 1]])


def test_fixture_tree_is_valid():
    _check_structure(toy_tree())
