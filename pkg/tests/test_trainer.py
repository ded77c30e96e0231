import json
import os

import numpy as np
import pytest

import trainer as trainer_module
from db.interactions import build_histories, load_corpus, split_users
from src.autodiff import NonFiniteError
from src.checkpoint import read_checkpoint
from src.config import ConfigError, load_config
from src.embeddings import build_embeddings
from src.idtree import build_identifier_tree
from trainer import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    TRAIN_LOG,
    TRAINER_STATE,
    Trainer,
    TrainingDivergedError,
    compare_ablation,
    evaluate_checkpoint,
)


def _data(config):
    interactions, n_items = load_corpus(config.corpus)
    histories, _ = build_histories(interactions, config.corpus.min_history_len)
    split = split_users(histories, config.seed)
    embeddings = build_embeddings(config.embedding, split.train_histories(), n_items, config.seed)
    tree = build_identifier_tree(embeddings, config.tree.k, seed=config.seed)
    return tree, split


def _log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def test_fit_writes_artifacts(run_config):
    tree, split = _data(run_config)
    trainer = Trainer(run_config, tree, split)
    summary = trainer.fit()
    assert summary.epochs_run == 2
    batches = -(-len(trainer.examples) // run_config.train.batch_size)
    assert summary.steps == 2 * batches
    for name in (BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG):
        assert os.path.exists(os.path.join(run_config.out_dir, name))

    entries = _log(summary.log_path)
    assert [e["epoch"] for e in entries] == [0, 1]
    assert set(entries[0]) == {
        "epoch", "loss_gen", "loss_ali", "loss_rank", "loss_total", "valid_recall_at_50", "seconds",
    }
    assert all(0.0 <= e["valid_recall_at_50"] <= 1.0 for e in entries)
    assert all(e["loss_gen"] > 0 for e in entries)


def test_early_stopping_counts_stale_epochs(run_config, monkeypatch):
    run_config.train.patience = 2
    run_config.train.max_epochs = 10
    tree, split = _data(run_config)
    trainer = Trainer(run_config, tree, split)
    scores = iter([0.1, 0.2, 0.2, 0.1, 0.15, 0.9, 0.9])
    monkeypatch.setattr(trainer, "validate", lambda: next(scores))
    summary = trainer.fit()
    assert summary.epochs_run == 5
    assert summary.best_epoch == 1
    assert summary.best_valid == pytest.approx(0.2)


def test_same_seed_same_model(run_config, tmp_path):
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    a = Trainer(run_config, tree, split, out_dir=str(tmp_path / "a"))
    b = Trainer(run_config, tree, split, out_dir=str(tmp_path / "b"))
    a.fit()
    b.fit()
    for name, p in a.model.params.items():
        np.testing.assert_array_equal(p.data, b.model.params[name].data)


def test_prefetched_batches_train_too(run_config):
    run_config.train.max_epochs = 1
    run_config.train.deterministic = False
    tree, split = _data(run_config)
    summary = Trainer(run_config, tree, split).fit()
    assert summary.epochs_run == 1 and summary.steps > 0


def test_resume_continues_after_saved_epoch(run_config):
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    first = Trainer(run_config, tree, split).fit()

    run_config.train.max_epochs = 2
    resumed = Trainer(run_config, tree, split)
    resumed.resume(os.path.join(run_config.out_dir, LAST_CHECKPOINT))
    assert resumed.start_epoch == 1
    assert resumed.model.params.step == first.steps
    summary = resumed.fit()
    assert summary.epochs_run == 1
    assert [e["epoch"] for e in _log(summary.log_path)] == [0, 1]


def _resume_after_good_epoch(run_config, monkeypatch, drop_state=False):
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    first = Trainer(run_config, tree, split)
    monkeypatch.setattr(first, "validate", lambda: 0.9)
    first.fit()
    if drop_state:
        os.remove(os.path.join(run_config.out_dir, TRAINER_STATE))

    run_config.train.max_epochs = 3
    resumed = Trainer(run_config, tree, split)
    resumed.resume(os.path.join(run_config.out_dir, LAST_CHECKPOINT))
    monkeypatch.setattr(resumed, "validate", lambda: 0.05)
    return resumed.fit()


@pytest.mark.parametrize("drop_state", [False, True])
def test_resume_keeps_the_earlier_best(run_config, monkeypatch, drop_state):
    summary = _resume_after_good_epoch(run_config, monkeypatch, drop_state)
    assert summary.best_epoch == 0
    assert summary.best_valid == pytest.approx(0.9)
    manifest, _ = read_checkpoint(summary.checkpoint_path)
    assert manifest["epoch"] == 0
    with open(os.path.join(run_config.out_dir, TRAINER_STATE), encoding="utf-8") as fh:
        assert json.load(fh)["stale"] == 2


def test_resume_restores_random_streams(run_config):
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    first = Trainer(run_config, tree, split)
    first.fit()

    resumed = Trainer(run_config, tree, split)
    resumed.resume(os.path.join(run_config.out_dir, LAST_CHECKPOINT))
    assert resumed.rng.bit_generator.state == first.rng.bit_generator.state
    assert resumed.model._rng.bit_generator.state == first.model._rng.bit_generator.state


def test_non_finite_loss_reports_the_step(run_config, monkeypatch):
    tree, split = _data(run_config)
    trainer = Trainer(run_config, tree, split)

    def diverge(*args, **kwargs):
        raise NonFiniteError("exp overflow")

    monkeypatch.setattr(trainer_module, "compute_losses", diverge)
    with pytest.raises(TrainingDivergedError) as err:
        trainer.fit()
    assert err.value.step == 1
    assert "step 1" in str(err.value)


def test_no_examples_is_an_error(run_config):
    tree, split = _data(run_config)
    run_config.corpus.min_history_len = 50
    with pytest.raises(ValueError):
        Trainer(run_config, tree, split)


def test_evaluate_checkpoint_table(run_config):
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    summary = Trainer(run_config, tree, split).fit()
    table = evaluate_checkpoint(summary.checkpoint_path, tree, split, run_config)
    assert list(zip(table.metric, table.K)) == [
        ("hr", 5), ("hr", 10), ("recall", 5), ("recall", 10), ("ndcg", 5), ("ndcg", 10),
    ]
    assert table.value.between(0.0, 1.0).all()

    run_config.eval.k_list = [5, 17]
    with pytest.raises(ConfigError, match="17"):
        evaluate_checkpoint(summary.checkpoint_path, tree, split, run_config)


def test_compare_ablation_trains_both_variants(run_config):
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    table = compare_ablation(run_config, tree, split)
    assert sorted(set(table.variant)) == ["full", "gen_only"]
    assert os.path.exists(os.path.join(run_config.out_dir, "gen_only", BEST_CHECKPOINT))
    assert run_config.train.lambda_a > 0


@pytest.mark.slow
def test_learns_the_successor_rule(run_config):
    run_config.corpus.synthetic_users = 400
    run_config.corpus.synthetic_items = 20
    run_config.model.d = 16
    run_config.train.max_epochs = 15
    run_config.train.lr = 0.005
    run_config.train.valid_k = 5
    run_config.train.valid_beam = 20
    tree, split = _data(run_config)
    summary = Trainer(run_config, tree, split).fit()
    # uniform guessing recalls about 5/20 of each target set
    assert summary.best_valid > 0.35


def test_trains_on_a_depth_one_tree(run_config):
    run_config.tree.k = 16
    run_config.train.max_epochs = 1
    tree, split = _data(run_config)
    assert tree.depth == 1
    summary = Trainer(run_config, tree, split).fit()
    assert summary.steps > 0
    assert all(e["loss_rank"] == 0.0 for e in _log(summary.log_path))


@pytest.mark.slow
def test_successor_corpus_beats_random_and_ablation(tmp_path):
    toy = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "toy.conf")
    recalls, wins = [], 0
    for seed in range(5):
        config = load_config(toy, {"seed": seed, "out_dir": str(tmp_path / f"seed{seed}"), "train.progress": False})
        assert (config.corpus.synthetic_items, config.corpus.synthetic_users) == (200, 2000)
        assert (config.tree.k, config.model.d, config.model.n_layers) == (8, 32, 1)
        tree, split = _data(config)
        table = compare_ablation(config, tree, split)
        recall = table[(table.metric == "recall") & (table.K == 20)].set_index("variant").value
        recalls.append(recall["full"])
        wins += recall["full"] >= recall["gen_only"]
    # random retrieval recalls 20/200 of the targets
    assert recalls[0] >= 0.30
    assert wins >= 3
