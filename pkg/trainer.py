"""
Trainer

Epoch loop for the retrieval model: seeded shuffling, composite loss,
reverse-mode gradients, Adam with decoupled weight decay, per-epoch
validation Recall and early stopping on it. Writes `best.ckpt`,
`last.ckpt` and a JSON-lines training log into the run directory.
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from orchestra import Prefetcher
from retriever import GenerativeRetriever
from src.autodiff import Adam, NonFiniteError, Tape
from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import ConfigError
from src.losses import compute_losses, make_batch, make_examples
from src.metrics import EvalRecord, evaluate_split, recall_at_k
from src.model import RetrievalModel

logger = logging.getLogger(__name__)

# --- CONFIG ---
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
TRAIN_LOG = "train_log.jsonl"
TRAINER_STATE = "trainer_state.json"


class TrainingDivergedError(ValueError):
    """The loss went non-finite; `step` is the 1-based optimizer step."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class TrainingSummary:
    best_epoch: int
    best_valid: float
    epochs_run: int
    steps: int
    checkpoint_path: str
    log_path: str


class Trainer:
    """
    Attributes:
        config (RunConfig): full run configuration.
        tree (IdentifierTree): identifier tree the model decodes over.
        split (DatasetSplit): users and histories.
        model (RetrievalModel): the model being trained.
        out_dir (str): run directory.
    """

    def __init__(self, config, tree, split, out_dir=None):
        config.check_tree(tree)
        self.config = config
        self.tree = tree
        self.split = split
        self.out_dir = out_dir or config.out_dir
        self.model = RetrievalModel(config.model.with_tree(tree), seed=config.seed)
        self.optimizer = self._make_optimizer()
        self.rng = np.random.default_rng(config.seed)
        self.steps = 0
        self.start_epoch = 0
        self.best_valid, self.best_epoch, self.stale = -np.inf, -1, 0

        self.examples = make_examples(
            split.train_histories(), tree, config.corpus.min_history_len, config.model.max_history_len
        )
        if not self.examples:
            raise ValueError("no training examples: every train history is shorter than corpus.min_history_len")
        logger.info(
            "Trainer ready: %d examples, %d parameters, N=%d M=%d depth=%d",
            len(self.examples), self.model.params.n_parameters(), tree.n_items, tree.n_tokens, tree.depth,
        )

    def _make_optimizer(self):
        t = self.config.train
        return Adam(
            self.model.params,
            lr=t.lr,
            betas=(t.adam_beta1, t.adam_beta2),
            eps=t.adam_eps,
            weight_decay=t.l2_weight,
        )

    def resume(self, path):
        """
        Restore parameters, Adam moments and step counter; training continues
        after the checkpoint's epoch.

        Early-stopping state and both random streams come from the
        `trainer_state.json` written with that epoch. Without it the best and
        stale counts are rebuilt from the training log and the random streams
        start fresh.
        """
        model, manifest = load_checkpoint(path, self.tree, restore_optimizer=True)
        self.model = model
        self.optimizer = self._make_optimizer()
        self.steps = manifest["adam_step"]
        self.start_epoch = manifest["epoch"] + 1

        state = self._read_state(os.path.join(os.path.dirname(path) or ".", TRAINER_STATE))
        if state is not None and state["epoch"] == manifest["epoch"]:
            self.best_epoch, self.stale = state["best_epoch"], state["stale"]
            self.best_valid = -np.inf if state["best_valid"] is None else state["best_valid"]
            self.rng.bit_generator.state = state["rng"]
            self.model._rng.bit_generator.state = state["dropout_rng"]
        else:
            logger.warning("No trainer state for epoch %d; rebuilding early stopping from %s", manifest["epoch"], TRAIN_LOG)
            self._replay_log(manifest["epoch"])
        logger.info("Resumed from %s at epoch %d (step %d)", path, self.start_epoch, self.steps)

    @staticmethod
    def _read_state(path):
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def _write_state(self, epoch):
        state = {
            "epoch": epoch,
            "best_valid": None if not np.isfinite(self.best_valid) else float(self.best_valid),
            "best_epoch": self.best_epoch,
            "stale": self.stale,
            "rng": self.rng.bit_generator.state,
            "dropout_rng": self.model._rng.bit_generator.state,
        }
        path = os.path.join(self.out_dir, TRAINER_STATE)
        with open(path + ".tmp", "w", encoding="utf-8") as fh:
            json.dump(state, fh)
        os.replace(path + ".tmp", path)

    def _replay_log(self, last_epoch):
        log_path = os.path.join(self.out_dir, TRAIN_LOG)
        if not os.path.exists(log_path):
            return
        with open(log_path, encoding="utf-8") as fh:
            entries = [json.loads(line) for line in fh if line.strip()]
        for entry in entries:
            if entry["epoch"] <= last_epoch:
                self._track(entry["valid_recall_at_50"], entry["epoch"])

    def _track(self, valid, epoch):
        """Update the best/stale counters; True when `valid` is a new best."""
        if valid > self.best_valid:
            self.best_valid, self.best_epoch, self.stale = valid, epoch, 0
            return True
        self.stale += 1
        return False

    # --- batches ---

    def _chunks(self):
        order = self.rng.permutation(len(self.examples))
        size = self.config.train.batch_size
        return [[self.examples[i] for i in order[lo:lo + size]] for lo in range(0, len(order), size)]

    def _batches(self, chunks):
        q = self.config.train.q if self.config.train.lambda_r > 0 else 0
        produce = lambda i: make_batch(chunks[i], self.tree, q, self.rng)  # noqa: E731
        if self.config.train.deterministic:
            return (produce(i) for i in range(len(chunks)))
        return Prefetcher(produce, len(chunks), depth=self.config.train.prefetch)

    # --- steps ---

    def train_step(self, batch):
        """One optimizer step; returns the loss components as floats."""
        self.model.train()
        step = self.steps + 1
        try:
            with Tape() as tape:
                losses = compute_losses(self.model, self.tree, batch, self.config.train)
            if not np.isfinite(losses.total.item()):
                raise NonFiniteError("total loss is not finite")
            tape.backward(losses.total)
        except NonFiniteError as e:
            raise TrainingDivergedError(f"training diverged at step {step}: {e}", step) from e
        self.optimizer.step()
        self.steps = step
        record = losses.as_dict()
        logger.debug(
            "step %d: gen %.5f ali %.5f rank %.5f total %.5f",
            step, record["loss_gen"], record["loss_ali"], record["loss_rank"], record["loss_total"],
        )
        return record

    def validate(self):
        """Recall@min(valid_k, N) on the validation users, beam max(valid_beam, K)."""
        t = self.config.train
        users = self.split.valid_users
        if not users:
            logger.warning("No validation users; early stopping sees a constant score")
            return 0.0
        k = min(t.valid_k, self.tree.n_items)
        retriever = GenerativeRetriever(self.model, self.tree, beam_size=max(t.valid_beam, k), top_n=k)
        try:
            results = retriever.retrieve_topn({u: self.split.context[u] for u in users})
        finally:
            self.model.train()
        records = [EvalRecord.build(u, results[u].items, self.split.targets[u]) for u in users]
        return float(np.mean([recall_at_k(r, k) for r in records]))

    # --- loop ---

    def fit(self):
        """
        Train until max_epochs or until validation Recall has not improved for
        more than `patience` epochs.

        Returns:
            TrainingSummary: best epoch and artifact paths.
        """
        t = self.config.train
        os.makedirs(self.out_dir, exist_ok=True)
        best_path = os.path.join(self.out_dir, BEST_CHECKPOINT)
        log_path = os.path.join(self.out_dir, TRAIN_LOG)
        mode = "a" if self.start_epoch else "w"

        epochs_run = 0
        with open(log_path, mode, encoding="utf-8") as log:
            for epoch in range(self.start_epoch, t.max_epochs):
                started = time.time()
                chunks = self._chunks()
                sums = {"loss_gen": 0.0, "loss_ali": 0.0, "loss_rank": 0.0, "loss_total": 0.0}
                batches = tqdm(self._batches(chunks), total=len(chunks), desc=f"epoch {epoch}", disable=not t.progress)
                for batch in batches:
                    record = self.train_step(batch)
                    for key in sums:
                        sums[key] += record[key] * len(batch)

                valid = self.validate()
                epochs_run += 1
                entry = {"epoch": epoch}
                entry.update({key: value / len(self.examples) for key, value in sums.items()})
                entry["valid_recall_at_50"] = valid
                entry["seconds"] = round(time.time() - started, 3)
                log.write(json.dumps(entry) + "\n")
                log.flush()
                print(
                    f"Epoch {epoch}: gen {entry['loss_gen']:.4f} | ali {entry['loss_ali']:.4f} | "
                    f"rank {entry['loss_rank']:.4f} | valid recall {valid:.4f} ({entry['seconds']:.1f}s)"
                )

                save_checkpoint(os.path.join(self.out_dir, LAST_CHECKPOINT), self.model, epoch=epoch)
                if self._track(valid, epoch):
                    save_checkpoint(best_path, self.model, epoch=epoch)
                self._write_state(epoch)
                if self.stale > t.patience:
                    logger.info("Early stop at epoch %d (best %d, recall %.4f)", epoch, self.best_epoch, self.best_valid)
                    break

        return TrainingSummary(self.best_epoch, float(self.best_valid), epochs_run, self.steps, best_path, log_path)


def evaluate_checkpoint(checkpoint_path, tree, split, config, which="test"):
    """
    Retrieve for one eval split with a saved model and score it.

    Raises:
        ConfigError: an eval cutoff K exceeds the catalog size.
    """
    too_large = [k for k in config.eval.k_list if k > tree.n_items]
    if too_large:
        raise ConfigError(f"eval.k_list {too_large} exceeds the catalog size N={tree.n_items}")
    r = config.retrieval
    top_n = min(max(max(config.eval.k_list), r.top_n), tree.n_items)
    model, _ = load_checkpoint(checkpoint_path, tree)
    retriever = GenerativeRetriever(model, tree, beam_size=max(r.beam_size, top_n), top_n=top_n, workers=r.workers)
    users = split.eval_users(which)
    results = retriever.retrieve_topn({u: split.context[u] for u in users})
    return evaluate_split(results, {u: split.targets[u] for u in users}, config.eval.k_list)


def compare_ablation(config, tree, split, out_dir=None):
    """
    Train the full objective and the generation-only variant (lambda_a =
    lambda_r = 0) on the same seed and score both on the test users.

    Returns:
        pd.DataFrame: columns variant, metric, K, value.
    """
    out_dir = out_dir or config.out_dir
    variants = {
        "full": config,
        "gen_only": dataclasses.replace(config, train=dataclasses.replace(config.train, lambda_a=0.0, lambda_r=0.0)),
    }
    tables = []
    for name, variant in variants.items():
        print(f"\n=== Training variant: {name} ===")
        run_dir = os.path.join(out_dir, name)
        summary = Trainer(variant, tree, split, out_dir=run_dir).fit()
        table = evaluate_checkpoint(summary.checkpoint_path, tree, split, variant)
        table.insert(0, "variant", name)
        tables.append(table)
    return pd.concat(tables, ignore_index=True)
