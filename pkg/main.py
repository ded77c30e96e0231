"""
Tree-Identifier Generative Retrieval - Main Entry Point

Commands:
    build-index   embeddings + identifier tree  -> <out>/tree.json, index_stats.json
    train         multi-task training            -> <out>/best.ckpt, train_log.jsonl
    retrieve      constrained beam search        -> <out>/results.jsonl
    evaluate      HR / Recall / NDCG             -> <out>/metrics.csv, metrics.json
    bench         depth / expansion benchmark    -> <out>/bench.csv

Usage:
    python main.py build-index --config configs/toy.conf
    python main.py train --config configs/toy.conf
    python main.py retrieve --config configs/toy.conf --top-n 20
    python main.py evaluate --config configs/toy.conf --k-list 10,20

Every command reads one flat config document (--config); flags override it.
Exit codes: 0 success, 1 validation or bound failure, 2 I/O or format error.
"""

import argparse
import json
import logging
import os
import sys
import time

from bench import check_bounds, run_benchmark
from db.interactions import CorpusFormatError, build_histories, load_corpus, split_users, write_interactions
from retriever import GenerativeRetriever, read_results, write_results
from src.autodiff import NonFiniteError
from src.checkpoint import CheckpointFormatError
from src.config import ConfigError, dump_config, load_config, setup_logging
from src.embeddings import EmbeddingFormatError, build_embeddings, save_embeddings
from src.idtree import TreeFormatError, build_identifier_tree, deserialize, serialize
from src.metrics import evaluate_split, write_report
from trainer import TrainingDivergedError, Trainer, compare_ablation

logger = logging.getLogger(__name__)


def prepare_data(config):
    """Corpus -> histories -> seeded 8:1:1 split."""
    interactions, n_items = load_corpus(config.corpus)
    histories, _ = build_histories(interactions, config.corpus.min_history_len)
    split = split_users(histories, config.seed)
    print(
        f"Corpus: {len(interactions)} interactions, N={n_items}, users "
        f"train={len(split.train_users)} valid={len(split.valid_users)} test={len(split.test_users)} "
        f"(excluded {split.excluded})"
    )
    return interactions, n_items, split


def load_tree(config):
    tree = deserialize(config.tree_path)
    config.check_tree(tree)
    return tree


# --- commands ---

def cmd_build_index(config, args):
    interactions, n_items, split = prepare_data(config)
    os.makedirs(config.out_dir, exist_ok=True)
    if not config.corpus.interactions_path:
        write_interactions(interactions, os.path.join(config.out_dir, "interactions.tsv"))

    started = time.time()
    embeddings = build_embeddings(config.embedding, split.train_histories(), n_items, config.seed)
    tree = build_identifier_tree(
        embeddings, config.tree.k, seed=config.seed, mode=config.tree.mode,
        max_iters=config.tree.max_iters, n_init=config.tree.n_init,
    )
    build_seconds = time.time() - started

    serialize(tree, config.tree_path)
    if args.save_embeddings:
        save_embeddings(embeddings, os.path.join(config.out_dir, "embeddings.txt"))
    stats = {
        "N": tree.n_items,
        "M": tree.n_tokens,
        "k": tree.k,
        "depth": tree.depth,
        "extra_token_rows": tree.extra_token_rows,
        "mode": tree.mode,
        "build_seconds": round(build_seconds, 3),
    }
    with open(os.path.join(config.out_dir, "index_stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2)
        fh.write("\n")
    print(json.dumps(stats))
    print(f"Tree written to {config.tree_path}")
    return 0


def cmd_train(config, args):
    tree = load_tree(config)
    _, _, split = prepare_data(config)
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "run.conf"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(config))

    if args.ablation:
        table = compare_ablation(config, tree, split)
        path = os.path.join(config.out_dir, "ablation.csv")
        table.to_csv(path, index=False, float_format="%.6f")
        print(table.to_string(index=False))
        print(f"Ablation table written to {path}")
        return 0

    trainer = Trainer(config, tree, split)
    if args.resume:
        trainer.resume(args.resume)
    summary = trainer.fit()
    print(
        f"Best epoch {summary.best_epoch} (valid recall {summary.best_valid:.4f}) after "
        f"{summary.epochs_run} epochs / {summary.steps} steps"
    )
    print(f"Checkpoint: {summary.checkpoint_path}")
    print(f"Log: {summary.log_path}")
    return 0


def cmd_retrieve(config, args):
    tree = load_tree(config)
    _, _, split = prepare_data(config)
    r = config.retrieval
    checkpoint = args.checkpoint or os.path.join(config.out_dir, "best.ckpt")
    retriever = GenerativeRetriever.from_files(
        checkpoint, config.tree_path, beam_size=r.beam_size, top_n=r.top_n, workers=r.workers
    )
    config.check_tree(retriever.tree)
    users = split.eval_users(r.split)
    results = retriever.retrieve_topn({u: split.context[u] for u in users})
    output = args.output or os.path.join(config.out_dir, "results.jsonl")
    write_results(results, output)
    print(f"Retrieved top-{r.top_n} for {len(results)} {r.split} users -> {output}")
    return 0


def cmd_evaluate(config, args):
    _, _, split = prepare_data(config)
    path = args.results or os.path.join(config.out_dir, "results.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"results file not found: {path}")
    results = read_results(path)
    users = split.eval_users(config.retrieval.split)
    table = evaluate_split(results, {u: split.targets[u] for u in users}, config.eval.k_list)
    csv_path, json_path = write_report(table, config.out_dir)
    print(table.to_string(index=False))
    print(f"Report: {csv_path}, {json_path}")
    return 0


def cmd_bench(config, args):
    table = run_benchmark(config.bench, seed=config.seed)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "bench.csv")
    table.to_csv(path, index=False)
    print(table.to_string(index=False))
    print(f"Benchmark written to {path}")
    check_bounds(table)
    return 0


COMMANDS = {
    "build-index": cmd_build_index,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="treegen", description="Tree-identifier generative retrieval")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config document")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", parents=[common], help="build embeddings and the identifier tree")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["balanced", "unbalanced"])
    p.add_argument("--provider", choices=["svd", "random", "file"])
    p.add_argument("--embeddings", help="embedding file (implies --provider file)")
    p.add_argument("--interactions", help="interactions TSV")
    p.add_argument("--synthetic", nargs=2, type=int, metavar=("USERS", "ITEMS"), help="synthesize a Markov corpus")
    p.add_argument("--save-embeddings", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-a", type=float)
    p.add_argument("--lambda-r", type=float)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint with optimizer state")
    p.add_argument("--ablation", action="store_true", help="also train the generation-only variant and compare")

    p = sub.add_parser("retrieve", parents=[common], help="retrieve top-n items per eval user")
    p.add_argument("--checkpoint")
    p.add_argument("--beam", type=int)
    p.add_argument("--top-n", type=int)
    p.add_argument("--split", choices=["valid", "test"])
    p.add_argument("--workers", type=int)
    p.add_argument("--output")

    p = sub.add_parser("evaluate", parents=[common], help="score a results file")
    p.add_argument("--results")
    p.add_argument("--k-list", help="comma-separated cutoffs")
    p.add_argument("--split", choices=["valid", "test"])

    p = sub.add_parser("bench", parents=[common], help="tree depth and beam expansion benchmark")
    p.add_argument("--n-items", help="comma-separated catalog sizes")
    p.add_argument("--k-list", help="comma-separated branch factors")
    p.add_argument("--queries", type=int)
    return parser


_FLAG_KEYS = {
    "seed": "seed",
    "out": "out_dir",
    "k": "tree.k",
    "mode": "tree.mode",
    "provider": "embedding.provider",
    "embeddings": "embedding.path",
    "interactions": "corpus.interactions_path",
    "epochs": "train.max_epochs",
    "lambda_a": "train.lambda_a",
    "lambda_r": "train.lambda_r",
    "beam": "retrieval.beam_size",
    "top_n": "retrieval.top_n",
    "split": "retrieval.split",
    "workers": "retrieval.workers",
    "n_items": "bench.n_items",
    "queries": "bench.queries",
}


def collect_overrides(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "embeddings", None):
        overrides["embedding.provider"] = "file"
    if getattr(args, "synthetic", None):
        overrides["corpus.interactions_path"] = ""
        overrides["corpus.synthetic_users"], overrides["corpus.synthetic_items"] = args.synthetic
    if getattr(args, "k_list", None):
        overrides["bench.k_list" if args.command == "bench" else "eval.k_list"] = args.k_list
    return overrides


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = load_config(args.config, collect_overrides(args))
        return COMMANDS[args.command](config, args)
    except (ConfigError, AssertionError, TrainingDivergedError, NonFiniteError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except (OSError, CorpusFormatError, EmbeddingFormatError, TreeFormatError, CheckpointFormatError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
