"""
Run configuration.

One flat key-value document configures every stage:

    # comments start with '#'
    seed = 7
    out_dir = out/toy
    tree.k = 8
    model.d = 32
    train.lambda_a = 0.05
    eval.k_list = 20,50

Keys are `section.field` (or a top-level field), values are parsed to the
field's type. Command-line flags are applied on top of the document.
"""

import dataclasses
import logging
import os
import re
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - [%(name)s] %(message)s"

# --- CONFIG ---
DEFAULT_OUT_DIR = os.getenv("TREEGEN_OUT_DIR", "out")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def setup_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@dataclass
class CorpusConfig:
    interactions_path: str = ""
    n_items: int = 0  # 0 = infer from the file
    min_history_len: int = 5
    synthetic_users: int = 0
    synthetic_items: int = 0
    synthetic_seed: int = 0
    synthetic_min_len: int = 6
    synthetic_max_len: int = 12


@dataclass
class EmbeddingConfig:
    provider: str = "svd"  # svd | random | file
    path: str = ""
    dim: int = 64
    svd_iters: int = 4


@dataclass
class TreeConfig:
    k: int = 16
    mode: str = "balanced"  # balanced | unbalanced
    path: str = ""  # default: <out_dir>/tree.json
    max_iters: int = 100
    n_init: int = 3


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 1
    n_heads: int = 4
    ffn_dim: int = 0  # 0 = 4 * d
    max_history_len: int = 50
    dropout: float = 0.1
    # filled from the identifier tree
    n_items: int = 0
    n_tokens: int = 0
    k: int = 0
    depth: int = 0

    @property
    def ffn_width(self):
        return self.ffn_dim or 4 * self.d

    def with_tree(self, tree):
        return dataclasses.replace(self, n_items=tree.n_items, n_tokens=tree.n_tokens, k=tree.k, depth=tree.depth)


@dataclass
class TrainConfig:
    lambda_a: float = 0.05
    lambda_r: float = 0.05
    tau: float = 0.07
    q: int = 4
    beta: float = 0.001
    l2_weight: float = 1e-6
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    valid_beam: int = 50
    valid_k: int = 50
    deterministic: bool = True
    prefetch: int = 4
    progress: bool = False


@dataclass
class RetrievalConfig:
    beam_size: int = 50
    top_n: int = 50
    workers: int = 1
    split: str = "test"


@dataclass
class EvalConfig:
    k_list: list = field(default_factory=lambda: [20, 50])


@dataclass
class BenchConfig:
    n_items: list = field(default_factory=lambda: [4096])
    k_list: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    unbalanced_k: list = field(default_factory=lambda: [16])
    queries: int = 20
    beam_size: int = 50
    d: int = 16
    dim: int = 16
    history_len: int = 10
    workers: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = DEFAULT_OUT_DIR
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def tree_path(self):
        return self.tree.path or os.path.join(self.out_dir, "tree.json")

    def set(self, key, raw):
        """Set `section.field` (or a top-level field) from its text form."""
        target, name = self, key
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section '{section}' in key '{key}'")
            target = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields or name in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
        setattr(target, name, _parse_value(fields[name], getattr(target, name), raw, key))

    def validate(self):
        """Cross-field checks run before any compute."""
        m, t = self.model, self.train
        checks = [
            (m.d >= 1 and m.n_heads >= 1 and m.d % m.n_heads == 0, f"model.d={m.d} must be divisible by model.n_heads={m.n_heads}"),
            (m.max_history_len >= 1, "model.max_history_len must be >= 1"),
            (m.n_layers >= 1, "model.n_layers must be >= 1"),
            (0.0 <= m.dropout < 1.0, "model.dropout must be in [0, 1)"),
            (self.tree.k >= 2, "tree.k must be >= 2"),
            (self.tree.mode in ("balanced", "unbalanced"), f"tree.mode must be balanced or unbalanced, got {self.tree.mode}"),
            (self.embedding.provider in ("svd", "random", "file"), f"unknown embedding.provider {self.embedding.provider}"),
            (self.embedding.dim >= 2, "embedding.dim must be >= 2"),
            (t.lambda_a >= 0 and t.lambda_r >= 0, "train.lambda_a and train.lambda_r must be >= 0"),
            (t.tau > 0, "train.tau must be > 0"),
            (t.q >= 1, "train.q must be >= 1"),
            (t.beta > 0, "train.beta must be > 0"),
            (t.l2_weight >= 0, "train.l2_weight must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.patience >= 0, "train.patience must be >= 0"),
            (self.retrieval.beam_size >= self.retrieval.top_n >= 1, "retrieval.beam_size >= retrieval.top_n >= 1 required"),
            (self.retrieval.split in ("valid", "test"), "retrieval.split must be valid or test"),
            (all(k >= 1 for k in self.eval.k_list) and self.eval.k_list, "eval.k_list must hold positive integers"),
            (self.corpus.min_history_len >= 2, "corpus.min_history_len must be >= 2"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def check_tree(self, tree):
        """Reject a tree that disagrees with the configured or checkpointed model."""
        m = self.model
        if tree.k != self.tree.k:
            raise ConfigError(f"tree k={tree.k} but tree.k={self.tree.k} is configured")
        for name, expected in (("n_items", tree.n_items), ("n_tokens", tree.n_tokens), ("k", tree.k), ("depth", tree.depth)):
            value = getattr(m, name)
            if value and value != expected:
                raise ConfigError(f"model.{name}={value} does not match the tree ({expected})")


_INLINE_COMMENT = re.compile(r"(^|\s)#.*$")
_SECTIONS = ("corpus", "embedding", "tree", "model", "train", "retrieval", "eval", "bench")


def _parse_value(f, current, raw, key):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            if f.name == "unbalanced_k" and raw == "":
                return []
            return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text, config=None):
    config = config or RunConfig()
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {line_no}: expected 'key = value', got {stripped!r}")
        key, value = stripped.split("=", 1)
        config.set(key.strip(), _INLINE_COMMENT.sub("", value))
    return config


def load_config(path=None, overrides=None):
    """
    Build a RunConfig from defaults, an optional document, and overrides.

    Args:
        path (str | None): config document path.
        overrides (dict | None): `key -> text value`, applied last (flags win).

    Returns:
        RunConfig: validated configuration.
    """
    config = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            parse_config_text(fh.read(), config)
    for key, value in (overrides or {}).items():
        if value is not None:
            config.set(key, str(value))
    return config.validate()


def dump_config(config):
    """Render a RunConfig back to the flat document format."""
    lines = [f"seed = {config.seed}", f"out_dir = {config.out_dir}"]
    for section in _SECTIONS:
        for f in dataclasses.fields(getattr(config, section)):
            value = getattr(getattr(config, section), f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
