"""
Binary checkpoint codec.

Layout (little-endian):

    magic      8 bytes  b"SEATER01"
    n_ints     u32
    n_ints x   name_len u32 | name utf-8 | value i64
    n_blocks   u32
    n_blocks x name_len u32 | name utf-8 | rank u32 | dims u32 * rank | float32 * prod(dims)

Parameter blocks carry the parameter name; Adam moments, when stored, are
blocks named `adam.m/<name>` and `adam.v/<name>`.
"""

import logging
import os
import struct

import numpy as np

from src.config import ModelConfig
from src.model import RetrievalModel

logger = logging.getLogger(__name__)

MAGIC = b"SEATER01"

MANIFEST_KEYS = (
    "n_items", "n_tokens", "k", "depth", "d", "n_layers", "n_heads", "ffn_dim",
    "max_history_len", "dropout_ppm", "adam_step", "epoch",
)


class CheckpointFormatError(ValueError):
    """Unreadable checkpoint, or one that does not fit the identifier tree."""


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _manifest(model, epoch):
    c = model.config
    return {
        "n_items": c.n_items,
        "n_tokens": c.n_tokens,
        "k": c.k,
        "depth": c.depth,
        "d": c.d,
        "n_layers": c.n_layers,
        "n_heads": c.n_heads,
        "ffn_dim": c.ffn_width,
        "max_history_len": c.max_history_len,
        "dropout_ppm": int(round(c.dropout * 1_000_000)),
        "adam_step": model.params.step,
        "epoch": epoch,
    }


def save_checkpoint(path, model, epoch=0, include_optimizer=True):
    """Write model parameters (and Adam state) to `path` atomically."""
    store = model.params
    blocks = [(name, p.data) for name, p in store.items()]
    if include_optimizer:
        blocks += [(f"adam.m/{name}", store.m[name]) for name in store.params]
        blocks += [(f"adam.v/{name}", store.v[name]) for name in store.params]

    manifest = _manifest(model, epoch)
    parts = [MAGIC, struct.pack("<I", len(manifest))]
    for key, value in manifest.items():
        parts.append(_pack_name(key) + struct.pack("<q", int(value)))
    parts.append(struct.pack("<I", len(blocks)))
    for name, values in blocks:
        values = np.asarray(values)
        parts.append(_pack_name(name) + struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.astype("<f4").tobytes())

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)
    logger.debug("Wrote checkpoint %s (%d blocks)", path, len(blocks))


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"{self.path}: bad block name at byte {self.pos}") from None


def read_checkpoint(path):
    """
    Parse a checkpoint file.

    Returns:
        tuple: (manifest dict of ints, dict name -> float64 array).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    reader = _Reader(raw, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    manifest = {}
    (n_ints,) = reader.unpack("<I")
    for _ in range(n_ints):
        key = reader.name()
        (manifest[key],) = reader.unpack("<q")
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise CheckpointFormatError(f"{path}: manifest lacks {', '.join(missing)}")

    blocks = {}
    (n_blocks,) = reader.unpack("<I")
    for _ in range(n_blocks):
        name = reader.name()
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        if not np.all(np.isfinite(values)):
            raise CheckpointFormatError(f"{path}: block {name} has non-finite values")
        blocks[name] = values.astype(np.float64)
    if reader.pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - reader.pos} trailing bytes")
    return manifest, blocks


def model_config_from_manifest(manifest):
    return ModelConfig(
        d=manifest["d"],
        n_layers=manifest["n_layers"],
        n_heads=manifest["n_heads"],
        ffn_dim=manifest["ffn_dim"],
        max_history_len=manifest["max_history_len"],
        dropout=manifest["dropout_ppm"] / 1_000_000,
        n_items=manifest["n_items"],
        n_tokens=manifest["n_tokens"],
        k=manifest["k"],
        depth=manifest["depth"],
    )


def load_checkpoint(path, tree=None, restore_optimizer=False):
    """
    Rebuild a RetrievalModel from a checkpoint.

    Args:
        path (str): checkpoint file.
        tree (IdentifierTree | None): when given, the checkpoint must match it.
        restore_optimizer (bool): also restore Adam moments and step counter.

    Returns:
        tuple: (RetrievalModel in eval mode, manifest dict).

    Raises:
        CheckpointFormatError: malformed file, missing or misshaped blocks, or
            a tree mismatch.
    """
    manifest, blocks = read_checkpoint(path)
    if tree is not None:
        for key in ("n_items", "n_tokens", "k", "depth"):
            if manifest[key] != getattr(tree, key):
                raise CheckpointFormatError(
                    f"{path}: checkpoint {key}={manifest[key]} does not match the tree ({getattr(tree, key)})"
                )
    try:
        model = RetrievalModel(model_config_from_manifest(manifest))
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: {e}") from None

    store = model.params
    for name, param in store.items():
        groups = [(name, param.data)]
        if restore_optimizer:
            groups += [(f"adam.m/{name}", store.m[name]), (f"adam.v/{name}", store.v[name])]
        for block, target in groups:
            if block not in blocks:
                raise CheckpointFormatError(f"{path}: missing block {block}")
            if blocks[block].shape != target.shape:
                raise CheckpointFormatError(
                    f"{path}: block {block} has shape {blocks[block].shape}, expected {target.shape}"
                )
            target[...] = blocks[block]
    if restore_optimizer:
        store.step = manifest["adam_step"]
    logger.info("Loaded checkpoint %s (epoch %d, %d parameters)", path, manifest["epoch"], store.n_parameters())
    return model.eval(), manifest
