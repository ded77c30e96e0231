"""
Encoder-decoder retrieval model.

The encoder reads a user's item history, the decoder reads an identifier
prefix (start token first) with causal self-attention and cross-attention
to the encoder. The next-token distribution at a decoder position is a
softmax over inner products with the embeddings of the legal children only.

One token table E (M x d) serves both sides: rows 0..N-1 are item inputs to
the encoder and leaf tokens to the decoder, row N is the start token, the
rest are internal tree nodes. Blocks are pre-layer-norm transformer blocks.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src import autodiff as ad
from src.autodiff import ParamStore, Tensor

logger = logging.getLogger(__name__)


@dataclass
class EncoderOutput:
    """
    Attributes:
        states (Tensor): (B, T, d) hidden states.
        mask (np.ndarray): (B, T) True at real history positions.
    """

    states: Tensor
    mask: np.ndarray

    def __len__(self):
        return self.states.shape[0]

    def take(self, rows):
        """Select (and repeat) batch rows, keeping gradients flowing."""
        rows = np.asarray(rows, dtype=np.int64)
        return EncoderOutput(ad.getitem(self.states, rows), self.mask[rows])

    def rows(self, b=0):
        """The unmasked (t, d) hidden states of batch row b."""
        return self.states.data[b][self.mask[b]]


@dataclass
class DecoderOutput:
    """
    Attributes:
        states (Tensor): (B, P + 1, d), row i is the state that predicts token i + 1.
    """

    states: Tensor


def _xavier(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class RetrievalModel:
    """
    Attributes:
        config (ModelConfig): dims plus the tree's n_items, n_tokens, k, depth.
        params (ParamStore): all trainable tensors.
        training (bool): dropout active when True.
    """

    def __init__(self, config, seed=0):
        c = config
        if c.d % c.n_heads:
            raise ValueError(f"d={c.d} is not divisible by n_heads={c.n_heads}")
        if c.n_tokens < c.n_items + 1 or c.n_items < 1 or c.depth < 1:
            raise ValueError("model config needs the tree's n_items, n_tokens and depth")
        self.config = c
        self.params = ParamStore()
        self.training = False
        self._rng = np.random.default_rng(seed + 1)
        self._init_params(np.random.default_rng(seed))

    # --- parameters ---

    def _init_params(self, rng):
        c, p = self.config, self.params
        d, f = c.d, c.ffn_width
        p.add("token_emb", rng.normal(0.0, d ** -0.5, size=(c.n_tokens, d)))
        p.add("enc_pos", rng.normal(0.0, 0.02, size=(c.max_history_len, d)))
        p.add("dec_pos", rng.normal(0.0, 0.02, size=(c.depth + 1, d)))
        for side in ("enc", "dec"):
            attns = ("self",) if side == "enc" else ("self", "cross")
            for layer in range(c.n_layers):
                prefix = f"{side}.{layer}"
                for attn in attns:
                    self._add_norm(f"{prefix}.{attn}_ln")
                    for w in ("wq", "wk", "wv", "wo"):
                        p.add(f"{prefix}.{attn}.{w}", _xavier(rng, d, d))
                self._add_norm(f"{prefix}.ffn_ln")
                p.add(f"{prefix}.ffn.w1", _xavier(rng, d, f))
                p.add(f"{prefix}.ffn.b1", np.zeros(f))
                p.add(f"{prefix}.ffn.w2", _xavier(rng, f, d))
                p.add(f"{prefix}.ffn.b2", np.zeros(d))
            self._add_norm(f"{side}.final_ln")
        p.add("w_s", _xavier(rng, d, d))

    def _add_norm(self, name):
        self.params.add(f"{name}.g", np.ones(self.config.d))
        self.params.add(f"{name}.b", np.zeros(self.config.d))

    @property
    def token_embeddings(self):
        return self.params["token_emb"]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # --- building blocks ---

    def _norm(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x):
        return ad.dropout(x, self.config.dropout, self._rng, self.training)

    def _attention(self, name, query, memory, key_mask, causal):
        p, c = self.params, self.config
        b, t, d = query.shape
        s = memory.shape[1]
        h = c.n_heads
        dh = d // h

        def heads(x, length):
            return ad.transpose(ad.reshape(x, (b, length, h, dh)), (0, 2, 1, 3))

        q = heads(query @ p[f"{name}.wq"], t)
        k = heads(memory @ p[f"{name}.wk"], s)
        v = heads(memory @ p[f"{name}.wv"], s)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
        blocked = ~key_mask[:, None, None, :]
        if causal:
            blocked = blocked | np.triu(np.ones((t, s), dtype=bool), k=1)[None, None]
        weights = self._drop(ad.softmax(ad.masked_fill(scores, blocked), axis=-1))
        context = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
        return context @ p[f"{name}.wo"]

    def _ffn(self, name, x):
        p = self.params
        hidden = ad.relu(x @ p[f"{name}.w1"] + p[f"{name}.b1"])
        return self._drop(hidden) @ p[f"{name}.w2"] + p[f"{name}.b2"]

    # --- encoder / decoder ---

    def _pack_histories(self, histories):
        c = self.config
        kept = []
        for history in histories:
            items = list(history)
            if not items:
                raise ValueError("cannot encode an empty history")
            items = items[-c.max_history_len:]
            if min(items) < 0 or max(items) >= c.n_items:
                raise ValueError(f"history item ids must lie in [0, {c.n_items})")
            kept.append(items)
        width = max(len(items) for items in kept)
        ids = np.zeros((len(kept), width), dtype=np.int64)
        mask = np.zeros((len(kept), width), dtype=bool)
        for row, items in enumerate(kept):
            ids[row, :len(items)] = items
            mask[row, :len(items)] = True
        return ids, mask

    def encode_batch(self, histories):
        """
        Encode item histories; each keeps its most recent max_history_len items.

        Returns:
            EncoderOutput: states (B, T, d) right-padded to the longest kept history.
        """
        ids, mask = self._pack_histories(histories)
        p = self.params
        t = ids.shape[1]
        x = ad.embedding_lookup(p["token_emb"], ids) + ad.getitem(p["enc_pos"], slice(0, t))
        x = self._drop(x)
        for layer in range(self.config.n_layers):
            name = f"enc.{layer}"
            normed = self._norm(x, f"{name}.self_ln")
            x = x + self._drop(self._attention(f"{name}.self", normed, normed, mask, causal=False))
            x = x + self._drop(self._ffn(f"{name}.ffn", self._norm(x, f"{name}.ffn_ln")))
        return EncoderOutput(self._norm(x, "enc.final_ln"), mask)

    def encode(self, history):
        """Encode one history: EncoderOutput with a batch of one."""
        return self.encode_batch([history])

    def decode(self, enc, prefixes):
        """
        Decode identifier prefixes against encoder outputs row by row.

        Args:
            enc (EncoderOutput): one row per prefix.
            prefixes: (B, P) token ids; the start token is prepended here.

        Returns:
            DecoderOutput: states (B, P + 1, d).
        """
        c, p = self.config, self.params
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim == 1:
            prefixes = prefixes[None, :]
        b, length = prefixes.shape
        if b != len(enc):
            raise ValueError(f"{b} prefixes for {len(enc)} encoder rows")
        if length > c.depth:
            raise ValueError(f"prefix length {length} exceeds identifier depth {c.depth}")
        if prefixes.size and (prefixes.min() < 0 or prefixes.max() >= c.n_tokens):
            raise ValueError(f"token ids must lie in [0, {c.n_tokens})")
        if not enc.mask.any(axis=1).all():
            raise ValueError("cross-attention needs at least one unmasked encoder position per row")

        tokens = np.concatenate([np.full((b, 1), c.n_items, dtype=np.int64), prefixes], axis=1)
        steps = length + 1
        y = ad.embedding_lookup(p["token_emb"], tokens) + ad.getitem(p["dec_pos"], slice(0, steps))
        y = self._drop(y)
        self_mask = np.ones((b, steps), dtype=bool)
        for layer in range(c.n_layers):
            name = f"dec.{layer}"
            normed = self._norm(y, f"{name}.self_ln")
            y = y + self._drop(self._attention(f"{name}.self", normed, normed, self_mask, causal=True))
            normed = self._norm(y, f"{name}.cross_ln")
            y = y + self._drop(self._attention(f"{name}.cross", normed, enc.states, enc.mask, causal=False))
            y = y + self._drop(self._ffn(f"{name}.ffn", self._norm(y, f"{name}.ffn_ln")))
        return DecoderOutput(self._norm(y, "dec.final_ln"))

    # --- heads ---

    def step_log_probs(self, states, cand_ids, cand_mask):
        """
        Constrained log-softmax at every decoder position.

        Args:
            states (Tensor): (B, T, d) decoder states.
            cand_ids (np.ndarray): (B, T, K) candidate tokens (padded).
            cand_mask (np.ndarray): (B, T, K) True for real candidates.

        Returns:
            Tensor: (B, T, K) log-probabilities; padded slots hold about -1e9.
        """
        b, t, d = states.shape
        width = cand_ids.shape[-1]
        cand = ad.embedding_lookup(self.params["token_emb"], cand_ids)
        logits = ad.reshape(ad.matmul(cand, ad.reshape(states, (b, t, d, 1))), (b, t, width))
        return ad.log_softmax(ad.masked_fill(logits, ~np.asarray(cand_mask, dtype=bool)), axis=-1)

    def step_distribution(self, dec_row, candidates):
        """
        Probabilities over `candidates` for one decoder state.

        Args:
            dec_row: (d,) decoder state (array or Tensor).
            candidates (list[int]): legal next tokens.

        Returns:
            np.ndarray: probabilities summing to 1, aligned with candidates.
        """
        if len(candidates) == 0:
            raise ValueError("empty candidate set")
        ids = np.asarray(candidates, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.config.n_tokens:
            raise ValueError(f"candidate ids must lie in [0, {self.config.n_tokens})")
        row = dec_row if isinstance(dec_row, Tensor) else Tensor(dec_row)
        states = ad.reshape(row, (1, 1, self.config.d))
        logp = self.step_log_probs(states, ids[None, None, :], np.ones((1, 1, len(ids)), dtype=bool))
        return np.exp(logp.data[0, 0])

    def pooled_reps(self, enc, dec):
        """Mean-pooled (z_x, z_y), each (B, d): unmasked encoder rows and all decoder rows."""
        return ad.masked_mean(enc.states, enc.mask), ad.mean(dec.states, axis=1)

    def pair_scores(self, z_x, z_y):
        """
        s = sigmoid(z_x^T W_s z_y) for every candidate representation.

        Args:
            z_x (Tensor): (B, d).
            z_y (Tensor): (B, Q, d).

        Returns:
            Tensor: (B, Q) similarities in (0, 1).
        """
        b, q, d = z_y.shape
        u = ad.reshape(z_x @ self.params["w_s"], (b, d, 1))
        return ad.sigmoid(ad.reshape(ad.matmul(z_y, u), (b, q)))

    def pair_similarity(self, z_x, z_y):
        """Scalar-per-row similarity for (B, d) pairs -> (B,)."""
        b, d = z_y.shape
        return ad.reshape(self.pair_scores(z_x, ad.reshape(z_y, (b, 1, d))), (b,))

    # --- identifier scoring ---

    def identifier_log_probs(self, enc, identifiers, tree):
        """
        Log p(y | x) of full identifiers under forced decoding, one per encoder row.

        Returns:
            np.ndarray: (B,) summed constrained log-probabilities.
        """
        identifiers = np.asarray(identifiers, dtype=np.int64)
        items = identifiers[:, -1]
        cand_ids, cand_mask, target_pos = (a[items] for a in tree.step_candidates)
        dec = self.decode(enc, identifiers[:, :-1])
        logp = self.step_log_probs(dec.states, cand_ids, cand_mask).data
        b, t = target_pos.shape
        picked = logp[np.arange(b)[:, None], np.arange(t)[None, :], target_pos]
        return picked.sum(axis=1)
