"""Transformer encoder with caller-controlled position ids and attention mask.

Two knobs distinguish this from a textbook encoder, and both exist so that
marker tokens appended at the end of a sequence can impersonate tokens
elsewhere in it:

* position ids are supplied per token and may repeat, so an appended marker
  can share the position embedding of the span boundary it stands for;
* a single T x T boolean attention mask is supplied by the caller and shared
  by every layer and head, so text rows can be walled off from marker rows.

Blocks are post-layernorm residual (attention, then feed-forward, each
followed by add-and-normalize), activations are tanh-approximated GELU, and
position embeddings are learned. There is no CLS/SEP convention and no
segment embeddings: downstream heads read hidden rows at span or marker
offsets, never from a pooled token.

Masked attention is computed by grouping rows that share an identical mask
row, gathering just their visible key/value columns, and running a plain
softmax over that compressed score block. This is mathematically the same as
adding -inf to masked scores, but it never materializes masked columns at
all, so a hidden row's value depends bit-for-bit only on rows it can reach.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import ParameterStore, Tensor


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    """Shape of the encoder stack.

    ``dropout`` is the rate applied to the attention and feed-forward block
    outputs during training; it stays 0.0 unless a caller both raises it and
    passes a generator to :meth:`Encoder.encode`, keeping inference and all
    equivalence tests deterministic.
    """

    vocab_size: int
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 4
    d_ff: int = 1024
    max_position: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_position"):
            if int(getattr(self, field)) <= 0:
                raise ConfigError(f"EncoderConfig.{field} must be positive, got {getattr(self, field)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class MarkedInput:
    """One encoder input: token ids, their position ids, and the shared mask.

    The first ``text_len`` tokens are running text; anything after them is an
    appended marker block. Builders that splice markers directly into the
    text keep ``text_len == len(token_ids)`` with sequential positions and an
    all-true mask, which turns the encoder back into a standard one.
    """

    token_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray
    text_len: int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        t = self.token_ids.shape[0] if self.token_ids.ndim == 1 else -1
        if self.token_ids.ndim != 1 or self.position_ids.shape != (t,):
            raise InputError(
                f"token_ids {self.token_ids.shape} and position_ids "
                f"{self.position_ids.shape} must be equal-length vectors"
            )
        if self.attention_mask.shape != (t, t):
            raise InputError(
                f"attention mask shape {self.attention_mask.shape} does not match "
                f"sequence length {t}"
            )
        if np.any(self.token_ids < 0):
            i = int(np.argmax(self.token_ids < 0))
            raise InputError(f"negative token id at index {i}")
        if np.any(self.position_ids < 0):
            i = int(np.argmax(self.position_ids < 0))
            raise InputError(f"negative position id at index {i}")
        diag = np.diagonal(self.attention_mask)
        if not diag.all():
            i = int(np.argmax(~diag))
            raise InputError(f"attention mask row {i} does not attend to itself")
        if not 0 <= int(self.text_len) <= t:
            raise InputError(f"text_len {self.text_len} outside [0, {t}]")
        self.text_len = int(self.text_len)

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @classmethod
    def plain(cls, token_ids) -> "MarkedInput":
        """Plain text: sequential positions, everything attends to everything."""
        ids = np.asarray(token_ids, dtype=np.int64)
        n = ids.shape[0]
        return cls(
            token_ids=ids,
            position_ids=np.arange(n, dtype=np.int64),
            attention_mask=np.ones((n, n), dtype=bool),
            text_len=n,
        )


def _mask_groups(mask: np.ndarray):
    """Rows sharing a mask pattern, with the gather order to undo grouping.

    Returns ``None`` for an all-true mask (dense fast path), else a list of
    ``(row_indices, visible_columns)`` pairs plus the permutation that maps
    group-concatenated rows back to sequence order.
    """
    if mask.all():
        return None
    uniq, inverse = np.unique(mask, axis=0, return_inverse=True)
    groups = []
    order = []
    for u in range(uniq.shape[0]):
        rows = np.flatnonzero(inverse == u)
        groups.append((rows, np.flatnonzero(uniq[u])))
        order.append(rows)
    perm = np.concatenate(order)
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(perm.size)
    return groups, inv_perm


class Encoder:
    """Stateless encoder: parameters live in a caller-owned ParameterStore.

    Both extraction heads can therefore share one store (joint training) or
    keep separate ones, and checkpointing stays a pure store concern.
    """

    def __init__(self, config: EncoderConfig):
        self.config = config

    # -- parameters ---------------------------------------------------------

    def init_params(self, store: ParameterStore, rng: np.random.Generator,
                    prefix: str = "enc.") -> None:
        """Add freshly initialized encoder weights to ``store`` under ``prefix``."""
        c = self.config
        std = 0.02
        store.add(prefix + "tok_emb", rng.normal(0.0, std, (c.vocab_size, c.d_model)))
        store.add(prefix + "pos_emb", rng.normal(0.0, std, (c.max_position, c.d_model)))
        for i in range(c.n_layers):
            p = f"{prefix}l{i}."
            for name in ("wq", "wk", "wv", "wo"):
                store.add(p + name, rng.normal(0.0, std, (c.d_model, c.d_model)))
            for name in ("bq", "bk", "bv", "bo"):
                store.add(p + name, np.zeros(c.d_model))
            store.add(p + "ln1.gain", np.ones(c.d_model))
            store.add(p + "ln1.bias", np.zeros(c.d_model))
            store.add(p + "w1", rng.normal(0.0, std, (c.d_model, c.d_ff)))
            store.add(p + "b1", np.zeros(c.d_ff))
            store.add(p + "w2", rng.normal(0.0, std, (c.d_ff, c.d_model)))
            store.add(p + "b2", np.zeros(c.d_model))
            store.add(p + "ln2.gain", np.ones(c.d_model))
            store.add(p + "ln2.bias", np.zeros(c.d_model))

    def param_names(self, prefix: str = "enc.") -> list[str]:
        """Names init_params would create, in creation order (optimizer grouping)."""
        c = self.config
        names = [prefix + "tok_emb", prefix + "pos_emb"]
        for i in range(c.n_layers):
            p = f"{prefix}l{i}."
            names += [p + n for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
                                      "ln1.gain", "ln1.bias", "w1", "b1", "w2", "b2",
                                      "ln2.gain", "ln2.bias")]
        return names

    # -- forward ------------------------------------------------------------

    def encode(self, inp: MarkedInput, store: ParameterStore, prefix: str = "enc.",
               dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Contextualize ``inp``, honoring its position ids and attention mask.

        Returns a (T, d_model) tensor. Raises :class:`InputError` naming the
        offending index if a token id or position id is out of range.
        """
        c = self.config
        if len(inp) == 0:
            raise InputError("cannot encode an empty sequence")
        self._check_range(inp.token_ids, c.vocab_size, "token id")
        self._check_range(inp.position_ids, c.max_position, "position id")

        x = T.add(
            T.gather_rows(store[prefix + "tok_emb"], inp.token_ids),
            T.gather_rows(store[prefix + "pos_emb"], inp.position_ids),
        )
        groups = _mask_groups(inp.attention_mask)
        for i in range(c.n_layers):
            p = f"{prefix}l{i}."
            attn = self._attention(x, store, p, groups)
            attn = self._dropout(attn, dropout_rng)
            x = T.layer_norm(T.add(x, attn), store[p + "ln1.gain"], store[p + "ln1.bias"])
            ffn = self._ffn(x, store, p)
            ffn = self._dropout(ffn, dropout_rng)
            x = T.layer_norm(T.add(x, ffn), store[p + "ln2.gain"], store[p + "ln2.bias"])
        return x

    def _check_range(self, ids: np.ndarray, limit: int, what: str) -> None:
        bad = np.nonzero(ids >= limit)[0]
        if bad.size:
            i = int(bad[0])
            raise InputError(f"{what} {int(ids[i])} at index {i} is outside [0, {limit})")

    def _dropout(self, h: Tensor, rng: np.random.Generator | None) -> Tensor:
        rate = self.config.dropout
        if rng is None or rate == 0.0:
            return h
        keep = 1.0 - rate
        mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
        return T.mul(h, Tensor(mask))

    def _split_heads(self, h: Tensor, rows: int) -> Tensor:
        c = self.config
        return T.transpose(T.reshape(h, (rows, c.n_heads, c.d_head)), (1, 0, 2))

    def _merge_heads(self, h: Tensor, rows: int) -> Tensor:
        c = self.config
        return T.reshape(T.transpose(h, (1, 0, 2)), (rows, c.d_model))

    def _attention(self, x: Tensor, store: ParameterStore, p: str, groups) -> Tensor:
        c = self.config
        t_len = x.shape[0]
        q = T.add(T.matmul(x, store[p + "wq"]), store[p + "bq"])
        k = T.add(T.matmul(x, store[p + "wk"]), store[p + "bk"])
        v = T.add(T.matmul(x, store[p + "wv"]), store[p + "bv"])
        inv_scale = 1.0 / math.sqrt(c.d_head)

        if groups is None:
            q3, k3, v3 = (self._split_heads(h, t_len) for h in (q, k, v))
            scores = T.scale(T.matmul(q3, T.transpose(k3, (0, 2, 1))), inv_scale)
            ctx = T.matmul(T.softmax(scores), v3)
            merged = self._merge_heads(ctx, t_len)
        else:
            group_list, inv_perm = groups
            outs = []
            for rows, cols in group_list:
                q3 = self._split_heads(T.gather_rows(q, rows), rows.size)
                k3 = self._split_heads(T.gather_rows(k, cols), cols.size)
                v3 = self._split_heads(T.gather_rows(v, cols), cols.size)
                scores = T.scale(T.matmul(q3, T.transpose(k3, (0, 2, 1))), inv_scale)
                ctx = T.matmul(T.softmax(scores), v3)
                outs.append(self._merge_heads(ctx, rows.size))
            stacked = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
            merged = T.gather_rows(stacked, inv_perm)
        return T.add(T.matmul(merged, store[p + "wo"]), store[p + "bo"])

    def _ffn(self, x: Tensor, store: ParameterStore, p: str) -> Tensor:
        h = T.gelu(T.add(T.matmul(x, store[p + "w1"]), store[p + "b1"]))
        return T.add(T.matmul(h, store[p + "w2"]), store[p + "b2"])


def reachability_closure(mask, n_layers: int) -> np.ndarray:
    """Which tokens can influence which outputs after ``n_layers`` masked layers.

    Boolean power (I | mask)^n_layers: entry [i, j] is true iff information
    can flow from input token j to output row i. Residual connections supply
    the implicit identity.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"reachability mask must be square, got shape {m.shape}")
    if n_layers < 0:
        raise ConfigError(f"n_layers must be non-negative, got {n_layers}")
    base = (m | np.eye(m.shape[0], dtype=bool)).astype(np.uint8)
    out = np.eye(m.shape[0], dtype=np.uint8)
    for _ in range(int(n_layers)):
        out = ((out @ base) > 0).astype(np.uint8)
    return out.astype(bool)
