"""Span enumeration and span-level entity classification.

A sentence of n tokens yields every span of width 1..L (inclusive indices).
Each span is represented by concatenating the contextual vectors of its start
and end tokens with a learned width embedding, and a two-layer ReLU network
followed by a linear projection scores it against the entity types plus a
null class. The null class lives at index 0 everywhere; spans whose argmax is
the null class are simply not predicted.

Training minimizes the *sum* of per-span cross-entropies over all enumerated
spans, gold-labelled spans carrying their type and everything else the null
class.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, MarkedInput
from .errors import ConfigError, InputError
from .tensor import ParameterStore, Tensor

# The implicit "not an entity / no relation" class, index 0 of every label set.
NULL_LABEL = "ε"


@dataclasses.dataclass(frozen=True, order=True)
class Span:
    """Inclusive token span within one sentence."""

    start: int
    end: int
    sentence_index: int = 0

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise InputError(f"bad span [{self.start}, {self.end}]")

    @property
    def width(self) -> int:
        return self.end - self.start + 1


@dataclasses.dataclass(frozen=True)
class EntityLabelSet:
    """Ordered entity types; the null class is implicit at index 0."""

    entity_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ConfigError("duplicate entity type names")
        if NULL_LABEL in self.entity_types:
            raise ConfigError(f"the null label {NULL_LABEL!r} cannot be a declared type")
        if any(not t for t in self.entity_types):
            raise ConfigError("empty entity type name")

    @property
    def num_classes(self) -> int:
        return len(self.entity_types) + 1

    def index(self, name: str) -> int:
        if name == NULL_LABEL:
            return 0
        try:
            return self.entity_types.index(name) + 1
        except ValueError:
            raise InputError(f"unknown entity type {name!r}") from None

    def name(self, idx: int) -> str:
        if idx == 0:
            return NULL_LABEL
        if not 1 <= idx < self.num_classes:
            raise InputError(f"entity class index {idx} outside [0, {self.num_classes})")
        return self.entity_types[idx - 1]


@dataclasses.dataclass(frozen=True)
class EntityModelConfig:
    max_span_len: int = 8
    width_emb_dim: int = 150
    ffnn_hidden: int = 150

    def __post_init__(self):
        for field in ("max_span_len", "width_emb_dim", "ffnn_hidden"):
            if int(getattr(self, field)) <= 0:
                raise ConfigError(f"EntityModelConfig.{field} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def enumerate_spans(sentence_len: int, max_span_len: int,
                    sentence_index: int = 0) -> list[Span]:
    """All spans of width up to ``max_span_len``, ordered by (start, end)."""
    if sentence_len < 0:
        raise InputError(f"negative sentence length {sentence_len}")
    spans = []
    for start in range(sentence_len):
        stop = min(sentence_len, start + max_span_len)
        for end in range(start, stop):
            spans.append(Span(start, end, sentence_index))
    return spans


def num_spans(sentence_len: int, max_span_len: int) -> int:
    """Closed form: sum over widths w=1..min(L,n) of (n - w + 1)."""
    w_max = min(max_span_len, sentence_len)
    return sum(sentence_len - w + 1 for w in range(1, w_max + 1))


def _span_bounds_arrays(spans: Sequence[Span], hidden_len: int, offset: int,
                        max_width: int):
    starts = np.fromiter((s.start + offset for s in spans), dtype=np.int64,
                         count=len(spans))
    ends = np.fromiter((s.end + offset for s in spans), dtype=np.int64,
                       count=len(spans))
    widths = np.fromiter((s.width for s in spans), dtype=np.int64, count=len(spans))
    if len(spans):
        if starts.min() < 0 or ends.max() >= hidden_len:
            bad = next(s for s in spans
                       if s.start + offset < 0 or s.end + offset >= hidden_len)
            raise InputError(
                f"span [{bad.start}, {bad.end}] (+offset {offset}) outside "
                f"hidden states of length {hidden_len}"
            )
        if widths.max() > max_width:
            bad = next(s for s in spans if s.width > max_width)
            raise InputError(
                f"span [{bad.start}, {bad.end}] wider than max width {max_width}"
            )
    return starts, ends, widths


def span_representation_batch(hidden: Tensor, spans: Sequence[Span],
                              width_embeddings: Tensor, offset: int = 0) -> Tensor:
    """(S, 2*d_model + d_W) stack of [x_start; x_end; width_emb[width-1]].

    ``offset`` shifts sentence-local span indices into the hidden-state rows
    (text preceding the sentence inside a context window).
    """
    starts, ends, widths = _span_bounds_arrays(
        spans, hidden.shape[0], offset, width_embeddings.shape[0])
    return T.concat([
        T.gather_rows(hidden, starts),
        T.gather_rows(hidden, ends),
        T.gather_rows(width_embeddings, widths - 1),
    ], axis=-1)


def span_representation(hidden: Tensor, span: Span, width_embeddings: Tensor,
                        offset: int = 0) -> Tensor:
    """Single-span convenience wrapper around the batched form."""
    rep = span_representation_batch(hidden, [span], width_embeddings, offset)
    return T.reshape(rep, (rep.shape[1],))


def init_entity_head(store: ParameterStore, rng: np.random.Generator,
                     d_model: int, config: EntityModelConfig, num_classes: int,
                     prefix: str = "ent.") -> None:
    in_dim = 2 * d_model + config.width_emb_dim
    h = config.ffnn_hidden
    std = 0.02
    store.add(prefix + "width_emb", rng.normal(0.0, std, (config.max_span_len,
                                                          config.width_emb_dim)))
    store.add(prefix + "w1", rng.normal(0.0, std, (in_dim, h)))
    store.add(prefix + "b1", np.zeros(h))
    store.add(prefix + "w2", rng.normal(0.0, std, (h, h)))
    store.add(prefix + "b2", np.zeros(h))
    store.add(prefix + "out_w", rng.normal(0.0, std, (h, num_classes)))
    store.add(prefix + "out_b", np.zeros(num_classes))


def entity_head_param_names(prefix: str = "ent.") -> list[str]:
    return [prefix + n for n in ("width_emb", "w1", "b1", "w2", "b2", "out_w", "out_b")]


def entity_forward(hidden: Tensor, spans: Sequence[Span], store: ParameterStore,
                   prefix: str = "ent.", offset: int = 0) -> Tensor:
    """Logits (|spans|, |types|+1); class 0 is the null class."""
    reps = span_representation_batch(hidden, spans, store[prefix + "width_emb"],
                                     offset)
    h = T.relu(T.add(T.matmul(reps, store[prefix + "w1"]), store[prefix + "b1"]))
    h = T.relu(T.add(T.matmul(h, store[prefix + "w2"]), store[prefix + "b2"]))
    return T.add(T.matmul(h, store[prefix + "out_w"]), store[prefix + "out_b"])


def gold_span_targets(spans: Sequence[Span], gold: Mapping[Span, str],
                      labels: EntityLabelSet) -> np.ndarray:
    """Class index per enumerated span; spans absent from ``gold`` get class 0."""
    return np.fromiter(
        (labels.index(gold[s]) if s in gold else 0 for s in spans),
        dtype=np.int64, count=len(spans),
    )


def entity_loss(logits: Tensor, targets) -> Tensor:
    """Sum (not mean) of per-span cross-entropies."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[0] == 0:
        return T.Tensor(0.0)
    return T.cross_entropy(logits, targets)


def predict_entities(logits: Tensor, spans: Sequence[Span],
                     labels: EntityLabelSet) -> list[tuple[Span, str]]:
    """Spans whose argmax class is non-null, with the type name.

    np.argmax breaks ties toward the lowest index, so an exact tie with the
    null class stays unpredicted.
    """
    if len(spans) == 0:
        return []
    best = np.argmax(logits.data, axis=1)
    return [(s, labels.name(int(c))) for s, c in zip(spans, best) if c != 0]


def top_lambda_spans(logits: Tensor, spans: Sequence[Span], lam: float,
                     sentence_len: int) -> list[Span]:
    """The ceil(lam * n) spans with the highest best-non-null logit.

    Result ordered by score descending, ties by (start, end). Used to prune
    relation candidates to plausible entity mentions.
    """
    if lam <= 0:
        raise ConfigError(f"span-pruning fraction must be positive, got {lam}")
    keep = min(len(spans), math.ceil(lam * sentence_len))
    scores = logits.data[:, 1:].max(axis=1)
    ranked = sorted(range(len(spans)),
                    key=lambda i: (-scores[i], spans[i].start, spans[i].end))
    return [spans[i] for i in ranked[:keep]]


class EntityModel:
    """Encoder plus span-classification head over a shared parameter store."""

    def __init__(self, encoder_config: EncoderConfig, config: EntityModelConfig,
                 labels: EntityLabelSet, rng: np.random.Generator | None = None,
                 store: ParameterStore | None = None,
                 enc_prefix: str = "enc.", head_prefix: str = "ent."):
        self.encoder = Encoder(encoder_config)
        self.config = config
        self.labels = labels
        self.enc_prefix = enc_prefix
        self.head_prefix = head_prefix
        if store is None:
            store = ParameterStore()
            if rng is None:
                rng = np.random.default_rng(0)
            self.encoder.init_params(store, rng, enc_prefix)
            init_entity_head(store, rng, encoder_config.d_model, config,
                             labels.num_classes, head_prefix)
        elif rng is not None:
            init_entity_head(store, rng, encoder_config.d_model, config,
                             labels.num_classes, head_prefix)
        self.store = store

    def encoder_param_names(self) -> list[str]:
        return self.encoder.param_names(self.enc_prefix)

    def head_param_names(self) -> list[str]:
        return entity_head_param_names(self.head_prefix)

    def encode(self, inp: MarkedInput,
               dropout_rng: np.random.Generator | None = None) -> Tensor:
        return self.encoder.encode(inp, self.store, self.enc_prefix, dropout_rng)

    def forward(self, inp: MarkedInput, spans: Sequence[Span], offset: int = 0,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
        hidden = self.encode(inp, dropout_rng)
        return entity_forward(hidden, spans, self.store, self.head_prefix, offset)

    def loss(self, inp: MarkedInput, spans: Sequence[Span], gold: Mapping[Span, str],
             offset: int = 0,
             dropout_rng: np.random.Generator | None = None) -> Tensor:
        logits = self.forward(inp, spans, offset, dropout_rng)
        return entity_loss(logits, gold_span_targets(spans, gold, self.labels))

    def predict(self, inp: MarkedInput, spans: Sequence[Span],
                offset: int = 0) -> list[tuple[Span, str]]:
        with T.no_grad():
            logits = self.forward(inp, spans, offset)
        return predict_entities(logits, spans, self.labels)
