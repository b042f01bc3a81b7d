"""Pairwise relation classification with marker tokens.

For an ordered (subject, object) span pair, marker tokens are spliced into
the window text around the two spans; the encoder runs over the marked
sequence and the classifier reads the hidden vectors at the two *opening*
markers. Marker tokens are fresh vocabulary rows, optionally typed by the
argument's entity class, so the pair's types enter at the input layer.

Six input-feature variants are supported:

* TEXT           - no markers; span representations of the two arguments
                   plus their elementwise product
* TEXT_ETYPE     - TEXT plus learned entity-type embeddings
* MARKERS        - untyped markers
* MARKERS_ETYPE  - untyped markers plus type embeddings
* MARKERS_ELOSS  - untyped markers plus an auxiliary entity-type loss read
                   off the marker vectors
* TYPED_MARKERS  - markers carry the entity type; the default and strongest

Training always sums cross-entropies over *all ordered pairs* of distinct
gold entities in a sentence, labelling unrelated pairs with the null class.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import ContextWindow, Vocabulary
from .encoder import Encoder, EncoderConfig, MarkedInput
from .entity import (
    NULL_LABEL,
    EntityLabelSet,
    Span,
    span_representation_batch,
)
from .errors import ConfigError, InputError, UsageError
from .tensor import ParameterStore, Tensor


class FeatureMode(enum.Enum):
    TEXT = "text"
    TEXT_ETYPE = "text_etype"
    MARKERS = "markers"
    MARKERS_ETYPE = "markers_etype"
    MARKERS_ELOSS = "markers_eloss"
    TYPED_MARKERS = "typed_markers"

    @classmethod
    def from_string(cls, name: str) -> "FeatureMode":
        try:
            return cls(name.lower())
        except ValueError:
            options = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown feature mode {name!r} (choose from {options})") \
                from None

    @property
    def uses_markers(self) -> bool:
        return self in (FeatureMode.MARKERS, FeatureMode.MARKERS_ETYPE,
                        FeatureMode.MARKERS_ELOSS, FeatureMode.TYPED_MARKERS)

    @property
    def typed_markers(self) -> bool:
        return self is FeatureMode.TYPED_MARKERS

    @property
    def uses_type_embeddings(self) -> bool:
        return self in (FeatureMode.TEXT_ETYPE, FeatureMode.MARKERS_ETYPE)

    @property
    def uses_aux_entity_loss(self) -> bool:
        return self is FeatureMode.MARKERS_ELOSS


@dataclasses.dataclass(frozen=True)
class RelationLabelSet:
    """Ordered relation types; null class at index 0; optional symmetric flags."""

    relation_types: tuple[str, ...]
    symmetric: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "relation_types", tuple(self.relation_types))
        object.__setattr__(self, "symmetric", frozenset(self.symmetric))
        if len(set(self.relation_types)) != len(self.relation_types):
            raise ConfigError("duplicate relation type names")
        if NULL_LABEL in self.relation_types:
            raise ConfigError(f"the null label {NULL_LABEL!r} cannot be a declared type")
        unknown = self.symmetric - set(self.relation_types)
        if unknown:
            raise ConfigError(f"symmetric flags for unknown types: {sorted(unknown)}")

    @property
    def num_classes(self) -> int:
        return len(self.relation_types) + 1

    def index(self, name: str) -> int:
        if name == NULL_LABEL:
            return 0
        try:
            return self.relation_types.index(name) + 1
        except ValueError:
            raise InputError(f"unknown relation type {name!r}") from None

    def name(self, idx: int) -> str:
        if idx == 0:
            return NULL_LABEL
        if not 1 <= idx < self.num_classes:
            raise InputError(f"relation class index {idx} outside [0, {self.num_classes})")
        return self.relation_types[idx - 1]

    def is_symmetric(self, name: str) -> bool:
        return name in self.symmetric


class MarkerVocabulary:
    """Marker token ids appended to a text vocabulary.

    Four untyped markers plus four per entity type; the null type gets its
    own quad when ``include_null`` is set (needed when classifying pruned
    spans whose entity type may be the null class).
    """

    _ROLES = ("S", "O")

    def __init__(self, vocab: Vocabulary, entity_types: Sequence[str],
                 include_null: bool = True):
        self.vocab = vocab
        self.include_null = include_null
        self._typed_types = tuple(entity_types) + ((NULL_LABEL,) if include_null else ())
        # Reuse ids when the vocabulary already carries the markers (e.g. a
        # vocabulary rebuilt from a checkpointed id list).
        reg = lambda tok: vocab.lookup(tok) if tok in vocab else vocab.add_special(tok)
        self._open: dict[tuple[str, str | None], int] = {}
        self._close: dict[tuple[str, str | None], int] = {}
        for role in self._ROLES:
            self._open[(role, None)] = reg(f"<{role}>")
            self._close[(role, None)] = reg(f"</{role}>")
        for etype in self._typed_types:
            for role in self._ROLES:
                self._open[(role, etype)] = reg(f"<{role}:{etype}>")
                self._close[(role, etype)] = reg(f"</{role}:{etype}>")

    @property
    def typed_count(self) -> int:
        return 4 * len(self._typed_types)

    def all_ids(self) -> list[int]:
        return sorted(set(self._open.values()) | set(self._close.values()))

    def open_close(self, role: str, etype: str | None) -> tuple[int, int]:
        """(opening, closing) marker ids for a role; ``etype=None`` = untyped."""
        try:
            return self._open[(role, etype)], self._close[(role, etype)]
        except KeyError:
            raise InputError(f"no {role!r} marker for entity type {etype!r}") from None

    def pair_ids(self, subject_type: str | None, object_type: str | None):
        return self.open_close("S", subject_type), self.open_close("O", object_type)


@dataclasses.dataclass(frozen=True)
class RelationModelConfig:
    mode: FeatureMode = FeatureMode.TYPED_MARKERS
    type_emb_dim: int = 150
    width_emb_dim: int = 150
    max_span_len: int = 8
    ffnn_hidden: int = 150

    def __post_init__(self):
        if not isinstance(self.mode, FeatureMode):
            raise ConfigError(f"mode must be a FeatureMode, got {self.mode!r}")
        for field in ("type_emb_dim", "width_emb_dim", "max_span_len", "ffnn_hidden"):
            if int(getattr(self, field)) <= 0:
                raise ConfigError(f"RelationModelConfig.{field} must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mode"] = self.mode.value
        return out


@dataclasses.dataclass(frozen=True)
class RelationCandidate:
    """One ordered (subject, object) pair of same-sentence spans."""

    subject: Span
    subject_type: str
    object: Span
    object_type: str
    window: ContextWindow | None = None

    def __post_init__(self):
        if (self.subject.start, self.subject.end) == (self.object.start, self.object.end):
            raise InputError("subject and object are the same span")
        if self.subject.sentence_index != self.object.sentence_index:
            raise InputError("relation candidates must stay within one sentence")


@dataclasses.dataclass(frozen=True)
class MarkedPairInput:
    """Marker-inserted encoder input plus where the opening markers landed."""

    marked: MarkedInput
    subject_open: int
    object_open: int


def insert_typed_markers(window_ids, subject: Span, object_: Span,
                         subject_markers: tuple[int, int],
                         object_markers: tuple[int, int]) -> MarkedPairInput:
    """Splice 4 marker ids around two (window-coordinate) spans.

    Output length is n + 4 with sequential positions and a full attention
    mask. Shared boundaries nest deterministically: at one insertion point
    closings come before openings, openings order subject-first, closings
    object-first. Deleting the markers reproduces the input exactly.
    """
    ids = np.asarray(window_ids, dtype=np.int64)
    n = ids.shape[0]
    for name, span in (("subject", subject), ("object", object_)):
        if span.end >= n:
            raise InputError(f"{name} span [{span.start}, {span.end}] outside "
                             f"window of {n} tokens")
    if (subject.start, subject.end) == (object_.start, object_.end):
        raise InputError("subject and object are the same span")

    # (insertion point, 0=closing/1=opening, tie rank, marker id, tag)
    events = sorted([
        (subject.start, 1, 0, subject_markers[0], "S"),
        (subject.end + 1, 0, 1, subject_markers[1], None),
        (object_.start, 1, 1, object_markers[0], "O"),
        (object_.end + 1, 0, 0, object_markers[1], None),
    ], key=lambda e: e[:3])

    out: list[int] = []
    opens = {}
    ei = 0
    for point in range(n + 1):
        while ei < len(events) and events[ei][0] == point:
            _, _, _, marker_id, tag = events[ei]
            if tag:
                opens[tag] = len(out)
            out.append(int(marker_id))
            ei += 1
        if point < n:
            out.append(int(ids[point]))
    return MarkedPairInput(MarkedInput.plain(out), opens["S"], opens["O"])


# ---------------------------------------------------------------------------
# pair representations and the classifier head
# ---------------------------------------------------------------------------


def marker_pair_representation(hidden: Tensor, subject_open, object_open) -> Tensor:
    """(P, 2*d_model): opening-marker hidden vectors, subject then object."""
    subj = T.gather_rows(hidden, np.asarray(subject_open, dtype=np.int64))
    obj = T.gather_rows(hidden, np.asarray(object_open, dtype=np.int64))
    return T.concat([subj, obj], axis=-1)


def text_pair_representation(hidden: Tensor, subjects: Sequence[Span],
                             objects: Sequence[Span], width_embeddings: Tensor,
                             offset: int = 0) -> Tensor:
    """(P, 3*(2*d_model + d_W)): [h_i; h_j; h_i * h_j] span-pair features."""
    hi = span_representation_batch(hidden, subjects, width_embeddings, offset)
    hj = span_representation_batch(hidden, objects, width_embeddings, offset)
    return T.concat([hi, hj, T.mul(hi, hj)], axis=-1)


def append_type_embeddings(rep: Tensor, subject_idx, object_idx,
                           type_embeddings: Tensor) -> Tensor:
    """Concatenate psi(subject type) and psi(object type) onto each pair row."""
    subj = T.gather_rows(type_embeddings, np.asarray(subject_idx, dtype=np.int64))
    obj = T.gather_rows(type_embeddings, np.asarray(object_idx, dtype=np.int64))
    return T.concat([rep, subj, obj], axis=-1)


def relation_logits(rep: Tensor, store: ParameterStore, prefix: str = "rel.") -> Tensor:
    return T.add(T.matmul(rep, store[prefix + "out_w"]), store[prefix + "out_b"])


def relation_loss(logits: Tensor, targets) -> Tensor:
    """Sum of per-pair cross-entropies; zero pairs contribute a zero loss."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[0] == 0:
        return T.Tensor(0.0)
    return T.cross_entropy(logits, targets)


def gold_pair_candidates(entities: Sequence[tuple[Span, str]],
                         window: ContextWindow | None = None
                         ) -> list[RelationCandidate]:
    """All ordered pairs of distinct gold entities, in enumeration order."""
    cands = []
    for i, (si, ti) in enumerate(entities):
        for j, (sj, tj) in enumerate(entities):
            if i != j:
                cands.append(RelationCandidate(si, ti, sj, tj, window))
    return cands


def relation_pair_targets(candidates: Sequence[RelationCandidate],
                          relations: Sequence[tuple[Span, Span, str]],
                          labels: RelationLabelSet) -> np.ndarray:
    """Class index per candidate; pairs with no gold relation get the null class."""
    gold = {(a, b): labels.index(t) for a, b, t in relations}
    return np.fromiter(
        (gold.get((c.subject, c.object), 0) for c in candidates),
        dtype=np.int64, count=len(candidates),
    )


def _aux_entity_logits(vecs: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    h = T.relu(T.add(T.matmul(vecs, store[prefix + "aux_w1"]), store[prefix + "aux_b1"]))
    h = T.relu(T.add(T.matmul(h, store[prefix + "aux_w2"]), store[prefix + "aux_b2"]))
    return T.add(T.matmul(h, store[prefix + "aux_out_w"]), store[prefix + "aux_out_b"])


class RelationModel:
    """Encoder plus a mode-dependent pair classifier over one parameter store."""

    def __init__(self, encoder_config: EncoderConfig, config: RelationModelConfig,
                 entity_labels: EntityLabelSet, relation_labels: RelationLabelSet,
                 markers: MarkerVocabulary,
                 rng: np.random.Generator | None = None,
                 store: ParameterStore | None = None,
                 enc_prefix: str = "enc.", head_prefix: str = "rel."):
        if encoder_config.vocab_size != len(markers.vocab):
            raise ConfigError(
                f"encoder vocab_size {encoder_config.vocab_size} != vocabulary size "
                f"{len(markers.vocab)} (markers must be registered before the encoder)"
            )
        self.encoder = Encoder(encoder_config)
        self.config = config
        self.entity_labels = entity_labels
        self.relation_labels = relation_labels
        self.markers = markers
        self.enc_prefix = enc_prefix
        self.head_prefix = head_prefix
        if store is None:
            store = ParameterStore()
            if rng is None:
                rng = np.random.default_rng(0)
            self.encoder.init_params(store, rng, enc_prefix)
            self.init_head(store, rng)
        elif rng is not None:
            self.init_head(store, rng)
        self.store = store

    # -- parameters ----------------------------------------------------------

    def rep_dim(self) -> int:
        d = self.encoder.config.d_model
        cfg = self.config
        if cfg.mode.uses_markers:
            base = 2 * d
        else:
            base = 3 * (2 * d + cfg.width_emb_dim)
        if cfg.mode.uses_type_embeddings:
            base += 2 * cfg.type_emb_dim
        return base

    def init_head(self, store: ParameterStore, rng: np.random.Generator) -> None:
        cfg = self.config
        p = self.head_prefix
        std = 0.02
        store.add(p + "out_w", rng.normal(0.0, std, (self.rep_dim(),
                                                     self.relation_labels.num_classes)))
        store.add(p + "out_b", np.zeros(self.relation_labels.num_classes))
        if not cfg.mode.uses_markers:
            store.add(p + "width_emb", rng.normal(0.0, std, (cfg.max_span_len,
                                                             cfg.width_emb_dim)))
        if cfg.mode.uses_type_embeddings:
            store.add(p + "type_emb", rng.normal(0.0, std,
                                                 (self.entity_labels.num_classes,
                                                  cfg.type_emb_dim)))
        if cfg.mode.uses_aux_entity_loss:
            d = self.encoder.config.d_model
            h = cfg.ffnn_hidden
            ce = self.entity_labels.num_classes
            store.add(p + "aux_w1", rng.normal(0.0, std, (d, h)))
            store.add(p + "aux_b1", np.zeros(h))
            store.add(p + "aux_w2", rng.normal(0.0, std, (h, h)))
            store.add(p + "aux_b2", np.zeros(h))
            store.add(p + "aux_out_w", rng.normal(0.0, std, (h, ce)))
            store.add(p + "aux_out_b", np.zeros(ce))

    def head_param_names(self) -> list[str]:
        cfg = self.config
        p = self.head_prefix
        names = [p + "out_w", p + "out_b"]
        if not cfg.mode.uses_markers:
            names.append(p + "width_emb")
        if cfg.mode.uses_type_embeddings:
            names.append(p + "type_emb")
        if cfg.mode.uses_aux_entity_loss:
            names += [p + n for n in ("aux_w1", "aux_b1", "aux_w2", "aux_b2",
                                      "aux_out_w", "aux_out_b")]
        return names

    def encoder_param_names(self) -> list[str]:
        return self.encoder.param_names(self.enc_prefix)

    # -- candidate plumbing ----------------------------------------------------

    def window_ids(self, window: ContextWindow) -> np.ndarray:
        return self.markers.vocab.encode(window.tokens)

    def _marker_types(self, cand: RelationCandidate) -> tuple[str | None, str | None]:
        if self.config.mode.typed_markers:
            return cand.subject_type, cand.object_type
        return None, None

    def marked_input(self, window: ContextWindow,
                     cand: RelationCandidate) -> MarkedPairInput:
        if not self.config.mode.uses_markers:
            raise UsageError(f"mode {self.config.mode.value} does not insert markers")
        subj_t, obj_t = self._marker_types(cand)
        subj_ids, obj_ids = self.markers.pair_ids(subj_t, obj_t)
        off = window.target_offset
        shift = lambda s: Span(s.start + off, s.end + off)
        return insert_typed_markers(self.window_ids(window),
                                    shift(cand.subject), shift(cand.object),
                                    subj_ids, obj_ids)

    def _type_indices(self, cands: Sequence[RelationCandidate]):
        subj = [self.entity_labels.index(c.subject_type) for c in cands]
        obj = [self.entity_labels.index(c.object_type) for c in cands]
        return subj, obj

    # -- forward ---------------------------------------------------------------

    def forward_window(self, window: ContextWindow,
                       cands: Sequence[RelationCandidate],
                       dropout_rng: np.random.Generator | None = None):
        """Logits (P, |types|+1) for candidates of one window, plus any aux
        entity logits as a (subject, object) pair of (P, |etypes|+1) tensors."""
        cfg = self.config
        if len(cands) == 0:
            zero = Tensor(np.zeros((0, self.relation_labels.num_classes)))
            return zero, None
        if cfg.mode.uses_markers:
            subj_rows, obj_rows = [], []
            for cand in cands:
                mpi = self.marked_input(window, cand)
                hidden = self.encoder.encode(mpi.marked, self.store,
                                             self.enc_prefix, dropout_rng)
                subj_rows.append(T.gather_rows(hidden, [mpi.subject_open]))
                obj_rows.append(T.gather_rows(hidden, [mpi.object_open]))
            subj = subj_rows[0] if len(subj_rows) == 1 else T.concat(subj_rows, axis=0)
            obj = obj_rows[0] if len(obj_rows) == 1 else T.concat(obj_rows, axis=0)
            rep = T.concat([subj, obj], axis=-1)
            aux = None
            if cfg.mode.uses_aux_entity_loss:
                aux = (_aux_entity_logits(subj, self.store, self.head_prefix),
                       _aux_entity_logits(obj, self.store, self.head_prefix))
        else:
            ids = self.window_ids(window)
            hidden = self.encoder.encode(MarkedInput.plain(ids), self.store,
                                         self.enc_prefix, dropout_rng)
            rep = text_pair_representation(
                hidden, [c.subject for c in cands], [c.object for c in cands],
                self.store[self.head_prefix + "width_emb"], window.target_offset)
            aux = None
        if cfg.mode.uses_type_embeddings:
            subj_idx, obj_idx = self._type_indices(cands)
            rep = append_type_embeddings(rep, subj_idx, obj_idx,
                                         self.store[self.head_prefix + "type_emb"])
        return relation_logits(rep, self.store, self.head_prefix), aux

    def loss_window(self, window: ContextWindow,
                    cands: Sequence[RelationCandidate], targets,
                    dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Relation loss over one window's candidates; MARKERS_ELOSS adds the
        auxiliary entity-type cross-entropy on both marker vectors."""
        logits, aux = self.forward_window(window, cands, dropout_rng)
        loss = relation_loss(logits, targets)
        if aux is not None and len(cands):
            subj_t = np.fromiter((self.entity_labels.index(c.subject_type)
                                  for c in cands), dtype=np.int64, count=len(cands))
            obj_t = np.fromiter((self.entity_labels.index(c.object_type)
                                 for c in cands), dtype=np.int64, count=len(cands))
            loss = T.add(loss, T.add(T.cross_entropy(aux[0], subj_t),
                                     T.cross_entropy(aux[1], obj_t)))
        return loss

    def predict_window(self, window: ContextWindow,
                       entities: Sequence[tuple[Span, str]]
                       ) -> list[tuple[Span, Span, str]]:
        """Argmax relation per ordered pair of distinct entities; null omitted."""
        cands = gold_pair_candidates(entities, window)
        if not cands:
            return []
        with T.no_grad():
            logits, _ = self.forward_window(window, cands)
        best = np.argmax(logits.data, axis=1)
        return [(c.subject, c.object, self.relation_labels.name(int(k)))
                for c, k in zip(cands, best) if k != 0]
