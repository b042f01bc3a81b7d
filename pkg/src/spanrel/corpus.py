"""JSON-lines corpora: loading, windowing, vocabulary, and synthetic data.

The on-disk format is one document per line:

    {"doc_key": "...", "sentences": [[tok, ...], ...],
     "ner": [[[s, e, type], ...], ...],
     "relations": [[[s1, e1, s2, e2, type], ...], ...]}

``ner`` and ``relations`` hold one list per sentence; span indices are
document-level and inclusive. Prediction files may additionally carry
``predicted_ner`` / ``predicted_relations`` with the same shapes. In memory
everything is sentence-local: a span's indices count from its own sentence
start, which is what the models and the scorer work with.

Loading validates hard (errors name the line and field) and then drops gold
entities wider than the configured span limit — plus any relations citing
them — with a warning, so training targets stay representable.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from typing import Iterable, Mapping, Sequence

import numpy as np

from .entity import Span
from .errors import ConfigError, DataError, InputError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_REQUIRED_FIELDS = ("doc_key", "sentences", "ner", "relations")
_OPTIONAL_FIELDS = ("predicted_ner", "predicted_relations")

Entity = tuple[Span, str]
Relation = tuple[Span, Span, str]


@dataclasses.dataclass
class AnnotatedDocument:
    """One document with per-sentence, sentence-local annotations."""

    doc_key: str
    sentences: list[list[str]]
    entities: list[list[Entity]]
    relations: list[list[Relation]]
    predicted_entities: list[list[Entity]] | None = None
    predicted_relations: list[list[Relation]] | None = None

    def sentence_offsets(self) -> list[int]:
        offsets = [0]
        for sent in self.sentences:
            offsets.append(offsets[-1] + len(sent))
        return offsets[:-1]

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def all_tokens(self) -> list[str]:
        return [tok for sent in self.sentences for tok in sent]

    def gold_entity_map(self, sentence_index: int) -> dict[Span, str]:
        return dict(self.entities[sentence_index])


@dataclasses.dataclass(frozen=True)
class ContextWindow:
    """A target sentence plus surrounding document context."""

    tokens: tuple[str, ...]
    target_offset: int
    target_len: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.target_len < 1:
            raise InputError(f"window target length {self.target_len} must be >= 1")
        if not 0 <= self.target_offset <= len(self.tokens) - self.target_len:
            raise InputError(
                f"target [{self.target_offset}, {self.target_offset + self.target_len})"
                f" not contained in window of {len(self.tokens)} tokens"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def target_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.target_offset:self.target_offset + self.target_len]


def make_window(doc: AnnotatedDocument, sentence_index: int,
                window_size: int) -> ContextWindow:
    """Center ``window_size`` document tokens on one sentence.

    The sentence keeps all its tokens; the leftover budget splits floor-left /
    remainder-right and truncates at document boundaries without borrowing
    from the other side. A window smaller than the sentence degrades to the
    bare sentence with a warning.
    """
    if not 0 <= sentence_index < len(doc.sentences):
        raise InputError(f"sentence index {sentence_index} outside document "
                         f"{doc.doc_key!r}")
    offsets = doc.sentence_offsets()
    start = offsets[sentence_index]
    n = len(doc.sentences[sentence_index])
    all_tokens = doc.all_tokens()
    if window_size < n:
        warnings.warn(
            f"window size {window_size} is smaller than sentence of {n} tokens "
            f"({doc.doc_key!r}); using the bare sentence"
        )
        left = right = 0
    else:
        spare = window_size - n
        want_left = spare // 2
        left = min(want_left, start)
        right = min(spare - want_left, len(all_tokens) - start - n)
    return ContextWindow(
        tokens=tuple(all_tokens[start - left:start + n + right]),
        target_offset=left,
        target_len=n,
    )


class Vocabulary:
    """Closed token vocabulary: PAD=0, UNK=1, text tokens, then specials.

    Special (marker) tokens are appended after the text vocabulary, so their
    ids never collide with text ids. ``encode`` maps unknown text to UNK;
    ``lookup`` is strict and is what marker plumbing uses.
    """

    def __init__(self, text_tokens: Iterable[str]):
        self._tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self._ids: dict[str, int] = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for tok in text_tokens:
            if tok in self._ids:
                raise ConfigError(f"duplicate vocabulary token {tok!r}")
            self._ids[tok] = len(self._tokens)
            self._tokens.append(tok)
        self._text_size = len(self._tokens)

    @classmethod
    def from_corpus(cls, docs: Sequence[AnnotatedDocument]) -> "Vocabulary":
        seen = {tok for doc in docs for sent in doc.sentences for tok in sent}
        seen.discard(PAD_TOKEN)
        seen.discard(UNK_TOKEN)
        return cls(sorted(seen))

    @classmethod
    def from_id_list(cls, tokens: Sequence[str], text_size: int) -> "Vocabulary":
        """Rebuild from a checkpointed token list (id order)."""
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise DataError("vocabulary list must start with the PAD and UNK tokens")
        if not 2 <= text_size <= len(tokens):
            raise DataError(f"text_size {text_size} outside [2, {len(tokens)}]")
        vocab = cls(tokens[2:text_size])
        for tok in tokens[text_size:]:
            vocab.add_special(tok)
        return vocab

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def text_size(self) -> int:
        return self._text_size

    def add_special(self, token: str) -> int:
        """Append a marker token after the text vocabulary; returns its id."""
        if token in self._ids:
            raise ConfigError(f"special token {token!r} already in vocabulary")
        self._ids[token] = len(self._tokens)
        self._tokens.append(token)
        return self._ids[token]

    def lookup(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise InputError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        unk = self._ids[UNK_TOKEN]
        return np.fromiter((self._ids.get(t, unk) for t in tokens), dtype=np.int64)

    def id_list(self) -> list[str]:
        return list(self._tokens)


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------


def _err(lineno: int, field: str, msg: str) -> DataError:
    return DataError(f"line {lineno}: {field}: {msg}")


def _parse_span(raw, lineno: int, field: str, offsets: list[int],
                sentences: list[list[str]], k: int) -> Span:
    s, e = raw
    if not (isinstance(s, int) and isinstance(e, int)):
        raise _err(lineno, field, f"span indices must be integers, got {raw!r}")
    lo = offsets[k]
    hi = lo + len(sentences[k])
    if not lo <= s <= e < hi:
        raise _err(lineno, field,
                   f"span [{s}, {e}] outside sentence {k} (tokens [{lo}, {hi}))")
    return Span(s - lo, e - lo, sentence_index=k)


def _parse_entity_lists(raw, lineno, field_name, offsets, sentences,
                        entity_types, allow_duplicates):
    if not isinstance(raw, list) or len(raw) != len(sentences):
        raise _err(lineno, field_name,
                   f"expected {len(sentences)} per-sentence lists")
    parsed: list[list[Entity]] = []
    for k, group in enumerate(raw):
        if not isinstance(group, list):
            raise _err(lineno, f"{field_name}[{k}]", "expected a list")
        seen: set[tuple[int, int]] = set()
        row: list[Entity] = []
        for j, entry in enumerate(group):
            field = f"{field_name}[{k}][{j}]"
            if not isinstance(entry, list) or len(entry) != 3:
                raise _err(lineno, field, f"expected [start, end, type], got {entry!r}")
            span = _parse_span(entry[:2], lineno, field, offsets, sentences, k)
            label = entry[2]
            if not isinstance(label, str) or not label:
                raise _err(lineno, field, f"bad entity type {label!r}")
            if entity_types is not None and label not in entity_types:
                raise _err(lineno, field, f"unknown entity type {label!r}")
            if (span.start, span.end) in seen and not allow_duplicates:
                raise _err(lineno, field, f"duplicate span [{entry[0]}, {entry[1]}]")
            seen.add((span.start, span.end))
            row.append((span, label))
        parsed.append(row)
    return parsed


def _parse_relation_lists(raw, lineno, field_name, offsets, sentences,
                          relation_types, ner_spans):
    if not isinstance(raw, list) or len(raw) != len(sentences):
        raise _err(lineno, field_name,
                   f"expected {len(sentences)} per-sentence lists")
    parsed: list[list[Relation]] = []
    for k, group in enumerate(raw):
        if not isinstance(group, list):
            raise _err(lineno, f"{field_name}[{k}]", "expected a list")
        row: list[Relation] = []
        for j, entry in enumerate(group):
            field = f"{field_name}[{k}][{j}]"
            if not isinstance(entry, list) or len(entry) != 5:
                raise _err(lineno, field,
                           f"expected [s1, e1, s2, e2, type], got {entry!r}")
            span1 = _parse_span(entry[0:2], lineno, field, offsets, sentences, k)
            span2 = _parse_span(entry[2:4], lineno, field, offsets, sentences, k)
            label = entry[4]
            if not isinstance(label, str) or not label:
                raise _err(lineno, field, f"bad relation type {label!r}")
            if relation_types is not None and label not in relation_types:
                raise _err(lineno, field, f"unknown relation type {label!r}")
            if span1 == span2:
                raise _err(lineno, field, "relation arguments are the same span")
            if ner_spans is not None:
                for span in (span1, span2):
                    if (span.start, span.end) not in ner_spans[k]:
                        raise _err(lineno, field,
                                   f"argument span [{span.start + offsets[k]}, "
                                   f"{span.end + offsets[k]}] absent from ner")
            row.append((span1, span2, label))
        parsed.append(row)
    return parsed


def _parse_document(raw, lineno: int, entity_types, relation_types,
                    max_span_len: int):
    if not isinstance(raw, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for field in _REQUIRED_FIELDS:
        if field not in raw:
            raise DataError(f"line {lineno}: missing field {field!r}")
    for field in raw:
        if field not in _REQUIRED_FIELDS + _OPTIONAL_FIELDS:
            raise DataError(f"line {lineno}: unknown field {field!r}")
    if not isinstance(raw["doc_key"], str):
        raise _err(lineno, "doc_key", "must be a string")
    sentences = raw["sentences"]
    if (not isinstance(sentences, list) or not sentences
            or not all(isinstance(s, list) and s and all(isinstance(t, str) for t in s)
                       for s in sentences)):
        raise _err(lineno, "sentences", "expected non-empty lists of token strings")

    doc_stub = AnnotatedDocument(raw["doc_key"], sentences, [], [])
    offsets = doc_stub.sentence_offsets()

    entities = _parse_entity_lists(raw["ner"], lineno, "ner", offsets, sentences,
                                   entity_types, allow_duplicates=False)
    ner_spans = [{(sp.start, sp.end) for sp, _ in row} for row in entities]
    relations = _parse_relation_lists(raw["relations"], lineno, "relations",
                                      offsets, sentences, relation_types, ner_spans)

    dropped_entities = 0
    dropped_relations = 0
    kept_entities: list[list[Entity]] = []
    kept_relations: list[list[Relation]] = []
    for k in range(len(sentences)):
        keep = [(sp, t) for sp, t in entities[k] if sp.width <= max_span_len]
        dropped_entities += len(entities[k]) - len(keep)
        survivors = {(sp.start, sp.end) for sp, _ in keep}
        rels = [r for r in relations[k]
                if (r[0].start, r[0].end) in survivors
                and (r[1].start, r[1].end) in survivors]
        dropped_relations += len(relations[k]) - len(rels)
        kept_entities.append(keep)
        kept_relations.append(rels)

    predicted_entities = None
    predicted_relations = None
    if "predicted_ner" in raw:
        predicted_entities = _parse_entity_lists(
            raw["predicted_ner"], lineno, "predicted_ner", offsets, sentences,
            entity_types, allow_duplicates=True)
    if "predicted_relations" in raw:
        predicted_relations = _parse_relation_lists(
            raw["predicted_relations"], lineno, "predicted_relations", offsets,
            sentences, relation_types, ner_spans=None)

    doc = AnnotatedDocument(raw["doc_key"], sentences, kept_entities,
                            kept_relations, predicted_entities, predicted_relations)
    return doc, dropped_entities, dropped_relations


def load_corpus(path, entity_types: Iterable[str] | None = None,
                relation_types: Iterable[str] | None = None,
                max_span_len: int = 8) -> list[AnnotatedDocument]:
    """Parse and validate a JSON-lines corpus file.

    ``entity_types`` / ``relation_types``, when given, close the label sets:
    any other label is a :class:`DataError`. Gold entities wider than
    ``max_span_len`` (and relations citing them) are dropped with one summary
    warning.
    """
    entity_types = set(entity_types) if entity_types is not None else None
    relation_types = set(relation_types) if relation_types is not None else None
    docs = []
    dropped_e = dropped_r = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON: {exc}") from None
            doc, de, dr = _parse_document(raw, lineno, entity_types,
                                          relation_types, max_span_len)
            docs.append(doc)
            dropped_e += de
            dropped_r += dr
    if dropped_e:
        warnings.warn(
            f"{path}: dropped {dropped_e} gold entities wider than "
            f"{max_span_len} tokens and {dropped_r} relations citing them"
        )
    return docs


def _entities_to_json(rows: list[list[Entity]], offsets: list[int]):
    return [[[sp.start + offsets[k], sp.end + offsets[k], label]
             for sp, label in row] for k, row in enumerate(rows)]


def _relations_to_json(rows: list[list[Relation]], offsets: list[int]):
    return [[[a.start + offsets[k], a.end + offsets[k],
              b.start + offsets[k], b.end + offsets[k], label]
             for a, b, label in row] for k, row in enumerate(rows)]


def document_to_json(doc: AnnotatedDocument) -> dict:
    offsets = doc.sentence_offsets()
    out = {
        "doc_key": doc.doc_key,
        "sentences": doc.sentences,
        "ner": _entities_to_json(doc.entities, offsets),
        "relations": _relations_to_json(doc.relations, offsets),
    }
    if doc.predicted_entities is not None:
        out["predicted_ner"] = _entities_to_json(doc.predicted_entities, offsets)
    if doc.predicted_relations is not None:
        out["predicted_relations"] = _relations_to_json(doc.predicted_relations, offsets)
    return out


def save_corpus(docs: Sequence[AnnotatedDocument], path) -> None:
    """Write JSON-lines; loading the result reproduces ``docs`` exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_json(doc), separators=(",", ":")))
            fh.write("\n")


def collect_types(docs: Sequence[AnnotatedDocument]) -> tuple[list[str], list[str]]:
    """Sorted entity and relation type inventories present in the corpus."""
    ents = {label for doc in docs for row in doc.entities for _, label in row}
    rels = {label for doc in docs for row in doc.relations for *_, label in row}
    return sorted(ents), sorted(rels)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Template:
    """A sentence pattern: literal tokens and ``{TYPE}`` mention slots.

    ``relations`` name (subject_slot, object_slot, type) triples by the
    zero-based order slots appear in the pattern.
    """

    pattern: tuple[str, ...]
    relations: tuple[tuple[int, int, str], ...] = ()
    weight: float = 1.0

    def slot_types(self) -> list[str]:
        return [item[1:-1] for item in self.pattern
                if item.startswith("{") and item.endswith("}")]


@dataclasses.dataclass(frozen=True)
class SyntheticGrammar:
    """Lexicons plus templates; relation labels are functions of the surface.

    Every relation in the generated data is fully determined by the entity
    types and the trigger tokens standing between the two mentions, so a
    rule-based reader can reach perfect accuracy and a learned model has no
    irreducible error.
    """

    entity_lexicons: Mapping[str, tuple[str, ...]]
    templates: tuple[Template, ...]
    max_sentences_per_doc: int = 3

    def __post_init__(self):
        if len(self.entity_lexicons) < 2:
            raise ConfigError("synthetic grammar needs at least 2 entity types")
        if not self.relation_types:
            raise ConfigError("synthetic grammar needs at least 1 relation type")
        for template in self.templates:
            for slot_type in template.slot_types():
                if slot_type not in self.entity_lexicons:
                    raise ConfigError(f"template slot {{{slot_type}}} has no lexicon")
            n_slots = len(template.slot_types())
            for subj, obj, _ in template.relations:
                if not (0 <= subj < n_slots and 0 <= obj < n_slots and subj != obj):
                    raise ConfigError(f"bad relation slots ({subj}, {obj}) in "
                                      f"template {template.pattern}")

    @property
    def entity_types(self) -> list[str]:
        return sorted(self.entity_lexicons)

    @property
    def relation_types(self) -> list[str]:
        return sorted({r for t in self.templates for _, _, r in t.relations})


# Both relation types live on the same PER -> ORG type pair, so the pair's
# entity types never determine the label on their own; the trigger tokens
# between the mentions do. The two-clause templates put a WORKS_AT pair and a
# FOUNDED pair in one sentence, where their cross pairs (same type signature,
# trigger words of both kinds in between) must come out unrelated.
DEFAULT_GRAMMAR = SyntheticGrammar(
    entity_lexicons={
        "PER": ("alice", "bob", "carol", "dan", "erin", "frank", "grace",
                "henry", "dr smith", "dr jones"),
        "ORG": ("acme", "globex", "initech", "umbrella", "hooli",
                "stark labs", "wayne corp"),
        "LOC": ("paris", "london", "tokyo", "berlin", "oslo",
                "new york", "fort knox"),
    },
    templates=(
        Template(("{PER}", "works", "at", "{ORG}", "."),
                 relations=((0, 1, "WORKS_AT"),)),
        Template(("{ORG}", "hired", "{PER}", "."),
                 relations=((1, 0, "WORKS_AT"),)),
        Template(("{PER}", "founded", "{ORG}", "."),
                 relations=((0, 1, "FOUNDED"),)),
        Template(("{ORG}", "was", "founded", "by", "{PER}", "."),
                 relations=((1, 0, "FOUNDED"),)),
        Template(("{PER}", "founded", "{ORG}", "and", "{PER}", "works",
                  "at", "{ORG}", "."),
                 relations=((0, 1, "FOUNDED"), (2, 3, "WORKS_AT"))),
        Template(("{PER}", "works", "at", "{ORG}", "and", "{PER}",
                  "founded", "{ORG}", "."),
                 relations=((0, 1, "WORKS_AT"), (2, 3, "FOUNDED"))),
        Template(("{PER}", "visited", "{LOC}", "."), weight=0.75),
        Template(("{PER}", "and", "{PER}", "toured", "{LOC}", "."), weight=0.75),
        Template(("{PER}", ",", "{PER}", ",", "{PER}", "and", "{PER}",
                  "work", "at", "{ORG}", "."),
                 relations=((0, 4, "WORKS_AT"), (1, 4, "WORKS_AT"),
                            (2, 4, "WORKS_AT"), (3, 4, "WORKS_AT")),
                 weight=0.75),
    ),
)


def _fill_template(template: Template, grammar: SyntheticGrammar,
                   rng: np.random.Generator):
    tokens: list[str] = []
    mentions: list[Entity] = []
    for item in template.pattern:
        if item.startswith("{") and item.endswith("}"):
            etype = item[1:-1]
            lexicon = grammar.entity_lexicons[etype]
            mention = lexicon[int(rng.integers(len(lexicon)))].split()
            start = len(tokens)
            tokens.extend(mention)
            mentions.append((Span(start, len(tokens) - 1), etype))
        else:
            tokens.append(item)
    relations = [(mentions[s][0], mentions[o][0], rtype)
                 for s, o, rtype in template.relations]
    return tokens, mentions, relations


def generate_synthetic(seed: int, size: int,
                       grammar: SyntheticGrammar | None = None
                       ) -> list[AnnotatedDocument]:
    """``size`` deterministic documents drawn from the template grammar."""
    if grammar is None:
        grammar = DEFAULT_GRAMMAR
    if size < 0:
        raise ConfigError(f"corpus size must be non-negative, got {size}")
    rng = np.random.default_rng(seed)
    weights = np.array([t.weight for t in grammar.templates], dtype=np.float64)
    probs = weights / weights.sum()
    docs = []
    for i in range(size):
        n_sent = int(rng.integers(1, grammar.max_sentences_per_doc + 1))
        sentences, entities, relations = [], [], []
        for k in range(n_sent):
            template = grammar.templates[int(rng.choice(len(grammar.templates),
                                                        p=probs))]
            tokens, mentions, rels = _fill_template(template, grammar, rng)
            sentences.append(tokens)
            entities.append([(Span(sp.start, sp.end, sentence_index=k), t)
                             for sp, t in mentions])
            relations.append([(Span(a.start, a.end, sentence_index=k),
                               Span(b.start, b.end, sentence_index=k), t)
                              for a, b, t in rels])
        docs.append(AnnotatedDocument(f"synth-{i:04d}", sentences, entities,
                                      relations))
    return docs


def jackknife_folds(docs: Sequence[AnnotatedDocument], k: int = 10
                    ) -> list[tuple[list[AnnotatedDocument], list[AnnotatedDocument]]]:
    """k (train, holdout) splits; fold i holds out documents with index % k == i."""
    if k < 2:
        raise ConfigError(f"jackknifing needs k >= 2, got {k}")
    if len(docs) < k:
        raise DataError(f"need at least {k} documents for {k}-way jackknifing, "
                        f"got {len(docs)}")
    folds = []
    for i in range(k):
        holdout = [d for j, d in enumerate(docs) if j % k == i]
        train = [d for j, d in enumerate(docs) if j % k != i]
        folds.append((train, holdout))
    return folds
