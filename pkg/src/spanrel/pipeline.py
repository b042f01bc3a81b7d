"""End-to-end prediction and corpus-level evaluation.

Runs the two-stage pipeline (entity spans first, relations over the
predicted spans) over whole documents, producing copies annotated with
``predicted_entities`` / ``predicted_relations`` in the same shapes as the
gold fields — so prediction files stay loadable and diffable with the
ordinary corpus tooling.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .approx import DEFAULT_TOKEN_BUDGET, predict_relations_approx
from .corpus import AnnotatedDocument, Vocabulary, make_window
from .encoder import MarkedInput
from .entity import EntityModel, enumerate_spans
from .errors import DataError, UsageError
from .metrics import MetricsReport, full_report
from .relation import RelationModel

__all__ = [
    "PREDICT_MODES",
    "predict_document",
    "predict_corpus",
    "evaluate_corpus",
    "compare_predictions",
]

PREDICT_MODES = ("full", "approx")


def predict_document(entity_model: EntityModel, relation_model: RelationModel,
                     vocab: Vocabulary, doc: AnnotatedDocument,
                     window_size: int = 100, mode: str = "full",
                     token_budget: int = DEFAULT_TOKEN_BUDGET) -> AnnotatedDocument:
    """A copy of ``doc`` with predictions attached; gold fields untouched."""
    if mode not in PREDICT_MODES:
        raise UsageError(f"unknown predict mode {mode!r} "
                         f"(choose from {', '.join(PREDICT_MODES)})")
    pred_entities = []
    pred_relations = []
    for s_idx, sentence in enumerate(doc.sentences):
        window = make_window(doc, s_idx, window_size)
        inp = MarkedInput.plain(vocab.encode(window.tokens))
        spans = enumerate_spans(len(sentence),
                                entity_model.config.max_span_len,
                                sentence_index=s_idx)
        ents = entity_model.predict(inp, spans, offset=window.target_offset)
        pred_entities.append(ents)
        if mode == "approx":
            rels = predict_relations_approx(relation_model, window, ents,
                                            token_budget)
        else:
            rels = relation_model.predict_window(window, ents)
        pred_relations.append(rels)
    return dataclasses.replace(doc, predicted_entities=pred_entities,
                               predicted_relations=pred_relations)


def predict_corpus(entity_model: EntityModel, relation_model: RelationModel,
                   vocab: Vocabulary, docs: Sequence[AnnotatedDocument],
                   window_size: int = 100, mode: str = "full",
                   token_budget: int = DEFAULT_TOKEN_BUDGET,
                   max_workers: int = 1) -> list[AnnotatedDocument]:
    """Predict every document; the models are read-only, so documents may be
    processed by a small thread pool."""
    run = lambda doc: predict_document(entity_model, relation_model, vocab,
                                       doc, window_size, mode, token_budget)
    if max_workers <= 1:
        return [run(doc) for doc in docs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, docs))


def _require_predictions(doc: AnnotatedDocument) -> None:
    if doc.predicted_entities is None or doc.predicted_relations is None:
        raise DataError(f"document {doc.doc_key!r} carries no predictions")


def _paired(pred_docs: Sequence[AnnotatedDocument],
            gold_docs: Sequence[AnnotatedDocument]):
    gold_by_key = {d.doc_key: d for d in gold_docs}
    if len(gold_by_key) != len(gold_docs):
        raise DataError("gold corpus has duplicate doc keys")
    for pred in pred_docs:
        gold = gold_by_key.pop(pred.doc_key, None)
        if gold is None:
            raise DataError(f"prediction doc {pred.doc_key!r} has no gold "
                            f"counterpart")
        if gold.sentences != pred.sentences:
            raise DataError(f"doc {pred.doc_key!r}: prediction and gold "
                            f"sentences differ")
        yield pred, gold
    if gold_by_key:
        missing = sorted(gold_by_key)
        raise DataError(f"gold docs missing from predictions: {missing}")


def evaluate_corpus(pred_docs: Sequence[AnnotatedDocument],
                    gold_docs: Sequence[AnnotatedDocument],
                    symmetric_types: Sequence[str] = ()) -> MetricsReport:
    """Micro-averaged Ent / Rel / Rel+ over doc-key-matched corpora."""
    pred_ent, gold_ent, pred_rel, gold_rel = [], [], [], []
    for pred, gold in _paired(pred_docs, gold_docs):
        _require_predictions(pred)
        for s_idx in range(len(gold.sentences)):
            p_ents = pred.predicted_entities[s_idx]
            types = dict(p_ents)
            pred_ent.append(p_ents)
            gold_ent.append(gold.entities[s_idx])
            pred_rel.append([
                (subj, types.get(subj, ""), obj, types.get(obj, ""), rtype)
                for subj, obj, rtype in pred.predicted_relations[s_idx]
            ])
            gold_rel.append(gold.relations[s_idx])
    return full_report(pred_ent, gold_ent, pred_rel, gold_rel, symmetric_types)


def compare_predictions(docs_a: Sequence[AnnotatedDocument],
                        docs_b: Sequence[AnnotatedDocument]) -> dict:
    """How far two prediction runs agree, as sets of predicted instances.

    Agreement is the Jaccard overlap (1.0 when both runs predict nothing);
    entities and relations are reported separately.
    """
    ents_a, ents_b = set(), set()
    rels_a, rels_b = set(), set()
    for a, b in _paired(docs_a, docs_b):
        _require_predictions(a)
        _require_predictions(b)
        for s_idx in range(len(a.sentences)):
            key = (a.doc_key, s_idx)
            ents_a.update((key, sp, t) for sp, t in a.predicted_entities[s_idx])
            ents_b.update((key, sp, t) for sp, t in b.predicted_entities[s_idx])
            rels_a.update((key, s, o, t) for s, o, t in a.predicted_relations[s_idx])
            rels_b.update((key, s, o, t) for s, o, t in b.predicted_relations[s_idx])

    def jaccard(x, y):
        return 1.0 if not x and not y else len(x & y) / len(x | y)

    return {
        "entity_agreement": jaccard(ents_a, ents_b),
        "relation_agreement": jaccard(rels_a, rels_b),
        "relations_first": len(rels_a),
        "relations_second": len(rels_b),
        "relations_shared": len(rels_a & rels_b),
    }
