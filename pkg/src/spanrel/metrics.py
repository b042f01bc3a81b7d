"""Micro-averaged P/R/F1 for entities and relations.

Entity credit requires exact (start, end, type). Relation credit comes in
two strengths: boundary scoring (both argument spans and the relation type
correct) and strict scoring, which additionally requires the *predicted*
entity type of both arguments to match gold. Relation types flagged
symmetric match in either argument order; such items are put in a canonical
order (lower span first) before counting so reversed duplicates collapse.

All scores are micro-averages: counts accumulate over every unit (document
or sentence list) before any division. 0/0 is defined as 0 throughout.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Mapping, Sequence

from .entity import Span
from .errors import InputError

# (span, entity_type)
EntityItem = tuple[Span, str]
# (subject, subject_type, object, object_type, relation_type)
PredictedRelation = tuple[Span, str, Span, str, str]
# (subject, object, relation_type)
GoldRelation = tuple[Span, Span, str]


@dataclasses.dataclass(frozen=True)
class PRF:
    num_pred: int
    num_gold: int
    num_correct: int

    @property
    def precision(self) -> float:
        return self.num_correct / self.num_pred if self.num_pred else 0.0

    @property
    def recall(self) -> float:
        return self.num_correct / self.num_gold if self.num_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.num_pred + other.num_pred,
                   self.num_gold + other.num_gold,
                   self.num_correct + other.num_correct)


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    ent: PRF
    rel: PRF
    relplus: PRF

    def to_json(self) -> dict:
        """Flat fixed-key record (ent_p ... relplus_f1 plus raw counts)."""
        out = {}
        for tag, prf in (("ent", self.ent), ("rel", self.rel),
                         ("relplus", self.relplus)):
            out[f"{tag}_p"] = prf.precision
            out[f"{tag}_r"] = prf.recall
            out[f"{tag}_f1"] = prf.f1
            out[f"{tag}_pred"] = prf.num_pred
            out[f"{tag}_gold"] = prf.num_gold
            out[f"{tag}_correct"] = prf.num_correct
        return out


def _check_parallel(pred: Sequence, gold: Sequence, what: str) -> None:
    if len(pred) != len(gold):
        raise InputError(f"{what}: {len(pred)} prediction units vs "
                         f"{len(gold)} gold units")


def score_entities(pred: Sequence[Iterable[EntityItem]],
                   gold: Sequence[Iterable[EntityItem]]) -> PRF:
    """Micro-averaged exact-match entity scores over parallel units."""
    _check_parallel(pred, gold, "entity scoring")
    totals = PRF(0, 0, 0)
    for p_unit, g_unit in zip(pred, gold):
        p = {(span, t) for span, t in p_unit}
        g = {(span, t) for span, t in g_unit}
        totals = totals + PRF(len(p), len(g), len(p & g))
    return totals


def _canonical(subj: Span, subj_t: str, obj: Span, obj_t: str, rtype: str,
               symmetric: frozenset) -> tuple:
    if rtype in symmetric and (obj, obj_t) < (subj, subj_t):
        return obj, obj_t, subj, subj_t, rtype
    return subj, subj_t, obj, obj_t, rtype


def score_relations(pred: Sequence[Iterable[PredictedRelation]],
                    gold_rel: Sequence[Iterable[GoldRelation]],
                    gold_ent: Sequence[Iterable[EntityItem]],
                    strict: bool = False,
                    symmetric_flags: Iterable[str] = ()) -> PRF:
    """Micro-averaged relation scores over parallel units.

    Boundary credit needs (subject span, object span, type) to match gold;
    ``strict`` additionally compares each argument's predicted entity type
    with the gold type of that span.
    """
    _check_parallel(pred, gold_rel, "relation scoring")
    _check_parallel(gold_rel, gold_ent, "relation scoring (gold entities)")
    symmetric = frozenset(symmetric_flags)
    totals = PRF(0, 0, 0)
    for p_unit, g_unit, ge_unit in zip(pred, gold_rel, gold_ent):
        gold_types: Mapping[Span, str] = dict(ge_unit)
        g = set()
        for subj, obj, rtype in g_unit:
            c = _canonical(subj, gold_types.get(subj, ""), obj,
                           gold_types.get(obj, ""), rtype, symmetric)
            g.add((c[0], c[2], c[4]))
        # A prediction is one boundary claim; duplicates collapse onto the
        # (subject, object, type) triple no matter what argument types they
        # carried, so recall can never exceed 1.
        p: dict[tuple, set] = {}
        for item in p_unit:
            subj, subj_t, obj, obj_t, rtype = _canonical(*item, symmetric)
            p.setdefault((subj, obj, rtype), set()).add((subj_t, obj_t))
        correct = 0
        for (subj, obj, rtype), type_pairs in p.items():
            if (subj, obj, rtype) not in g:
                continue
            if strict and not any(gold_types.get(subj) == st
                                  and gold_types.get(obj) == ot
                                  for st, ot in type_pairs):
                continue
            correct += 1
        totals = totals + PRF(len(p), len(g), correct)
    return totals


def full_report(pred_ent, gold_ent, pred_rel, gold_rel,
                symmetric_flags: Iterable[str] = ()) -> MetricsReport:
    """Entity, boundary-relation, and strict-relation scores in one record."""
    flags = frozenset(symmetric_flags)
    return MetricsReport(
        ent=score_entities(pred_ent, gold_ent),
        rel=score_relations(pred_rel, gold_rel, gold_ent, False, flags),
        relplus=score_relations(pred_rel, gold_rel, gold_ent, True, flags),
    )
