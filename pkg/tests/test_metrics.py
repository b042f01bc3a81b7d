"""Scoring tests: hand-computed examples, a brute-force pairwise oracle over
randomized cases, permutation invariance, and monotonicity."""

import numpy as np
import pytest

from spanrel.entity import Span
from spanrel.errors import InputError
from spanrel.metrics import (
    PRF,
    MetricsReport,
    full_report,
    score_entities,
    score_relations,
)

ETYPES = ("PER", "ORG", "LOC")
RTYPES = ("WORKS_AT", "LIVES_IN", "NEAR")


class TestPRF:
    def test_zero_over_zero_is_zero(self):
        z = PRF(0, 0, 0)
        assert z.precision == z.recall == z.f1 == 0.0

    def test_harmonic_mean_example(self):
        # 1 of 2 predictions correct, 4 gold
        prf = PRF(2, 4, 1)
        assert prf.precision == 0.5
        assert prf.recall == 0.25
        assert prf.f1 == pytest.approx(1 / 3)

    def test_zero_precision_nonzero_recall_denominator(self):
        assert PRF(0, 3, 0).recall == 0.0
        assert PRF(3, 0, 0).precision == 0.0
        assert PRF(3, 0, 0).f1 == 0.0

    def test_accumulation(self):
        total = PRF(1, 2, 1) + PRF(3, 2, 2)
        assert (total.num_pred, total.num_gold, total.num_correct) == (4, 4, 3)


class TestScoreEntities:
    def test_perfect(self):
        gold = [[(Span(0, 1), "PER"), (Span(3, 3), "ORG")]]
        assert score_entities(gold, gold).f1 == 1.0

    def test_empty_predictions(self):
        gold = [[(Span(0, 1), "PER")]]
        prf = score_entities([[]], gold)
        assert prf.precision == prf.recall == prf.f1 == 0.0

    def test_type_must_match(self):
        gold = [[(Span(0, 1), "PER")]]
        pred = [[(Span(0, 1), "ORG")]]
        assert score_entities(pred, gold).num_correct == 0

    def test_boundaries_must_match(self):
        gold = [[(Span(0, 1), "PER")]]
        pred = [[(Span(0, 2), "PER")]]
        assert score_entities(pred, gold).num_correct == 0

    def test_duplicates_deduplicated(self):
        gold = [[(Span(0, 1), "PER")]]
        pred = [[(Span(0, 1), "PER"), (Span(0, 1), "PER")]]
        prf = score_entities(pred, gold)
        assert prf.num_pred == 1 and prf.precision == 1.0

    def test_micro_average_pools_counts(self):
        gold = [[(Span(0, 0), "PER")], [(Span(i, i), "ORG") for i in range(9)]]
        pred = [[(Span(0, 0), "PER")], []]
        prf = score_entities(pred, gold)
        # 1 correct of 1 predicted, 10 gold: macro would give recall 0.5
        assert prf.recall == pytest.approx(0.1)
        assert prf.precision == 1.0

    def test_unit_mismatch(self):
        with pytest.raises(InputError):
            score_entities([[]], [[], []])

    def test_sentence_index_distinguishes(self):
        gold = [[(Span(0, 1, sentence_index=0), "PER")]]
        pred = [[(Span(0, 1, sentence_index=1), "PER")]]
        assert score_entities(pred, gold).num_correct == 0


def rel(s1, t1, s2, t2, r):
    return (s1, t1, s2, t2, r)


class TestScoreRelations:
    GOLD_ENT = [[(Span(0, 1), "PER"), (Span(4, 4), "ORG"), (Span(7, 8), "LOC")]]
    GOLD_REL = [[(Span(0, 1), Span(4, 4), "WORKS_AT")]]

    def test_perfect(self):
        pred = [[rel(Span(0, 1), "PER", Span(4, 4), "ORG", "WORKS_AT")]]
        assert score_relations(pred, self.GOLD_REL, self.GOLD_ENT).f1 == 1.0
        assert score_relations(pred, self.GOLD_REL, self.GOLD_ENT,
                               strict=True).f1 == 1.0

    def test_wrong_argument_type_counts_boundary_only(self):
        pred = [[rel(Span(0, 1), "LOC", Span(4, 4), "ORG", "WORKS_AT")]]
        assert score_relations(pred, self.GOLD_REL, self.GOLD_ENT).f1 == 1.0
        strict = score_relations(pred, self.GOLD_REL, self.GOLD_ENT, strict=True)
        assert strict.num_correct == 0

    def test_direction_matters_by_default(self):
        pred = [[rel(Span(4, 4), "ORG", Span(0, 1), "PER", "WORKS_AT")]]
        assert score_relations(pred, self.GOLD_REL, self.GOLD_ENT).num_correct == 0

    def test_symmetric_flag_matches_either_order(self):
        gold_rel = [[(Span(0, 1), Span(7, 8), "NEAR")]]
        pred = [[rel(Span(7, 8), "LOC", Span(0, 1), "PER", "NEAR")]]
        directed = score_relations(pred, gold_rel, self.GOLD_ENT)
        assert directed.num_correct == 0
        flagged = score_relations(pred, gold_rel, self.GOLD_ENT,
                                  symmetric_flags={"NEAR"})
        assert flagged.f1 == 1.0
        assert score_relations(pred, gold_rel, self.GOLD_ENT, strict=True,
                               symmetric_flags={"NEAR"}).f1 == 1.0

    def test_symmetric_gold_duplicates_collapse(self):
        gold_rel = [[(Span(0, 1), Span(7, 8), "NEAR"),
                     (Span(7, 8), Span(0, 1), "NEAR")]]
        pred = [[rel(Span(0, 1), "PER", Span(7, 8), "LOC", "NEAR")]]
        prf = score_relations(pred, gold_rel, self.GOLD_ENT,
                              symmetric_flags={"NEAR"})
        assert prf.num_gold == 1
        assert prf.f1 == 1.0

    def test_reversed_duplicate_predictions_collapse(self):
        gold_rel = [[(Span(0, 1), Span(7, 8), "NEAR")]]
        pred = [[rel(Span(0, 1), "PER", Span(7, 8), "LOC", "NEAR"),
                 rel(Span(7, 8), "LOC", Span(0, 1), "PER", "NEAR")]]
        prf = score_relations(pred, gold_rel, self.GOLD_ENT,
                              symmetric_flags={"NEAR"})
        assert prf.num_pred == 1 and prf.f1 == 1.0

    def test_conflicting_type_duplicates_cannot_inflate_recall(self):
        pred = [[rel(Span(0, 1), "PER", Span(4, 4), "ORG", "WORKS_AT"),
                 rel(Span(0, 1), "LOC", Span(4, 4), "ORG", "WORKS_AT")]]
        prf = score_relations(pred, self.GOLD_REL, self.GOLD_ENT)
        assert prf.num_pred == 1
        assert prf.recall <= 1.0
        strict = score_relations(pred, self.GOLD_REL, self.GOLD_ENT, strict=True)
        assert strict.num_correct == 1  # one carried type pair is right

    def test_empty_everything(self):
        prf = score_relations([[]], [[]], [[]])
        assert prf.precision == prf.recall == prf.f1 == 0.0

    def test_relation_type_must_match(self):
        pred = [[rel(Span(0, 1), "PER", Span(4, 4), "ORG", "LIVES_IN")]]
        assert score_relations(pred, self.GOLD_REL, self.GOLD_ENT).num_correct == 0


class TestReport:
    def test_flat_json_keys(self):
        report = full_report([[]], [[]], [[]], [[]])
        record = report.to_json()
        expected = set()
        for tag in ("ent", "rel", "relplus"):
            expected |= {f"{tag}_p", f"{tag}_r", f"{tag}_f1", f"{tag}_pred",
                         f"{tag}_gold", f"{tag}_correct"}
        assert set(record) == expected

    def test_report_matches_individual_scores(self):
        gold_ent = [[(Span(0, 1), "PER"), (Span(4, 4), "ORG")]]
        gold_rel = [[(Span(0, 1), Span(4, 4), "WORKS_AT")]]
        pred_ent = [[(Span(0, 1), "PER")]]
        pred_rel = [[rel(Span(0, 1), "LOC", Span(4, 4), "ORG", "WORKS_AT")]]
        report = full_report(pred_ent, gold_ent, pred_rel, gold_rel)
        assert report.ent == score_entities(pred_ent, gold_ent)
        assert report.rel == score_relations(pred_rel, gold_rel, gold_ent)
        assert report.relplus == score_relations(pred_rel, gold_rel, gold_ent,
                                                 strict=True)
        record = report.to_json()
        assert record["rel_f1"] == 1.0 and record["relplus_f1"] == 0.0


# ---------------------------------------------------------------------------
# brute-force oracle over randomized cases
# ---------------------------------------------------------------------------


def _canon_item(item, symmetric):
    s1, t1, s2, t2, r = item
    if r in symmetric and (s2, t2) < (s1, t1):
        return s2, t2, s1, t1, r
    return item


def oracle_relations(pred, gold_rel, gold_types, strict, symmetric):
    """O(|pred|*|gold|) matcher with used-marks, written independently."""
    uniq = []  # (triple, [type pairs])
    for item in pred:
        s1, t1, s2, t2, r = _canon_item(item, symmetric)
        for key, pairs in uniq:
            if key == (s1, s2, r):
                pairs.append((t1, t2))
                break
        else:
            uniq.append(((s1, s2, r), [(t1, t2)]))
    gold_u = []
    for s1, s2, r in gold_rel:
        item = _canon_item((s1, gold_types.get(s1, ""), s2,
                            gold_types.get(s2, ""), r), symmetric)
        key = (item[0], item[2], item[4])
        if key not in gold_u:
            gold_u.append(key)
    used = [False] * len(gold_u)
    correct = 0
    for key, type_pairs in uniq:
        for gi, gkey in enumerate(gold_u):
            if used[gi] or gkey != key:
                continue
            if strict:
                want = (gold_types.get(key[0]), gold_types.get(key[1]))
                if not any((t1, t2) == want for t1, t2 in type_pairs):
                    continue
            used[gi] = True
            correct += 1
            break
    return len(uniq), len(gold_u), correct


def oracle_entities(pred, gold):
    uniq_p = []
    for item in pred:
        if item not in uniq_p:
            uniq_p.append(item)
    uniq_g = []
    for item in gold:
        if item not in uniq_g:
            uniq_g.append(item)
    used = [False] * len(uniq_g)
    correct = 0
    for item in uniq_p:
        for gi, gitem in enumerate(uniq_g):
            if not used[gi] and gitem == item:
                used[gi] = True
                correct += 1
                break
    return len(uniq_p), len(uniq_g), correct


def random_case(rng):
    """One unit of gold entities/relations plus noisy predictions."""
    n_ent = int(rng.integers(0, 6))
    spans = []
    while len(spans) < n_ent:
        a = int(rng.integers(0, 12))
        b = a + int(rng.integers(0, 3))
        if not any(s.start == a and s.end == b for s in spans):
            spans.append(Span(a, b))
    gold_ent = [(s, str(rng.choice(ETYPES))) for s in spans]
    gold_rel = []
    for i in range(len(spans)):
        for j in range(len(spans)):
            if i != j and rng.random() < 0.3:
                gold_rel.append((spans[i], spans[j], str(rng.choice(RTYPES))))
    gold_types = dict(gold_ent)
    pred_rel = []
    for s1, s2, r in gold_rel:
        if rng.random() < 0.7:  # keep, maybe corrupted
            t1 = gold_types[s1] if rng.random() < 0.8 else str(rng.choice(ETYPES))
            t2 = gold_types[s2] if rng.random() < 0.8 else str(rng.choice(ETYPES))
            if rng.random() < 0.2:
                s1, s2, t1, t2 = s2, s1, t2, t1  # flip direction
            if rng.random() < 0.15:
                r = str(rng.choice(RTYPES))
            pred_rel.append((s1, t1, s2, t2, r))
            if rng.random() < 0.2:
                pred_rel.append(pred_rel[-1])  # duplicate
    for _ in range(int(rng.integers(0, 3))):  # spurious
        if len(spans) >= 2:
            i, j = rng.choice(len(spans), size=2, replace=False)
            pred_rel.append((spans[i], str(rng.choice(ETYPES)),
                             spans[j], str(rng.choice(ETYPES)),
                             str(rng.choice(RTYPES))))
    pred_ent = [e for e in gold_ent if rng.random() < 0.8]
    pred_ent += [(Span(int(rng.integers(0, 12)), int(rng.integers(12, 15))),
                  str(rng.choice(ETYPES)))
                 for _ in range(int(rng.integers(0, 2)))]
    return gold_ent, gold_rel, pred_ent, pred_rel


class TestOracleAgreement:
    def test_relations_match_oracle_100_cases(self):
        rng = np.random.default_rng(42)
        for case in range(100):
            gold_ent, gold_rel, _, pred_rel = random_case(rng)
            symmetric = frozenset(["NEAR"]) if case % 2 else frozenset()
            for strict in (False, True):
                prf = score_relations([pred_rel], [gold_rel], [gold_ent],
                                      strict, symmetric)
                expect = oracle_relations(pred_rel, gold_rel, dict(gold_ent),
                                          strict, symmetric)
                got = (prf.num_pred, prf.num_gold, prf.num_correct)
                assert got == expect, f"case {case} strict={strict}"

    def test_entities_match_oracle_100_cases(self):
        rng = np.random.default_rng(43)
        for case in range(100):
            gold_ent, _, pred_ent, _ = random_case(rng)
            prf = score_entities([pred_ent], [gold_ent])
            expect = oracle_entities(pred_ent, gold_ent)
            assert (prf.num_pred, prf.num_gold, prf.num_correct) == expect


class TestProperties:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(44)
        for _ in range(30):
            gold_ent, gold_rel, pred_ent, pred_rel = random_case(rng)
            base = score_relations([pred_rel], [gold_rel], [gold_ent],
                                   strict=True, symmetric_flags={"NEAR"})
            for _ in range(3):
                shuffled = list(pred_rel)
                rng.shuffle(shuffled)
                again = score_relations([shuffled], [gold_rel], [gold_ent],
                                        strict=True, symmetric_flags={"NEAR"})
                assert again == base
            ent_base = score_entities([pred_ent], [gold_ent])
            shuffled_ent = list(pred_ent)
            rng.shuffle(shuffled_ent)
            assert score_entities([shuffled_ent], [gold_ent]) == ent_base

    def test_adding_correct_prediction_never_lowers_recall(self):
        rng = np.random.default_rng(45)
        for _ in range(40):
            gold_ent, gold_rel, _, pred_rel = random_case(rng)
            if not gold_rel:
                continue
            before = score_relations([pred_rel], [gold_rel], [gold_ent])
            s1, s2, r = gold_rel[int(rng.integers(0, len(gold_rel)))]
            types = dict(gold_ent)
            extra = pred_rel + [(s1, types[s1], s2, types[s2], r)]
            after = score_relations([extra], [gold_rel], [gold_ent])
            assert after.recall >= before.recall

    def test_adding_wrong_prediction_never_raises_precision(self):
        rng = np.random.default_rng(46)
        for _ in range(40):
            gold_ent, gold_rel, _, pred_rel = random_case(rng)
            before = score_relations([pred_rel], [gold_rel], [gold_ent])
            junk = (Span(90, 95), "PER", Span(96, 99), "ORG", "WORKS_AT")
            after = score_relations([pred_rel + [junk]], [gold_rel], [gold_ent])
            assert after.precision <= before.precision
