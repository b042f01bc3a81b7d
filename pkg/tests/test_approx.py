"""Batched-marker approximation tests: tied positions, the constrained mask,
chunking arithmetic, and agreement with singleton batches."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from spanrel import tensor as T
from spanrel.approx import (
    PairBatch,
    approx_forward,
    approx_logits,
    benchmark_speed,
    build_approx_input,
    chunk_pairs,
    predict_relations_approx,
)
from spanrel.corpus import AnnotatedDocument, ContextWindow, Vocabulary
from spanrel.encoder import EncoderConfig, MarkedInput
from spanrel.entity import EntityLabelSet, Span
from spanrel.errors import InputError, UsageError
from spanrel.relation import (
    FeatureMode,
    MarkerVocabulary,
    RelationCandidate,
    RelationLabelSet,
    RelationModel,
    RelationModelConfig,
    gold_pair_candidates,
    marker_pair_representation,
    relation_logits,
)

ETYPES = ("PER", "ORG", "LOC")
RTYPES = ("WORKS_AT", "LIVES_IN")
WORDS = [f"w{i}" for i in range(40)]


def build_model(mode=FeatureMode.TYPED_MARKERS, d_model=32, n_layers=2, seed=9):
    vocab = Vocabulary(WORDS)
    markers = MarkerVocabulary(vocab, ETYPES)
    econf = EncoderConfig(vocab_size=len(vocab), d_model=d_model, n_heads=4,
                          n_layers=n_layers, d_ff=2 * d_model, max_position=128)
    rconf = RelationModelConfig(mode=mode, type_emb_dim=8, width_emb_dim=8,
                                ffnn_hidden=16)
    return RelationModel(econf, rconf, EntityLabelSet(ETYPES),
                         RelationLabelSet(RTYPES), markers,
                         rng=np.random.default_rng(seed))


def window_of(n, offset=0):
    tokens = tuple(WORDS[i % len(WORDS)] for i in range(n))
    return ContextWindow(tokens, offset, n - offset)


def random_candidates(rng, n, m, offset=0):
    """m distinct same-window candidate pairs over an n-token target."""
    cands = []
    seen = set()
    while len(cands) < m:
        a, b = sorted(map(int, rng.integers(0, n - offset, size=2)))
        c, d = sorted(map(int, rng.integers(0, n - offset, size=2)))
        b = min(b, a + 3)
        d = min(d, c + 3)
        if (a, b) == (c, d) or ((a, b), (c, d)) in seen:
            continue
        seen.add(((a, b), (c, d)))
        st, ot = rng.choice(ETYPES, size=2)
        cands.append(RelationCandidate(Span(a, b), str(st), Span(c, d), str(ot)))
    return cands


class TestBuildApproxInput:
    def setup_method(self):
        self.model = build_model()

    def quad(self, styp="PER", otyp="ORG"):
        s_ids, o_ids = self.model.markers.pair_ids(styp, otyp)
        return (s_ids[0], s_ids[1], o_ids[0], o_ids[1])

    def test_positions_tied_to_span_boundaries(self):
        ids = np.arange(2, 52) % 40  # n = 50
        marked = build_approx_input(ids, [(Span(2, 3), Span(7, 7))], [self.quad()])
        assert marked.token_ids.shape == (54,)
        assert np.array_equal(marked.position_ids[:50], np.arange(50))
        assert list(marked.position_ids[50:]) == [2, 3, 7, 7]
        assert list(marked.token_ids[50:]) == list(self.quad())
        assert marked.text_len == 50

    def test_marker_block_layout_per_pair(self):
        ids = np.arange(10)
        pairs = [(Span(0, 1), Span(4, 4)), (Span(2, 3), Span(8, 9))]
        quads = [self.quad(), self.quad("LOC", "PER")]
        marked = build_approx_input(ids, pairs, quads)
        assert marked.token_ids.shape == (18,)
        assert list(marked.token_ids[10:14]) == list(quads[0])
        assert list(marked.token_ids[14:18]) == list(quads[1])
        assert list(marked.position_ids[10:]) == [0, 1, 4, 4, 2, 3, 8, 9]

    def test_text_rows_attend_text_only(self):
        ids = np.arange(12)
        marked = build_approx_input(ids, [(Span(0, 0), Span(2, 2))], [self.quad()])
        # the examples: every text row's mask sums to n
        assert (marked.attention_mask[:12].sum(axis=1) == 12).all()
        assert not marked.attention_mask[:12, 12:].any()

    def test_marker_rows_attend_text_and_own_block(self):
        ids = np.arange(8)
        pairs = [(Span(0, 0), Span(2, 2)), (Span(1, 1), Span(3, 3))]
        marked = build_approx_input(ids, pairs, [self.quad(), self.quad()])
        mask = marked.attention_mask
        for k, base in ((0, 8), (1, 12)):
            rows = mask[base:base + 4]
            assert rows[:, :8].all()
            assert rows[:, base:base + 4].all()
            other = 12 if k == 0 else 8
            assert not rows[:, other:other + 4].any()

    def test_rejects_empty_and_out_of_window(self):
        ids = np.arange(6)
        with pytest.raises(InputError):
            build_approx_input(ids, [], [])
        with pytest.raises(InputError, match="outside"):
            build_approx_input(ids, [(Span(0, 0), Span(4, 6))], [self.quad()])
        with pytest.raises(InputError, match="quads"):
            build_approx_input(ids, [(Span(0, 0), Span(1, 1))], [])


class TestChunkPairs:
    def test_batch_sizes_at_budget(self):
        model = build_model(d_model=16, n_layers=1)
        window = window_of(20)
        # pad the window to n=100 by using a doc-style longer window
        tokens = tuple(WORDS[i % len(WORDS)] for i in range(100))
        window = ContextWindow(tokens, 0, 100)
        rng = np.random.default_rng(0)
        cands = random_candidates(rng, 100, 60)
        batches = chunk_pairs(model, window, cands, token_budget=250)
        assert [b.num_pairs for b in batches] == [37, 23]
        for b in batches[:-1]:
            assert b.marked.token_ids.shape[0] <= 250
        # partition: order-preserving, exactly once
        flat = [c for b in batches for c in b.pairs]
        assert flat == cands

    def test_fifty_pairs_fit_n50(self):
        model = build_model(d_model=16, n_layers=1)
        window = window_of(50)
        cands = random_candidates(np.random.default_rng(1), 50, 50)
        batches = chunk_pairs(model, window, cands, token_budget=250)
        assert [b.num_pairs for b in batches] == [50]
        assert batches[0].marked.token_ids.shape[0] == 250

    def test_zero_pairs(self):
        model = build_model(d_model=16, n_layers=1)
        assert chunk_pairs(model, window_of(10), []) == []

    def test_degenerate_budget_warns(self):
        model = build_model(d_model=16, n_layers=1)
        window = window_of(30)
        cands = random_candidates(np.random.default_rng(2), 30, 3)
        with pytest.warns(UserWarning, match="token budget"):
            batches = chunk_pairs(model, window, cands, token_budget=31)
        assert [b.num_pairs for b in batches] == [1, 1, 1]

    def test_text_mode_rejected(self):
        model = build_model(FeatureMode.TEXT, d_model=16, n_layers=1)
        with pytest.raises(UsageError):
            chunk_pairs(model, window_of(10),
                        random_candidates(np.random.default_rng(3), 10, 2))


class TestTextInvariance:
    def test_text_rows_bit_identical_to_bare_window(self):
        """The mask keeps text hidden states independent of the marker tail."""
        model = build_model()
        window = window_of(16)
        rng = np.random.default_rng(4)
        cands = random_candidates(rng, 16, 6)
        (batch,) = chunk_pairs(model, window, cands)
        hidden = model.encoder.encode(batch.marked, model.store, model.enc_prefix)
        ids = model.window_ids(window)
        bare = model.encoder.encode(MarkedInput.plain(ids), model.store,
                                    model.enc_prefix)
        assert np.array_equal(hidden.data[:16], bare.data)

    def test_text_rows_independent_of_pair_set(self):
        model = build_model()
        window = window_of(12)
        rng = np.random.default_rng(5)
        a = chunk_pairs(model, window, random_candidates(rng, 12, 2))[0]
        b = chunk_pairs(model, window, random_candidates(rng, 12, 7))[0]
        ha = model.encoder.encode(a.marked, model.store, model.enc_prefix)
        hb = model.encoder.encode(b.marked, model.store, model.enc_prefix)
        assert np.array_equal(ha.data[:12], hb.data[:12])


class TestPairIndependence:
    def test_batched_matches_singletons(self):
        model = build_model()
        window = window_of(14)
        rng = np.random.default_rng(6)
        cands = random_candidates(rng, 14, 8)
        batched = approx_logits(model, window, cands).data
        for k, cand in enumerate(cands):
            single = approx_logits(model, window, [cand]).data
            denom = max(1.0, np.abs(batched[k]).max(), np.abs(single[0]).max())
            assert np.abs(batched[k] - single[0]).max() / denom <= 1e-9

    def test_permutation_permutes_rows(self):
        model = build_model()
        window = window_of(14)
        rng = np.random.default_rng(7)
        cands = random_candidates(rng, 14, 6)
        base = approx_logits(model, window, cands).data
        perm = rng.permutation(len(cands))
        shuffled = approx_logits(model, window, [cands[i] for i in perm]).data
        # hidden states are bit-identical under permutation; the classifier
        # matmul reassociates by row position, so allow float noise there
        assert np.abs(shuffled - base[perm]).max() <= 1e-12

    def test_permutation_hidden_states_bit_identical(self):
        """Canonical block layout: permuting candidates builds the same
        marked input, so the encoder pass is literally the same floats."""
        model = build_model()
        window = window_of(14)
        rng = np.random.default_rng(7)
        cands = random_candidates(rng, 14, 6)
        perm = rng.permutation(len(cands))
        (a,) = chunk_pairs(model, window, cands)
        (b,) = chunk_pairs(model, window, [cands[i] for i in perm])
        assert np.array_equal(a.marked.token_ids, b.marked.token_ids)
        assert np.array_equal(a.marked.position_ids, b.marked.position_ids)
        assert np.array_equal(a.marked.attention_mask, b.marked.attention_mask)
        ha = model.encoder.encode(a.marked, model.store, model.enc_prefix).data
        hb = model.encoder.encode(b.marked, model.store, model.enc_prefix).data
        assert np.array_equal(ha, hb)
        for new_k, old_k in enumerate(perm):
            assert b.subject_marker_index(new_k) == a.subject_marker_index(old_k)
            assert b.object_marker_index(new_k) == a.object_marker_index(old_k)

    def test_across_chunk_boundaries(self):
        """Logits must not depend on where the batch was split."""
        model = build_model(d_model=16, n_layers=1)
        window = window_of(12)
        cands = random_candidates(np.random.default_rng(8), 12, 9)
        wide = approx_logits(model, window, cands, token_budget=250).data
        narrow = approx_logits(model, window, cands, token_budget=12 + 4 * 2).data
        assert np.abs(wide - narrow).max() <= 1e-9


class TestApproxForward:
    def test_one_encode_per_batch(self):
        model = build_model(d_model=16, n_layers=1)
        window = window_of(10)
        cands = random_candidates(np.random.default_rng(9), 10, 5)
        (batch,) = chunk_pairs(model, window, cands)
        calls = []
        orig = model.encoder.encode

        def counting(*a, **kw):
            calls.append(1)
            return orig(*a, **kw)

        model.encoder.encode = counting
        logits = approx_forward(model, batch)
        assert logits.shape == (5, 3)
        assert len(calls) == 1

    def test_shared_classifier_parameters(self):
        """approx logits are exactly W_r[h_subj; h_obj] + b with the spliced
        model's parameter names (computed block-ordered, gathered back)."""
        model = build_model()
        window = window_of(10)
        cands = random_candidates(np.random.default_rng(10), 10, 3)
        (batch,) = chunk_pairs(model, window, cands)
        hidden = model.encoder.encode(batch.marked, model.store, model.enc_prefix)
        n = batch.text_len
        rep = marker_pair_representation(hidden, [n, n + 4, n + 8],
                                         [n + 2, n + 6, n + 10])
        manual = relation_logits(rep, model.store, model.head_prefix).data
        manual = manual[[batch.block_of(k) for k in range(3)]]
        assert np.array_equal(approx_forward(model, batch).data, manual)

    def test_typed_markers_enter_the_batch(self):
        model = build_model()
        window = window_of(10)
        a = RelationCandidate(Span(0, 0), "PER", Span(3, 3), "ORG")
        b = RelationCandidate(Span(0, 0), "LOC", Span(3, 3), "ORG")
        la = approx_logits(model, window, [a]).data
        lb = approx_logits(model, window, [b]).data
        assert np.abs(la - lb).max() > 1e-8

    def test_etype_mode_appends_embeddings(self):
        model = build_model(FeatureMode.MARKERS_ETYPE)
        window = window_of(10)
        a = RelationCandidate(Span(0, 0), "PER", Span(3, 3), "ORG")
        b = RelationCandidate(Span(0, 0), "LOC", Span(3, 3), "ORG")
        la = approx_logits(model, window, [a]).data
        lb = approx_logits(model, window, [b]).data
        assert la.shape == (1, 3)
        assert np.abs(la - lb).max() > 1e-8

    def test_window_offset_respected(self):
        """Sentence-coordinate spans land on the right window tokens."""
        model = build_model()
        tokens = tuple(WORDS[:12])
        plain = ContextWindow(tokens, 0, 12)
        shifted = ContextWindow(("w30", "w31") + tokens, 2, 12)
        cand = RelationCandidate(Span(1, 2), "PER", Span(5, 5), "ORG")
        (pb,) = chunk_pairs(model, plain, [cand])
        (sb,) = chunk_pairs(model, shifted, [cand])
        assert list(pb.marked.position_ids[-4:]) == [1, 2, 5, 5]
        assert list(sb.marked.position_ids[-4:]) == [3, 4, 7, 7]

    def test_empty_candidates_empty_logits(self):
        model = build_model(d_model=16, n_layers=1)
        logits = approx_logits(model, window_of(8), [])
        assert logits.shape == (0, 3)


class TestPredict:
    def test_matches_manual_argmax(self):
        model = build_model()
        window = window_of(12)
        ents = [(Span(0, 1), "PER"), (Span(4, 4), "ORG"), (Span(7, 8), "LOC")]
        cands = gold_pair_candidates(ents, window)
        with T.no_grad():
            logits = approx_logits(model, window, cands).data
        expect = [(c.subject, c.object, model.relation_labels.name(int(k)))
                  for c, k in zip(cands, np.argmax(logits, axis=1)) if k != 0]
        assert predict_relations_approx(model, window, ents) == expect

    def test_no_entities(self):
        model = build_model(d_model=16, n_layers=1)
        assert predict_relations_approx(model, window_of(8), []) == []

    def test_threaded_batches_match_serial(self):
        model = build_model()
        window = window_of(16)
        rng = np.random.default_rng(11)
        cands = random_candidates(rng, 16, 12)
        batches = chunk_pairs(model, window, cands, token_budget=16 + 4 * 4)
        assert len(batches) == 3
        serial = [approx_forward(model, b).data for b in batches]
        with T.no_grad(), ThreadPoolExecutor(max_workers=3) as pool:
            threaded = list(pool.map(
                lambda b: approx_forward(model, b).data, batches))
        for s, t in zip(serial, threaded):
            assert np.array_equal(s, t)


def synthetic_bench_docs():
    sents = [
        ["w0", "w1", "w2", "w3", "w4", "w5"],
        ["w6", "w7", "w8", "w9"],
    ]
    ents = [
        [(Span(0, 0, 0), "PER"), (Span(2, 2, 0), "ORG"), (Span(4, 4, 0), "LOC")],
        [(Span(1, 1, 1), "PER"), (Span(3, 3, 1), "LOC")],
    ]
    rels = [[(Span(0, 0, 0), Span(2, 2, 0), "WORKS_AT")],
            [(Span(1, 1, 1), Span(3, 3, 1), "LIVES_IN")]]
    return [AnnotatedDocument(f"d{i}", sents, ents, rels) for i in range(2)]


class TestBenchmark:
    def test_report_shape_and_pass_counts(self):
        model = build_model(d_model=16, n_layers=1)
        docs = synthetic_bench_docs()
        full = benchmark_speed(model, docs, "full", window_size=12, repeats=3)
        approx = benchmark_speed(model, docs, "approx", window_size=12, repeats=3)
        for rec in (full, approx):
            assert set(rec) == {"mode", "sentences_per_sec", "encoder_passes",
                                "pairs", "wall_ms"}
            assert rec["sentences_per_sec"] > 0
            assert rec["wall_ms"] > 0
        # 2 docs x (6 + 2) ordered pairs
        assert full["pairs"] == approx["pairs"] == 16
        assert full["encoder_passes"] == 16
        # every sentence's pairs fit one batch here
        assert approx["encoder_passes"] == 4
        assert approx["encoder_passes"] <= full["encoder_passes"]

    def test_unknown_mode(self):
        model = build_model(d_model=16, n_layers=1)
        with pytest.raises(UsageError):
            benchmark_speed(model, [], "fast")
