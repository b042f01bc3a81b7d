"""Encoder behavior: masking, position tying, reference agreement, gradients."""

import numpy as np
import pytest

from spanrel import tensor as T
from spanrel.encoder import Encoder, EncoderConfig, MarkedInput, reachability_closure
from spanrel.errors import ConfigError, InputError
from spanrel.tensor import ParameterStore

from _reference import reference_encode


SMALL = EncoderConfig(vocab_size=16, d_model=8, n_heads=2, n_layers=2, d_ff=16,
                      max_position=32)


def build(config=SMALL, seed=0):
    enc = Encoder(config)
    store = ParameterStore()
    enc.init_params(store, np.random.default_rng(seed))
    return enc, store


def quad_mask(n, n_pairs):
    """The appended-marker mask: text rows see text, pair rows see text + own quad."""
    t = n + 4 * n_pairs
    mask = np.zeros((t, t), dtype=bool)
    mask[:, :n] = True
    for k in range(n_pairs):
        lo = n + 4 * k
        mask[lo:lo + 4, lo:lo + 4] = True
    mask[:n, n:] = False
    return mask


class TestConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=10, d_model=10, n_heads=3)

    def test_rejects_nonpositive_extent(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=0)

    def test_rejects_bad_dropout(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=10, dropout=1.0)


class TestMarkedInput:
    def test_plain_invariants(self):
        inp = MarkedInput.plain([3, 1, 4, 1, 5])
        assert inp.text_len == len(inp) == 5
        assert np.array_equal(inp.position_ids, np.arange(5))
        assert inp.attention_mask.all()

    def test_diagonal_must_hold(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[2, 2] = False
        with pytest.raises(InputError, match="row 2"):
            MarkedInput([1, 2, 3], [0, 1, 2], mask, text_len=3)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            MarkedInput([1, 2, 3], [0, 1], np.ones((3, 3), dtype=bool), text_len=3)

    def test_negative_position(self):
        with pytest.raises(InputError, match="index 1"):
            MarkedInput([1, 2], [0, -1], np.ones((2, 2), dtype=bool), text_len=2)


class TestEncodeBasics:
    def test_output_shape(self):
        enc, store = build()
        out = enc.encode(MarkedInput.plain([1, 2, 3, 4, 5, 6]), store)
        assert out.shape == (6, SMALL.d_model)

    def test_token_id_out_of_range_names_index(self):
        enc, store = build()
        with pytest.raises(InputError, match="index 2"):
            enc.encode(MarkedInput.plain([1, 2, 99, 3]), store)

    def test_position_id_out_of_range(self):
        enc, store = build()
        inp = MarkedInput([1, 2], [0, 500], np.ones((2, 2), dtype=bool), text_len=2)
        with pytest.raises(InputError, match="position id 500"):
            enc.encode(inp, store)

    def test_self_only_mask_means_no_mixing(self):
        # With an identity mask each row must equal the encoding of that token
        # alone at its own position: attention has nothing else to look at.
        enc, store = build()
        ids = [2, 7, 3, 11]
        inp = MarkedInput(ids, np.arange(4), np.eye(4, dtype=bool), text_len=4)
        out = enc.encode(inp, store).data
        for i, tok in enumerate(ids):
            single = MarkedInput([tok], [i], np.ones((1, 1), dtype=bool), text_len=1)
            row = enc.encode(single, store).data[0]
            np.testing.assert_allclose(out[i], row, rtol=1e-12, atol=1e-12)

    def test_tied_positions_give_identical_rows(self):
        # Same token, same position id, same mask row: indistinguishable inputs
        # must produce bit-identical output rows.
        enc, store = build()
        inp = MarkedInput([5, 5], [3, 3], np.ones((2, 2), dtype=bool), text_len=2)
        out = enc.encode(inp, store).data
        assert np.array_equal(out[0], out[1])

    def test_deterministic_across_calls(self):
        enc, store = build()
        inp = MarkedInput.plain([1, 2, 3])
        a = enc.encode(inp, store).data
        b = enc.encode(inp, store).data
        assert np.array_equal(a, b)


class TestDropout:
    def test_dropout_changes_output_only_with_generator(self):
        cfg = EncoderConfig(vocab_size=16, d_model=8, n_heads=2, n_layers=1,
                            d_ff=16, max_position=8, dropout=0.5)
        enc, store = build(cfg)
        inp = MarkedInput.plain([1, 2, 3])
        base = enc.encode(inp, store).data
        dropped = enc.encode(inp, store, dropout_rng=np.random.default_rng(0)).data
        assert not np.allclose(base, dropped)
        again = enc.encode(inp, store, dropout_rng=np.random.default_rng(0)).data
        assert np.array_equal(dropped, again)
        assert np.array_equal(base, enc.encode(inp, store).data)


class TestReachability:
    def test_identity_mask_stays_identity(self):
        eye = np.eye(5, dtype=bool)
        for layers in (1, 3, 7):
            assert np.array_equal(reachability_closure(eye, layers), eye)

    def test_full_mask_is_full(self):
        full = np.ones((4, 4), dtype=bool)
        assert reachability_closure(full, 2).all()

    def test_rejects_non_square(self):
        with pytest.raises(ConfigError):
            reachability_closure(np.ones((2, 3), dtype=bool), 1)

    @pytest.mark.parametrize("layers", [1, 2, 3, 4])
    def test_marker_quad_mask_isolates_text(self, layers):
        mask = quad_mask(n=5, n_pairs=1)
        closure = reachability_closure(mask, layers)
        assert not closure[:5, 5:].any()
        assert closure[5:, :5].all()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_breadth_first_oracle(self, seed):
        rng = np.random.default_rng(seed)
        t = 7
        mask = rng.random((t, t)) < 0.3
        np.fill_diagonal(mask, True)
        layers = int(rng.integers(1, 5))
        closure = reachability_closure(mask, layers)
        # Independent oracle: expand reachable sets one hop at a time.
        for i in range(t):
            reach = {i}
            for _ in range(layers):
                step = set(reach)
                for r in reach:
                    step.update(np.flatnonzero(mask[r]).tolist())
                reach = step
            assert set(np.flatnonzero(closure[i]).tolist()) == reach


class TestMaskedInfluence:
    def _perturb_and_compare(self, mask, layers, seed):
        cfg = EncoderConfig(vocab_size=32, d_model=8, n_heads=2, n_layers=layers,
                            d_ff=16, max_position=16)
        enc, store = build(cfg, seed=seed)
        t = mask.shape[0]
        ids = np.arange(t)  # distinct tokens so one embedding row maps to one index
        inp = MarkedInput(ids, np.arange(t), mask, text_len=t)
        before = enc.encode(inp, store).data.copy()
        j = t - 1
        store["enc.tok_emb"].data[ids[j]] += 0.5
        after = enc.encode(inp, store).data
        closure = reachability_closure(mask, layers)
        for i in range(t):
            if not closure[i, j]:
                assert np.array_equal(before[i], after[i]), f"row {i} leaked from {j}"
        assert not np.array_equal(before[j], after[j])

    def test_text_rows_blind_to_markers_bitwise(self):
        self._perturb_and_compare(quad_mask(n=5, n_pairs=1), layers=2, seed=0)

    @pytest.mark.parametrize("seed", range(4))
    def test_random_masks(self, seed):
        rng = np.random.default_rng(100 + seed)
        t = 7
        mask = rng.random((t, t)) < 0.35
        np.fill_diagonal(mask, True)
        self._perturb_and_compare(mask, layers=2, seed=seed)


class TestScalarReferenceAgreement:
    @pytest.mark.parametrize("seed", range(3))
    def test_plain_sequences_agree(self, seed):
        enc, store = build(seed=seed)
        rng = np.random.default_rng(10 + seed)
        ids = rng.integers(0, SMALL.vocab_size, size=4)
        inp = MarkedInput.plain(ids)
        got = enc.encode(inp, store).data
        want = np.asarray(reference_encode(
            SMALL, store.state_dict(), inp.token_ids.tolist(),
            inp.position_ids.tolist(), inp.attention_mask.tolist()))
        assert np.max(np.abs(got - want)) < 1e-10

    def test_masked_tied_sequence_agrees(self):
        enc, store = build()
        mask = quad_mask(n=4, n_pairs=1)
        ids = np.array([1, 2, 3, 4, 10, 11, 12, 13])
        positions = np.array([0, 1, 2, 3, 1, 1, 2, 2])
        inp = MarkedInput(ids, positions, mask, text_len=4)
        got = enc.encode(inp, store).data
        want = np.asarray(reference_encode(
            SMALL, store.state_dict(), ids.tolist(), positions.tolist(),
            mask.tolist()))
        assert np.max(np.abs(got - want)) < 1e-10


class TestGradients:
    def test_encode_passes_grad_check(self):
        cfg = EncoderConfig(vocab_size=12, d_model=8, n_heads=2, n_layers=2,
                            d_ff=12, max_position=16)
        enc = Encoder(cfg)
        store = ParameterStore()
        enc.init_params(store, np.random.default_rng(3))
        mask = quad_mask(n=3, n_pairs=1)
        inp = MarkedInput([1, 2, 3, 8, 9, 10, 11], [0, 1, 2, 0, 0, 2, 2], mask,
                          text_len=3)
        rng = np.random.default_rng(4)
        w = rng.standard_normal((7, cfg.d_model))

        def f(params):
            return T.sum_all(T.mul(enc.encode(inp, params), T.Tensor(w)))

        worst = T.grad_check(f, store, eps=1e-5, num_samples=120, seed=5)
        assert worst < 1e-3
