"""Batched relation inference: many pairs per encoder pass.

Splicing markers into the text (relation.insert_typed_markers) changes the
token sequence, so every candidate pair needs its own encoder pass. The
batched approximation appends all marker tokens *after* the window instead
and recovers (almost exactly) the spliced geometry with two devices:

* position tying - each marker reuses the position id of the span boundary
  it stands for, so its positional embedding matches the in-place variant;
* a constrained attention mask - text tokens attend only to text, and each
  pair's four markers attend to the text plus themselves.

Text hidden states are then independent of how many pairs ride along, and
one pass scores every pair whose markers fit in the token budget. The
outputs are close to, but not the same as, the spliced model's; callers who
care measure the agreement rather than assume it.
"""

from __future__ import annotations

import dataclasses
import time
import warnings
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import AnnotatedDocument, ContextWindow, make_window
from .encoder import MarkedInput
from .entity import Span
from .errors import InputError, UsageError
from .relation import (
    RelationCandidate,
    RelationModel,
    append_type_embeddings,
    gold_pair_candidates,
    marker_pair_representation,
    relation_logits,
)
from .tensor import Tensor

DEFAULT_TOKEN_BUDGET = 250


@dataclasses.dataclass(frozen=True)
class PairBatch:
    """One encoder pass worth of candidate pairs over a single window.

    The marked input holds the n window tokens followed by a 4-token marker
    block per pair (opening-subject, closing-subject, opening-object,
    closing-object), so block j's markers sit at ``n + 4j .. n + 4j + 3``.
    Blocks are laid out in a canonical (span-sorted) order rather than caller
    order, which makes the batched input -- and therefore every downstream
    float -- independent of how the caller happened to order the pairs;
    ``layout`` maps pair k of ``pairs`` to its block.
    """

    window_ids: np.ndarray
    pairs: tuple[RelationCandidate, ...]
    marked: MarkedInput
    layout: tuple[int, ...] | None = None

    @property
    def text_len(self) -> int:
        return int(self.window_ids.shape[0])

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    def block_of(self, k: int) -> int:
        return k if self.layout is None else self.layout[k]

    def subject_marker_index(self, k: int) -> int:
        return self.text_len + 4 * self.block_of(k)

    def object_marker_index(self, k: int) -> int:
        return self.text_len + 4 * self.block_of(k) + 2


def build_approx_input(window_ids, span_pairs: Sequence[tuple[Span, Span]],
                       marker_quads: Sequence[tuple[int, int, int, int]]
                       ) -> MarkedInput:
    """Append marker blocks with tied positions and the constrained mask.

    ``span_pairs`` are (subject, object) spans in *window* coordinates;
    ``marker_quads`` give the four marker ids per pair in block order.
    """
    ids = np.asarray(window_ids, dtype=np.int64)
    n = ids.shape[0]
    m = len(span_pairs)
    if m == 0:
        raise InputError("no candidate pairs to batch")
    if m != len(marker_quads):
        raise InputError(f"{m} span pairs but {len(marker_quads)} marker quads")

    tokens = np.empty(n + 4 * m, dtype=np.int64)
    positions = np.empty(n + 4 * m, dtype=np.int64)
    tokens[:n] = ids
    positions[:n] = np.arange(n)
    for k, ((subj, obj), quad) in enumerate(zip(span_pairs, marker_quads)):
        for name, span in (("subject", subj), ("object", obj)):
            if not (0 <= span.start <= span.end < n):
                raise InputError(f"{name} span [{span.start}, {span.end}] outside "
                                 f"window of {n} tokens")
        base = n + 4 * k
        tokens[base:base + 4] = quad
        positions[base:base + 4] = (subj.start, subj.end, obj.start, obj.end)

    mask = np.zeros((n + 4 * m, n + 4 * m), dtype=bool)
    mask[:, :n] = True                    # everyone sees the text ...
    mask[:n, n:] = False                  # ... but text sees only text
    for k in range(m):
        base = n + 4 * k
        mask[base:base + 4, base:base + 4] = True
    return MarkedInput(tokens, positions, mask, text_len=n)


def _pair_quads(model: RelationModel, cands: Sequence[RelationCandidate]):
    quads = []
    for c in cands:
        if model.config.mode.typed_markers:
            s_ids, o_ids = model.markers.pair_ids(c.subject_type, c.object_type)
        else:
            s_ids, o_ids = model.markers.pair_ids(None, None)
        quads.append((s_ids[0], s_ids[1], o_ids[0], o_ids[1]))
    return quads


def _window_coords(window: ContextWindow, cands: Sequence[RelationCandidate]):
    off = window.target_offset
    return [(Span(c.subject.start + off, c.subject.end + off),
             Span(c.object.start + off, c.object.end + off)) for c in cands]


def chunk_pairs(model: RelationModel, window: ContextWindow,
                cands: Sequence[RelationCandidate],
                token_budget: int = DEFAULT_TOKEN_BUDGET) -> list[PairBatch]:
    """Greedy batching in candidate order: add pairs while the batched input
    stays within ``token_budget`` tokens. A window too long to fit even one
    pair degrades to one pair per batch, with a warning."""
    if not model.config.mode.uses_markers:
        raise UsageError(f"mode {model.config.mode.value} does not use markers")
    if len(cands) == 0:
        return []
    ids = model.window_ids(window)
    n = ids.shape[0]
    cap = (token_budget - n) // 4
    if cap < 1:
        warnings.warn(f"window of {n} tokens cannot fit any marker block within "
                      f"the token budget {token_budget}; batching one pair per pass")
        cap = 1
    spans = _window_coords(window, cands)
    quads = _pair_quads(model, cands)
    batches = []
    for lo in range(0, len(cands), cap):
        hi = min(lo + cap, len(cands))
        # canonical block order: identical pair sets build identical inputs,
        # so permuting the candidates cannot change a single bit downstream
        order = sorted(range(lo, hi),
                       key=lambda i: (spans[i][0].start, spans[i][0].end,
                                      spans[i][1].start, spans[i][1].end,
                                      cands[i].subject_type,
                                      cands[i].object_type, quads[i]))
        layout = [0] * (hi - lo)
        for block, i in enumerate(order):
            layout[i - lo] = block
        batches.append(PairBatch(
            window_ids=ids,
            pairs=tuple(cands[lo:hi]),
            marked=build_approx_input(ids, [spans[i] for i in order],
                                      [quads[i] for i in order]),
            layout=tuple(layout),
        ))
    return batches


def approx_forward(model: RelationModel, batch: PairBatch,
                   dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Logits (m, |types|+1) for one batch from a single encoder pass.

    Reads hidden states at each pair's opening markers and applies the same
    classifier parameters as the spliced forward pass. All arithmetic runs in
    the batch's canonical block order -- BLAS results can wobble in the last
    bit with row position, so caller order is restored only afterwards, by a
    pure row gather.
    """
    hidden = model.encoder.encode(batch.marked, model.store, model.enc_prefix,
                                  dropout_rng)
    m = batch.num_pairs
    n = batch.text_len
    by_block = sorted(range(m), key=batch.block_of)
    subj_idx = [n + 4 * j for j in range(m)]
    obj_idx = [n + 4 * j + 2 for j in range(m)]
    rep = marker_pair_representation(hidden, subj_idx, obj_idx)
    if model.config.mode.uses_type_embeddings:
        subj_t = [model.entity_labels.index(batch.pairs[k].subject_type)
                  for k in by_block]
        obj_t = [model.entity_labels.index(batch.pairs[k].object_type)
                 for k in by_block]
        rep = append_type_embeddings(rep, subj_t, obj_t,
                                     model.store[model.head_prefix + "type_emb"])
    logits = relation_logits(rep, model.store, model.head_prefix)
    order = [batch.block_of(k) for k in range(m)]
    if order == list(range(m)):
        return logits
    return T.gather_rows(logits, order)


def approx_logits(model: RelationModel, window: ContextWindow,
                  cands: Sequence[RelationCandidate],
                  token_budget: int = DEFAULT_TOKEN_BUDGET) -> Tensor:
    """Concatenated per-pair logits across however many batches are needed."""
    batches = chunk_pairs(model, window, cands, token_budget)
    if not batches:
        return Tensor(np.zeros((0, model.relation_labels.num_classes)))
    parts = [approx_forward(model, b) for b in batches]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def predict_relations_approx(model: RelationModel, window: ContextWindow,
                             entities: Sequence[tuple[Span, str]],
                             token_budget: int = DEFAULT_TOKEN_BUDGET
                             ) -> list[tuple[Span, Span, str]]:
    """Batched counterpart of RelationModel.predict_window."""
    cands = gold_pair_candidates(entities, window)
    if not cands:
        return []
    with T.no_grad():
        logits = approx_logits(model, window, cands, token_budget)
    best = np.argmax(logits.data, axis=1)
    return [(c.subject, c.object, model.relation_labels.name(int(k)))
            for c, k in zip(cands, best) if k != 0]


# ---------------------------------------------------------------------------
# throughput measurement
# ---------------------------------------------------------------------------


def _sentence_work(docs: Sequence[AnnotatedDocument], window_size: int):
    """(window, candidates) per sentence that has at least one ordered pair."""
    work = []
    for doc in docs:
        for s_idx, ents in enumerate(doc.entities):
            if len(ents) < 2:
                continue
            window = make_window(doc, s_idx, window_size)
            work.append((window, gold_pair_candidates(ents, window)))
    return work


def benchmark_speed(model: RelationModel, docs: Sequence[AnnotatedDocument],
                    mode: str, window_size: int = 100,
                    token_budget: int = DEFAULT_TOKEN_BUDGET,
                    repeats: int = 3) -> dict:
    """Median wall-clock throughput of full vs batched inference.

    Runs one warm-up pass plus ``repeats`` timed passes (at least 3) over
    every sentence with >= 2 gold entities and reports a flat JSON-ready
    record: mode, sentences/sec, encoder passes, pair count, wall ms.
    """
    if mode not in ("full", "approx"):
        raise UsageError(f"benchmark mode must be 'full' or 'approx', got {mode!r}")
    repeats = max(3, int(repeats))
    work = _sentence_work(docs, window_size)
    total_pairs = sum(len(cands) for _, cands in work)

    passes = 0
    original_encode = model.encoder.encode

    def counting_encode(*args, **kwargs):
        nonlocal passes
        passes += 1
        return original_encode(*args, **kwargs)

    def run_once():
        with T.no_grad():
            for window, cands in work:
                if mode == "full":
                    model.forward_window(window, cands)
                else:
                    for batch in chunk_pairs(model, window, cands, token_budget):
                        approx_forward(model, batch)

    model.encoder.encode = counting_encode
    try:
        run_once()  # warm-up; also the pass we count
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            run_once()
            times.append(time.perf_counter() - t0)
    finally:
        model.encoder.encode = original_encode

    wall = float(np.median(times))
    return {
        "mode": mode,
        "sentences_per_sec": len(work) / wall if wall > 0 else float("inf"),
        "encoder_passes": passes // (repeats + 1),
        "pairs": total_pairs,
        "wall_ms": wall * 1000.0,
    }
