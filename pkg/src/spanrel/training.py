"""Training loops for the entity and relation models.

Plain Adam with a linear warmup/decay schedule, per-group learning rates
(slow encoder, fast heads for the entity model; one rate for the relation
model), deterministic per-epoch shuffles from the run seed, and best-dev
model selection. Everything is bit-deterministic given (seed, config, data):
two runs produce identical histories and identical parameters.

Relation training supports several candidate sources: gold spans,
jackknifed predicted spans (fold models predict on their held-out fold),
and pruned span lists from a trained entity model (typed by predictions,
untyped, or untyped with an auxiliary entity loss).
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import AnnotatedDocument, ContextWindow, Vocabulary, jackknife_folds, make_window
from .encoder import MarkedInput
from .entity import (
    NULL_LABEL,
    EntityModel,
    Span,
    entity_forward,
    entity_loss,
    enumerate_spans,
    gold_span_targets,
    predict_entities,
    top_lambda_spans,
)
from .errors import ConfigError, DivergenceError, InputError
from .metrics import PRF, score_entities, score_relations
from .relation import (
    RelationCandidate,
    RelationLabelSet,
    RelationModel,
    gold_pair_candidates,
    relation_logits,
    relation_loss,
    relation_pair_targets,
    text_pair_representation,
)
from .tensor import ParameterStore, Tensor

RELATION_SOURCES = ("gold", "jackknife", "pruned_typed", "pruned_untyped",
                    "pruned_untyped_eloss")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs_entity: int = 100
    epochs_relation: int = 10
    batch_entity: int = 16
    batch_relation: int = 32
    lr_encoder: float = 1e-5
    lr_heads: float = 5e-4
    lr_relation: float = 2e-5
    warmup_ratio: float = 0.1
    seed: int = 0
    shared_encoder: bool = False
    entity_aux_relation_loss: bool = False
    relation_training_source: str = "gold"
    grad_clip_norm: float | None = None
    window_size: int = 100
    prune_lambda: float = 0.4

    def __post_init__(self):
        for field in ("epochs_entity", "epochs_relation", "batch_entity",
                      "batch_relation", "window_size"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"TrainConfig.{field} must be >= 1")
        for field in ("lr_encoder", "lr_heads", "lr_relation"):
            if not getattr(self, field) > 0:
                raise ConfigError(f"TrainConfig.{field} must be positive")
        if not 0 < self.warmup_ratio < 1:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} outside (0, 1)")
        if self.relation_training_source not in RELATION_SOURCES:
            raise ConfigError(
                f"unknown relation_training_source "
                f"{self.relation_training_source!r} (choose from "
                f"{', '.join(RELATION_SOURCES)})")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be positive when set")
        if not 0 < self.prune_lambda <= 1:
            raise ConfigError(f"prune_lambda {self.prune_lambda} outside (0, 1]")


@dataclasses.dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_metric: float


def lr_schedule(step: int | float, total_steps: int, base_lr: float,
                warmup_ratio: float) -> float:
    """Linear 0 -> base_lr over the warmup fraction, then linear back to 0."""
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warm = warmup_ratio * total_steps
    if step <= warm:
        return base_lr * step / warm
    return base_lr * (total_steps - step) / (total_steps - warm)


def global_grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)


def clip_gradients(store: ParameterStore, max_norm: float | None) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm; ``None`` disables clipping.
    """
    norm = global_grad_norm(store)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= factor
    return norm


class Adam:
    """Plain Adam (beta1=0.9, beta2=0.999, eps=1e-8, no weight decay).

    Learning rates are per parameter name; parameters absent from the map
    are never touched, which is what lets one store host several phases
    (shared encoder, later-added heads) without cross-talk.
    """

    def __init__(self, store: ParameterStore, lr_by_name: Mapping[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        unknown = set(lr_by_name) - set(store.names())
        if unknown:
            raise ConfigError(f"learning rates for unknown parameters: "
                              f"{sorted(unknown)}")
        self.store = store
        self.lr_by_name = dict(lr_by_name)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.store.items():
            if name not in self.lr_by_name or tensor.grad is None:
                continue
            g = tensor.grad
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(tensor.data)
                self._v[name] = np.zeros_like(tensor.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.lr_by_name[name] * lr_scale
            tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def write_history(history: Sequence[dict], path) -> None:
    """One JSON object per line: {epoch, split, loss, ent_f1?, rel_f1?, ...}."""
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# auxiliary relation loss on the entity model (the TEXT variant)
# ---------------------------------------------------------------------------

AUX_PREFIX = "entaux."


def init_entity_aux_head(store: ParameterStore, rng: np.random.Generator,
                         d_model: int, width_emb_dim: int,
                         num_relation_classes: int,
                         prefix: str = AUX_PREFIX) -> None:
    rep_dim = 3 * (2 * d_model + width_emb_dim)
    store.add(prefix + "out_w", rng.normal(0.0, 0.02,
                                           (rep_dim, num_relation_classes)))
    store.add(prefix + "out_b", np.zeros(num_relation_classes))


def entity_aux_relation_loss(hidden: Tensor, entities: Sequence[tuple[Span, str]],
                             relations: Sequence[tuple[Span, Span, str]],
                             relation_labels: RelationLabelSet,
                             store: ParameterStore, offset: int = 0,
                             ent_prefix: str = "ent.",
                             aux_prefix: str = AUX_PREFIX) -> Tensor:
    """Relation cross-entropy from TEXT-style pair features of gold spans.

    Rides on the entity model's encoder and width table; a sentence with
    fewer than two gold entities contributes exactly zero.
    """
    cands = gold_pair_candidates(entities)
    if not cands:
        return Tensor(0.0)
    rep = text_pair_representation(hidden, [c.subject for c in cands],
                                   [c.object for c in cands],
                                   store[ent_prefix + "width_emb"], offset)
    logits = relation_logits(rep, store, aux_prefix)
    targets = relation_pair_targets(cands, relations, relation_labels)
    return relation_loss(logits, targets)


# ---------------------------------------------------------------------------
# example construction
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class EntityExample:
    doc_key: str
    sentence: int
    inp: MarkedInput
    spans: tuple[Span, ...]
    targets: np.ndarray
    offset: int
    gold_entities: tuple
    gold_relations: tuple


def entity_examples(docs: Sequence[AnnotatedDocument], vocab: Vocabulary,
                    model: EntityModel, window_size: int) -> list[EntityExample]:
    out = []
    for doc in docs:
        for s_idx, sentence in enumerate(doc.sentences):
            spans = enumerate_spans(len(sentence), model.config.max_span_len, s_idx)
            if not spans:
                continue
            window = make_window(doc, s_idx, window_size)
            out.append(EntityExample(
                doc_key=doc.doc_key,
                sentence=s_idx,
                inp=MarkedInput.plain(vocab.encode(window.tokens)),
                spans=tuple(spans),
                targets=gold_span_targets(spans, doc.gold_entity_map(s_idx),
                                          model.labels),
                offset=window.target_offset,
                gold_entities=tuple(doc.entities[s_idx]),
                gold_relations=tuple(doc.relations[s_idx]),
            ))
    return out


@dataclasses.dataclass(frozen=True)
class RelationExample:
    doc_key: str
    sentence: int
    window: ContextWindow
    cands: tuple[RelationCandidate, ...]
    targets: np.ndarray
    gold_entities: tuple
    gold_relations: tuple


def _predicted_entities(entity_model: EntityModel, vocab: Vocabulary,
                        doc: AnnotatedDocument, s_idx: int,
                        window: ContextWindow) -> list[tuple[Span, str]]:
    spans = enumerate_spans(len(doc.sentences[s_idx]),
                            entity_model.config.max_span_len, s_idx)
    inp = MarkedInput.plain(vocab.encode(window.tokens))
    return entity_model.predict(inp, spans, window.target_offset)


def _pruned_entities(entity_model: EntityModel, vocab: Vocabulary,
                     doc: AnnotatedDocument, s_idx: int, window: ContextWindow,
                     lam: float, typed: bool) -> list[tuple[Span, str]]:
    """Top lam*n spans; types from the entity model when ``typed`` (possibly
    the null type), otherwise gold types with null for non-gold spans."""
    sentence_len = len(doc.sentences[s_idx])
    spans = enumerate_spans(sentence_len, entity_model.config.max_span_len, s_idx)
    if not spans:
        return []
    inp = MarkedInput.plain(vocab.encode(window.tokens))
    with T.no_grad():
        logits = entity_model.forward(inp, spans, window.target_offset)
    kept = top_lambda_spans(logits, spans, lam, sentence_len)
    if typed:
        best = np.argmax(logits.data, axis=1)
        by_span = {s: int(c) for s, c in zip(spans, best)}
        return [(s, entity_model.labels.name(by_span[s])) for s in kept]
    gold = doc.gold_entity_map(s_idx)
    return [(s, gold.get(s, NULL_LABEL)) for s in kept]


def relation_examples(model: RelationModel, docs: Sequence[AnnotatedDocument],
                      config: TrainConfig, entity_model: EntityModel | None = None,
                      fold_models: Sequence[EntityModel] | None = None,
                      source: str | None = None) -> list[RelationExample]:
    """Per-sentence relation training examples under the configured source.

    Candidate pairs come from gold entities, jackknifed predictions, or a
    pruned span list; targets always come from gold relations (pairs without
    a gold relation get the null class).
    """
    source = config.relation_training_source if source is None else source
    vocab = model.markers.vocab
    fold_of_doc: dict[str, int] = {}
    if source == "jackknife":
        if not fold_models:
            raise ConfigError("relation_training_source 'jackknife' requires "
                              "per-fold entity models")
        for i, (_, holdout) in enumerate(jackknife_folds(docs, len(fold_models))):
            for doc in holdout:
                fold_of_doc[doc.doc_key] = i
    elif source.startswith("pruned") and entity_model is None:
        raise ConfigError(f"relation_training_source {source!r} requires a "
                          "trained entity model")

    out = []
    for doc in docs:
        for s_idx in range(len(doc.sentences)):
            window = make_window(doc, s_idx, config.window_size)
            if source == "gold":
                ents = list(doc.entities[s_idx])
            elif source == "jackknife":
                holder = fold_models[fold_of_doc[doc.doc_key]]
                ents = _predicted_entities(holder, vocab, doc, s_idx, window)
            else:
                ents = _pruned_entities(entity_model, vocab, doc, s_idx, window,
                                        config.prune_lambda,
                                        typed=(source == "pruned_typed"))
            cands = gold_pair_candidates(ents, window)
            if not cands:
                continue
            out.append(RelationExample(
                doc_key=doc.doc_key,
                sentence=s_idx,
                window=window,
                cands=tuple(cands),
                targets=relation_pair_targets(cands, doc.relations[s_idx],
                                              model.relation_labels),
                gold_entities=tuple(doc.entities[s_idx]),
                gold_relations=tuple(doc.relations[s_idx]),
            ))
    return out


# ---------------------------------------------------------------------------
# evaluation passes
# ---------------------------------------------------------------------------


def evaluate_entity(model: EntityModel, examples: Sequence[EntityExample]
                    ) -> tuple[float, PRF]:
    preds, golds, total = [], [], 0.0
    with T.no_grad():
        for ex in examples:
            logits = model.forward(ex.inp, ex.spans, ex.offset)
            total += entity_loss(logits, ex.targets).data.item()
            preds.append(predict_entities(logits, ex.spans, model.labels))
            golds.append(list(ex.gold_entities))
    return total / max(1, len(examples)), score_entities(preds, golds)


def evaluate_relation(model: RelationModel, examples: Sequence[RelationExample]
                      ) -> tuple[float, PRF, PRF]:
    """Dev loss plus boundary/strict scores over gold-entity candidates."""
    pred_units, gold_rel_units, gold_ent_units, total = [], [], [], 0.0
    with T.no_grad():
        for ex in examples:
            logits, _ = model.forward_window(ex.window, ex.cands)
            total += relation_loss(logits, ex.targets).data.item()
            best = np.argmax(logits.data, axis=1)
            pred_units.append([
                (c.subject, c.subject_type, c.object, c.object_type,
                 model.relation_labels.name(int(k)))
                for c, k in zip(ex.cands, best) if k != 0
            ])
            gold_rel_units.append(list(ex.gold_relations))
            gold_ent_units.append(list(ex.gold_entities))
    flags = model.relation_labels.symmetric
    rel = score_relations(pred_units, gold_rel_units, gold_ent_units,
                          strict=False, symmetric_flags=flags)
    relplus = score_relations(pred_units, gold_rel_units, gold_ent_units,
                              strict=True, symmetric_flags=flags)
    return total / max(1, len(examples)), rel, relplus


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _check_finite(value: float, what: str, epoch: int, batch: int,
                  lr: float) -> None:
    if not math.isfinite(value):
        raise DivergenceError(
            f"{what} diverged: loss={value} at epoch {epoch}, batch {batch}, "
            f"lr={lr:.3g}; try a lower learning rate or gradient clipping")


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo:lo + batch_size]


def train_entity(model: EntityModel, vocab: Vocabulary,
                 train_docs: Sequence[AnnotatedDocument],
                 dev_docs: Sequence[AnnotatedDocument],
                 config: TrainConfig,
                 relation_labels: RelationLabelSet | None = None) -> TrainResult:
    """Adam over span-classification loss; best dev entity F1 wins.

    With ``entity_aux_relation_loss`` set, each sentence also contributes a
    relation cross-entropy from TEXT-style pair features (requires
    ``relation_labels``), trained at the head learning rate.
    """
    store = model.store
    aux = config.entity_aux_relation_loss
    if aux and relation_labels is None:
        raise ConfigError("entity_aux_relation_loss requires relation labels")
    rng = np.random.default_rng(config.seed)
    if aux and AUX_PREFIX + "out_w" not in store:
        init_entity_aux_head(store, rng, model.encoder.config.d_model,
                             model.config.width_emb_dim,
                             relation_labels.num_classes)

    train_ex = entity_examples(train_docs, vocab, model, config.window_size)
    dev_ex = entity_examples(dev_docs, vocab, model, config.window_size)
    if not train_ex:
        raise InputError("no trainable sentences in the training corpus")

    lr_map = {n: config.lr_encoder for n in model.encoder_param_names()}
    lr_map.update({n: config.lr_heads for n in model.head_param_names()})
    if aux:
        lr_map.update({AUX_PREFIX + "out_w": config.lr_heads,
                       AUX_PREFIX + "out_b": config.lr_heads})
    opt = Adam(store, lr_map)

    steps_per_epoch = math.ceil(len(train_ex) / config.batch_entity)
    total_steps = config.epochs_entity * steps_per_epoch
    history: list[dict] = []
    best_metric, best_epoch, best_state = -1.0, -1, store.state_dict()
    step = 0
    for epoch in range(config.epochs_entity):
        order = rng.permutation(len(train_ex))
        epoch_losses = []
        for b, batch in enumerate(_batches(order, config.batch_entity)):
            store.zero_grad()
            parts = []
            for i in batch:
                ex = train_ex[i]
                hidden = model.encode(ex.inp)
                logits = entity_forward(hidden, ex.spans, store,
                                        model.head_prefix, ex.offset)
                parts.append(entity_loss(logits, ex.targets))
                if aux:
                    parts.append(entity_aux_relation_loss(
                        hidden, ex.gold_entities, ex.gold_relations,
                        relation_labels, store, ex.offset, model.head_prefix))
            loss = parts[0] if len(parts) == 1 else T.add_n(parts)
            step += 1
            lr_scale = lr_schedule(step, total_steps, 1.0, config.warmup_ratio)
            _check_finite(loss.data.item(), "entity training", epoch, b, lr_scale)
            T.backward(loss)
            clip_gradients(store, config.grad_clip_norm)
            opt.step(lr_scale)
            epoch_losses.append(loss.data.item() / len(batch))
        dev_loss, prf = evaluate_entity(model, dev_ex)
        history.append({"epoch": epoch, "split": "train",
                        "loss": float(np.mean(epoch_losses))})
        history.append({"epoch": epoch, "split": "dev", "loss": dev_loss,
                        "ent_f1": prf.f1})
        if prf.f1 > best_metric:
            best_metric, best_epoch, best_state = prf.f1, epoch, store.state_dict()
    store.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_metric)


def train_relation(model: RelationModel,
                   train_docs: Sequence[AnnotatedDocument],
                   dev_docs: Sequence[AnnotatedDocument],
                   config: TrainConfig,
                   entity_model: EntityModel | None = None,
                   fold_models: Sequence[EntityModel] | None = None
                   ) -> TrainResult:
    """Adam at one learning rate over summed pair cross-entropies.

    Candidates follow ``config.relation_training_source``; dev selection is
    by boundary relation F1 over gold-entity candidates.
    """
    store = model.store
    train_ex = relation_examples(model, train_docs, config, entity_model,
                                 fold_models)
    dev_ex = relation_examples(model, dev_docs, config, source="gold")
    if not train_ex:
        raise InputError("no sentence yields a candidate pair under source "
                         f"{config.relation_training_source!r}")

    lr_map = {n: config.lr_relation
              for n in model.encoder_param_names() + model.head_param_names()}
    opt = Adam(store, lr_map)
    rng = np.random.default_rng(config.seed)

    steps_per_epoch = math.ceil(len(train_ex) / config.batch_relation)
    total_steps = config.epochs_relation * steps_per_epoch
    history: list[dict] = []
    best_metric, best_epoch, best_state = -1.0, -1, store.state_dict()
    step = 0
    for epoch in range(config.epochs_relation):
        order = rng.permutation(len(train_ex))
        epoch_losses = []
        for b, batch in enumerate(_batches(order, config.batch_relation)):
            store.zero_grad()
            parts = [model.loss_window(train_ex[i].window, train_ex[i].cands,
                                       train_ex[i].targets) for i in batch]
            loss = parts[0] if len(parts) == 1 else T.add_n(parts)
            step += 1
            lr_scale = lr_schedule(step, total_steps, 1.0, config.warmup_ratio)
            _check_finite(loss.data.item(), "relation training", epoch, b,
                          lr_scale)
            T.backward(loss)
            clip_gradients(store, config.grad_clip_norm)
            opt.step(lr_scale)
            epoch_losses.append(loss.data.item() / len(batch))
        dev_loss, rel, relplus = evaluate_relation(model, dev_ex)
        history.append({"epoch": epoch, "split": "train",
                        "loss": float(np.mean(epoch_losses))})
        history.append({"epoch": epoch, "split": "dev", "loss": dev_loss,
                        "rel_f1": rel.f1, "relplus_f1": relplus.f1})
        if rel.f1 > best_metric:
            best_metric, best_epoch, best_state = rel.f1, epoch, store.state_dict()
    store.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_metric)


def train_joint_shared(entity_model: EntityModel, relation_model: RelationModel,
                       train_docs: Sequence[AnnotatedDocument],
                       dev_docs: Sequence[AnnotatedDocument],
                       config: TrainConfig) -> TrainResult:
    """Sum of entity and relation losses through one shared encoder.

    Exists for the shared-vs-separate comparison; runs ``epochs_relation``
    epochs over gold-span relation candidates and selects by dev boundary
    relation F1. Sentences without a candidate pair contribute only the
    entity term.
    """
    if not config.shared_encoder:
        raise ConfigError("train_joint_shared requires the shared_encoder flag")
    if entity_model.store is not relation_model.store:
        raise ConfigError("joint training requires one shared parameter store")
    if entity_model.enc_prefix != relation_model.enc_prefix:
        raise ConfigError("joint training requires one shared encoder prefix")
    store = entity_model.store
    vocab = relation_model.markers.vocab

    ent_ex = entity_examples(train_docs, vocab, entity_model, config.window_size)
    if not ent_ex:
        raise InputError("no trainable sentences in the training corpus")
    rel_by_sentence = {
        (e.doc_key, e.sentence): e
        for e in relation_examples(relation_model, train_docs, config,
                                   source="gold")
    }
    dev_ent = entity_examples(dev_docs, vocab, entity_model, config.window_size)
    dev_rel = relation_examples(relation_model, dev_docs, config, source="gold")

    lr_map = {n: config.lr_encoder for n in entity_model.encoder_param_names()}
    lr_map.update({n: config.lr_heads for n in entity_model.head_param_names()})
    lr_map.update({n: config.lr_relation
                   for n in relation_model.head_param_names()})
    opt = Adam(store, lr_map)
    rng = np.random.default_rng(config.seed)

    steps_per_epoch = math.ceil(len(ent_ex) / config.batch_entity)
    total_steps = config.epochs_relation * steps_per_epoch
    history: list[dict] = []
    best_metric, best_epoch, best_state = -1.0, -1, store.state_dict()
    step = 0
    for epoch in range(config.epochs_relation):
        order = rng.permutation(len(ent_ex))
        epoch_losses = []
        for b, batch in enumerate(_batches(order, config.batch_entity)):
            store.zero_grad()
            parts = []
            for i in batch:
                ex = ent_ex[i]
                hidden = entity_model.encode(ex.inp)
                logits = entity_forward(hidden, ex.spans, store,
                                        entity_model.head_prefix, ex.offset)
                parts.append(entity_loss(logits, ex.targets))
                rex = rel_by_sentence.get((ex.doc_key, ex.sentence))
                if rex is not None:
                    parts.append(relation_model.loss_window(
                        rex.window, rex.cands, rex.targets))
            loss = parts[0] if len(parts) == 1 else T.add_n(parts)
            step += 1
            lr_scale = lr_schedule(step, total_steps, 1.0, config.warmup_ratio)
            _check_finite(loss.data.item(), "joint training", epoch, b, lr_scale)
            T.backward(loss)
            clip_gradients(store, config.grad_clip_norm)
            opt.step(lr_scale)
            epoch_losses.append(loss.data.item() / len(batch))
        dev_loss_e, ent_prf = evaluate_entity(entity_model, dev_ent)
        dev_loss_r, rel, relplus = evaluate_relation(relation_model, dev_rel)
        history.append({"epoch": epoch, "split": "train",
                        "loss": float(np.mean(epoch_losses))})
        history.append({"epoch": epoch, "split": "dev",
                        "loss": dev_loss_e + dev_loss_r,
                        "ent_f1": ent_prf.f1, "rel_f1": rel.f1,
                        "relplus_f1": relplus.f1})
        if rel.f1 > best_metric:
            best_metric, best_epoch, best_state = rel.f1, epoch, store.state_dict()
    store.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_metric)
