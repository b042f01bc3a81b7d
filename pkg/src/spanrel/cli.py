"""Command-line surface.

Subcommands: gen-data, train-entity, train-relation, predict, evaluate,
check-equivalence, bench, sweep-window. Every run resolves one flat
configuration (defaults <- ``--config`` file <- flags), printable with
``--show-config``. Reports are JSON on stdout; logs go to stderr.

Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric divergence, 4 property
violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .approx import approx_logits, benchmark_speed, chunk_pairs
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, resolve_config
from .corpus import (
    ContextWindow,
    Vocabulary,
    collect_types,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .encoder import MarkedInput
from .entity import EntityLabelSet, EntityModel, Span
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InputError,
    PropertyViolation,
    UsageError,
)
from .pipeline import compare_predictions, evaluate_corpus, predict_corpus
from .relation import (
    MarkerVocabulary,
    RelationCandidate,
    RelationLabelSet,
    RelationModel,
)
from .training import (
    init_entity_aux_head,
    train_entity,
    train_joint_shared,
    train_relation,
    write_history,
)

log = logging.getLogger("spanrel")

_CONFIG_FIELDS = [f.name for f in dataclasses.fields(RunConfig)]


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors by default; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE",
                     help="flat key=value config file")
    sub.add_argument("--show-config", action="store_true",
                     help="print the resolved config JSON and exit")
    group = sub.add_argument_group("config overrides")
    for name in _CONFIG_FIELDS:
        group.add_argument(f"--{name.replace('_', '-')}", dest=name,
                           metavar="V", default=None)


def _resolve(args) -> RunConfig:
    overrides = {name: getattr(args, name) for name in _CONFIG_FIELDS}
    return resolve_config(args.config, overrides)


def _need(cfg: RunConfig, field: str) -> str:
    value = getattr(cfg, field)
    if value is None:
        raise UsageError(f"--{field.replace('_', '-')} is required here")
    return value


# ---------------------------------------------------------------------------
# model construction and checkpoint snapshots
# ---------------------------------------------------------------------------

def _label_inventory(cfg: RunConfig, docs) -> tuple[list[str], list[str]]:
    etypes, rtypes = collect_types(docs)
    return (list(cfg.entity_types) or etypes,
            list(cfg.relation_types) or rtypes)


def _snapshot(kind: str, cfg: RunConfig, vocab: Vocabulary,
              etypes, rtypes) -> dict:
    return {
        "kind": kind,
        "run_config": cfg.to_dict(),
        "vocab_ids": vocab.id_list(),
        "text_size": vocab.text_size,
        "entity_types": list(etypes),
        "relation_types": list(rtypes),
        "symmetric_types": list(cfg.symmetric_types),
    }


def _runconfig_from_snapshot(snap: dict) -> RunConfig:
    raw = dict(snap["run_config"])
    for key in ("entity_types", "relation_types", "symmetric_types"):
        raw[key] = tuple(raw.get(key, ()))
    return RunConfig(**raw)


def _read_snapshot(path, kinds: tuple[str, ...]):
    ckpt = read_checkpoint(path)
    snap = ckpt.config
    kind = snap.get("kind")
    if kind not in kinds:
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected one of "
                        f"{', '.join(kinds)}")
    cfg = _runconfig_from_snapshot(snap)
    vocab = Vocabulary.from_id_list(list(snap["vocab_ids"]),
                                    int(snap["text_size"]))
    return snap, cfg, vocab


def _new_entity_model(cfg: RunConfig, vocab: Vocabulary, etypes, rtypes,
                      rng: np.random.Generator) -> EntityModel:
    model = EntityModel(cfg.encoder_config(len(vocab)),
                        cfg.entity_model_config(),
                        EntityLabelSet(tuple(etypes)), rng=rng)
    if cfg.entity_aux_relation_loss:
        init_entity_aux_head(model.store, rng, cfg.d_model, cfg.width_emb_dim,
                             len(rtypes) + 1)
    return model


def _new_relation_model(cfg: RunConfig, vocab: Vocabulary, markers, etypes,
                        rtypes, rng: np.random.Generator,
                        store=None) -> RelationModel:
    rlabels = RelationLabelSet(tuple(rtypes),
                               symmetric=frozenset(cfg.symmetric_types))
    return RelationModel(cfg.encoder_config(len(vocab)),
                         cfg.relation_model_config(),
                         EntityLabelSet(tuple(etypes)), rlabels, markers,
                         rng=rng, store=store)


def _load_entity_model(path):
    snap, cfg, vocab = _read_snapshot(path, ("entity",))
    # marker tokens live in the saved vocab even for entity-only checkpoints,
    # keeping ids aligned with sibling relation models
    rng = np.random.default_rng(0)
    model = _new_entity_model(cfg, vocab, snap["entity_types"],
                              snap["relation_types"], rng)
    load_checkpoint(path, model.store)
    return model, vocab, snap


def _load_relation_model(path):
    snap, cfg, vocab = _read_snapshot(path, ("relation",))
    markers = MarkerVocabulary(vocab, snap["entity_types"])
    rng = np.random.default_rng(0)
    model = _new_relation_model(cfg, vocab, markers, snap["entity_types"],
                                snap["relation_types"], rng)
    load_checkpoint(path, model.store)
    return model, vocab, snap


def _load_joint_models(path):
    snap, cfg, vocab = _read_snapshot(path, ("joint",))
    markers = MarkerVocabulary(vocab, snap["entity_types"])
    rng = np.random.default_rng(0)
    emodel = _new_entity_model(cfg, vocab, snap["entity_types"],
                               snap["relation_types"], rng)
    rmodel = _new_relation_model(cfg, vocab, markers, snap["entity_types"],
                                 snap["relation_types"], rng,
                                 store=emodel.store)
    load_checkpoint(path, emodel.store)
    return emodel, rmodel, vocab, snap


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def _write_tsv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def _history_summary(result) -> dict:
    return {"best_epoch": result.best_epoch, "best_metric": result.best_metric,
            "epochs": sum(1 for h in result.history if h["split"] == "train")}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig):
    docs = generate_synthetic(seed=cfg.seed, size=args.size)
    save_corpus(docs, args.out)
    etypes, rtypes = collect_types(docs)
    log.info("wrote %d documents to %s", len(docs), args.out)
    return {"documents": len(docs), "path": str(args.out), "seed": cfg.seed,
            "entity_types": etypes, "relation_types": rtypes}


def cmd_train_entity(args, cfg: RunConfig):
    train_docs = load_corpus(_need(cfg, "train_path"),
                             max_span_len=cfg.max_span_len)
    dev_docs = load_corpus(_need(cfg, "dev_path"), max_span_len=cfg.max_span_len)
    etypes, rtypes = _label_inventory(cfg, train_docs)
    vocab = Vocabulary.from_corpus(train_docs)
    MarkerVocabulary(vocab, etypes)  # reserve marker ids alongside text ids
    rng = np.random.default_rng(cfg.seed)
    model = _new_entity_model(cfg, vocab, etypes, rtypes, rng)
    rlabels = RelationLabelSet(tuple(rtypes)) if cfg.entity_aux_relation_loss \
        else None
    result = train_entity(model, vocab, train_docs, dev_docs,
                          cfg.train_config(), relation_labels=rlabels)
    save_checkpoint(args.out, model.store,
                    _snapshot("entity", cfg, vocab, etypes, rtypes))
    if args.history:
        write_history(result.history, args.history)
    log.info("entity training done: best dev F1 %.4f at epoch %d",
             result.best_metric, result.best_epoch)
    return {**_history_summary(result), "checkpoint": str(args.out)}


def _fold_entity_models(cfg: RunConfig, vocab, etypes, rtypes, train_docs,
                        dev_docs, k: int):
    from .corpus import jackknife_folds

    models = []
    for i, (fold_train, _) in enumerate(jackknife_folds(train_docs, k)):
        log.info("jackknife fold %d/%d: training entity model on %d docs",
                 i + 1, k, len(fold_train))
        rng = np.random.default_rng(cfg.seed + i)
        fold_model = _new_entity_model(cfg, vocab, etypes, rtypes, rng)
        train_entity(fold_model, vocab, fold_train, dev_docs,
                     cfg.train_config())
        models.append(fold_model)
    return models


def cmd_train_relation(args, cfg: RunConfig):
    train_docs = load_corpus(_need(cfg, "train_path"),
                             max_span_len=cfg.max_span_len)
    dev_docs = load_corpus(_need(cfg, "dev_path"), max_span_len=cfg.max_span_len)

    entity_model = None
    if args.entity_checkpoint:
        # the entity checkpoint pins vocabulary and label inventory so both
        # models agree on token ids
        entity_model, vocab, snap = _load_entity_model(args.entity_checkpoint)
        etypes = list(snap["entity_types"])
        rtypes = list(snap["relation_types"])
    else:
        etypes, rtypes = _label_inventory(cfg, train_docs)
        vocab = Vocabulary.from_corpus(train_docs)
    markers = MarkerVocabulary(vocab, etypes)
    rng = np.random.default_rng(cfg.seed)

    if cfg.shared_encoder:
        emodel = _new_entity_model(cfg, vocab, etypes, rtypes, rng)
        rmodel = _new_relation_model(cfg, vocab, markers, etypes, rtypes, rng,
                                     store=emodel.store)
        result = train_joint_shared(emodel, rmodel, train_docs, dev_docs,
                                    cfg.train_config())
        save_checkpoint(args.out, emodel.store,
                        _snapshot("joint", cfg, vocab, etypes, rtypes))
    else:
        rmodel = _new_relation_model(cfg, vocab, markers, etypes, rtypes, rng)
        fold_models = None
        if cfg.relation_training_source == "jackknife":
            if entity_model is not None:
                raise UsageError("jackknife trains its own fold models; drop "
                                 "--entity-checkpoint")
            fold_models = _fold_entity_models(cfg, vocab, etypes, rtypes,
                                              train_docs, dev_docs,
                                              args.jackknife_k)
        result = train_relation(rmodel, train_docs, dev_docs,
                                cfg.train_config(), entity_model=entity_model,
                                fold_models=fold_models)
        save_checkpoint(args.out, rmodel.store,
                        _snapshot("relation", cfg, vocab, etypes, rtypes))
    if args.history:
        write_history(result.history, args.history)
    log.info("relation training done: best dev Rel F1 %.4f at epoch %d",
             result.best_metric, result.best_epoch)
    return {**_history_summary(result), "checkpoint": str(args.out)}


def cmd_predict(args, cfg: RunConfig):
    if Path(args.entity_checkpoint).resolve() == \
            Path(args.relation_checkpoint).resolve():
        emodel, rmodel, vocab, _ = _load_joint_models(args.entity_checkpoint)
    else:
        emodel, vocab, _ = _load_entity_model(args.entity_checkpoint)
        rmodel, _, _ = _load_relation_model(args.relation_checkpoint)
    docs = load_corpus(args.input, max_span_len=cfg.max_span_len)
    pred = predict_corpus(emodel, rmodel, vocab, docs,
                          window_size=cfg.window_size, mode=args.mode,
                          token_budget=cfg.token_budget,
                          max_workers=args.max_workers)
    save_corpus(pred, args.out)
    n_rel = sum(len(row) for d in pred for row in d.predicted_relations)
    log.info("predicted %d relation instances over %d documents", n_rel,
             len(pred))
    return {"documents": len(pred), "mode": args.mode, "out": str(args.out),
            "predicted_relations": n_rel}


def cmd_evaluate(args, cfg: RunConfig):
    if args.compare:
        first, second = args.compare
        report = compare_predictions(load_corpus(first), load_corpus(second))
        log.info("relation agreement %.4f", report["relation_agreement"])
        return report
    if not args.pred:
        raise UsageError("--pred is required (or use --compare A B)")
    pred_docs = load_corpus(args.pred)
    gold_docs = load_corpus(args.gold) if args.gold else pred_docs
    report = evaluate_corpus(pred_docs, gold_docs,
                             symmetric_types=cfg.symmetric_types)
    return report.to_json()


def cmd_check_equivalence(args, cfg: RunConfig):
    rng = np.random.default_rng(cfg.seed)
    docs = generate_synthetic(seed=cfg.seed, size=12)
    etypes, _ = collect_types(docs)
    vocab = Vocabulary.from_corpus(docs)
    markers = MarkerVocabulary(vocab, etypes)
    model = _new_relation_model(cfg, vocab, markers, etypes, ["REL_A"], rng)
    words = vocab.id_list()[2:vocab.text_size]

    def random_case():
        n = int(rng.integers(8, 61))
        tokens = [words[int(i)] for i in rng.integers(0, len(words), size=n)]
        window = ContextWindow(tokens=tokens, target_offset=0, target_len=n)
        num_pairs = int(rng.integers(1, 13))
        cands = []
        seen = set()
        for _ in range(num_pairs * 3):
            if len(cands) == num_pairs:
                break
            a = sorted(int(x) for x in rng.integers(0, n, size=2))
            b = sorted(int(x) for x in rng.integers(0, n, size=2))
            s1 = Span(a[0], min(a[1], a[0] + cfg.max_span_len - 1))
            s2 = Span(b[0], min(b[1], b[0] + cfg.max_span_len - 1))
            if s1 == s2 or (s1, s2) in seen:
                continue
            seen.add((s1, s2))
            cands.append(RelationCandidate(
                s1, etypes[int(rng.integers(0, len(etypes)))],
                s2, etypes[int(rng.integers(0, len(etypes)))], window))
        return window, cands

    max_text = max_pair = max_perm = 0.0
    for _ in range(args.trials):
        window, cands = random_case()
        n = len(window.tokens)
        batched = approx_logits(model, window, cands, cfg.token_budget).data
        for batch in chunk_pairs(model, window, cands, cfg.token_budget):
            hidden = model.encoder.encode(batch.marked, model.store,
                                          model.enc_prefix).data
            bare = model.encoder.encode(
                MarkedInput.plain(batch.window_ids), model.store,
                model.enc_prefix).data
            max_text = max(max_text, float(np.abs(hidden[:n] - bare).max()))
        for k, cand in enumerate(cands):
            single = approx_logits(model, window, [cand]).data[0]
            scale = max(float(np.abs(single).max()), 1e-12)
            max_pair = max(max_pair,
                           float(np.abs(batched[k] - single).max()) / scale)
        perm = rng.permutation(len(cands))
        shuffled = approx_logits(model, window,
                                 [cands[int(i)] for i in perm],
                                 cfg.token_budget).data
        max_perm = max(max_perm,
                       float(np.abs(shuffled - batched[perm]).max()))

    report = {"trials": args.trials, "max_text_residual": max_text,
              "max_pair_relative_residual": max_pair,
              "max_permutation_residual": max_perm,
              "thresholds": {"text": 1e-12, "pair": 1e-9,
                             "permutation": 1e-12}}
    if max_text > 1e-12:
        raise PropertyViolation(f"text hidden states drift with markers "
                                f"appended: residual {max_text:.3e}")
    if max_pair > 1e-9:
        raise PropertyViolation(f"batched pair logits deviate from singleton "
                                f"batches: relative residual {max_pair:.3e}")
    if max_perm > 1e-12:
        raise PropertyViolation(f"pair order changes batched logits: "
                                f"residual {max_perm:.3e}")
    report["ok"] = True
    return report


def cmd_bench(args, cfg: RunConfig):
    rmodel, _, _ = _load_relation_model(args.relation_checkpoint)
    docs = load_corpus(args.input, max_span_len=cfg.max_span_len)
    rows = [benchmark_speed(rmodel, docs, mode, window_size=cfg.window_size,
                            token_budget=cfg.token_budget,
                            repeats=args.repeats)
            for mode in ("full", "approx")]
    full, app = rows
    report = {
        "full": full,
        "approx": app,
        "speedup": app["sentences_per_sec"] / max(full["sentences_per_sec"],
                                                  1e-12),
        "encoder_pass_ratio": full["encoder_passes"] /
            max(app["encoder_passes"], 1),
    }
    if args.out_dir:
        from .plots import plot_benchmark

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = ["mode", "sentences_per_sec", "encoder_passes", "pairs",
                  "wall_ms"]
        _write_tsv(out / "bench.tsv", header,
                   [[r[h] for h in header] for r in rows])
        plot_benchmark(rows, out / "bench.png")
        log.info("wrote %s and %s", out / "bench.tsv", out / "bench.png")
    return report


def cmd_sweep_window(args, cfg: RunConfig):
    train_docs = load_corpus(_need(cfg, "train_path"),
                             max_span_len=cfg.max_span_len)
    dev_docs = load_corpus(_need(cfg, "dev_path"), max_span_len=cfg.max_span_len)
    etypes, rtypes = _label_inventory(cfg, train_docs)
    vocab = Vocabulary.from_corpus(train_docs)
    markers = MarkerVocabulary(vocab, etypes)
    legs = []
    for token in args.windows.split(","):
        token = token.strip()
        if token == "bare":
            legs.append(("bare", 1))  # a 1-token budget always degrades to
            # the bare sentence
        else:
            legs.append((int(token), int(token)))

    rows = []
    for label, wsize in legs:
        leg_cfg = dataclasses.replace(cfg, window_size=wsize)
        rng = np.random.default_rng(cfg.seed)
        model = _new_relation_model(leg_cfg, vocab, markers, etypes, rtypes,
                                    rng)
        log.info("sweep window=%s: training relation model", label)
        with warnings.catch_warnings():
            if label == "bare":
                warnings.simplefilter("ignore", UserWarning)
            result = train_relation(model, train_docs, dev_docs,
                                    leg_cfg.train_config())
        best = next(h for h in result.history
                    if h["split"] == "dev" and h["epoch"] == result.best_epoch)
        rows.append({"window": label, "rel_f1": best["rel_f1"],
                     "relplus_f1": best["relplus_f1"],
                     "best_epoch": result.best_epoch})
    if args.out_dir:
        from .plots import plot_window_sweep

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = ["window", "rel_f1", "relplus_f1", "best_epoch"]
        _write_tsv(out / "sweep.tsv", header,
                   [[r[h] for h in header] for r in rows])
        plot_window_sweep(rows, out / "sweep.png")
        log.info("wrote %s and %s", out / "sweep.tsv", out / "sweep.png")
    return {"windows": rows}


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="spanrel",
                     description="span-based entity and relation extraction")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, func, help_):
        p = subs.add_parser(name, help=help_)
        p.set_defaults(func=func)
        _add_config_flags(p)
        return p

    p = sub("gen-data", cmd_gen_data, "write a synthetic JSON-lines corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=200)

    p = sub("train-entity", cmd_train_entity, "train the span entity model")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="JSON-lines training history path")

    p = sub("train-relation", cmd_train_relation,
            "train the relation model (joint when --shared-encoder true)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="JSON-lines training history path")
    p.add_argument("--entity-checkpoint",
                   help="entity model for pruned candidate sources")
    p.add_argument("--jackknife-k", type=int, default=2,
                   help="folds when relation-training-source=jackknife")

    p = sub("predict", cmd_predict, "run the two-stage pipeline")
    p.add_argument("--input", required=True)
    p.add_argument("--entity-checkpoint", required=True)
    p.add_argument("--relation-checkpoint", required=True,
                   help="same path as --entity-checkpoint for a joint "
                        "checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("full", "approx"), default="full")
    p.add_argument("--max-workers", type=int, default=1)

    p = sub("evaluate", cmd_evaluate, "score predictions against gold")
    p.add_argument("--pred")
    p.add_argument("--gold", help="defaults to the prediction file itself")
    p.add_argument("--compare", nargs=2, metavar=("FIRST", "SECOND"),
                   help="report agreement between two prediction files")

    p = sub("check-equivalence", cmd_check_equivalence,
            "verify the batched-marker equivalence properties")
    p.add_argument("--trials", type=int, default=25)

    p = sub("bench", cmd_bench, "time full vs batched relation inference")
    p.add_argument("--input", required=True)
    p.add_argument("--relation-checkpoint", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out-dir", help="also write bench.tsv and bench.png")

    p = sub("sweep-window", cmd_sweep_window,
            "retrain the relation model across context-window sizes")
    p.add_argument("--windows", default="bare,100,200,300")
    p.add_argument("--out-dir", help="also write sweep.tsv and sweep.png")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.show_config:
            print(cfg.canonical())
            return 0
        report = args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return 1
    except (DataError, InputError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except DivergenceError as exc:
        log.error("%s", exc)
        return 3
    except PropertyViolation as exc:
        log.error("%s", exc)
        return 4
    if report is not None:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
