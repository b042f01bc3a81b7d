"""Span-based entity and relation extraction on a tiny float64 transformer.

The pieces compose in pipeline order: a corpus of annotated documents, a
context-window encoder, a span classifier for entities, a typed-marker pair
classifier for relations, and a batched approximation that shares one encoder
pass across many pairs. Everything trains with Adam on exact gradients from
the bundled autodiff core; no third-party ML framework is involved.
"""

from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InputError,
    PropertyViolation,
    SpanrelError,
    UsageError,
)
from .corpus import (
    DEFAULT_GRAMMAR,
    AnnotatedDocument,
    ContextWindow,
    SyntheticGrammar,
    Template,
    Vocabulary,
    collect_types,
    generate_synthetic,
    jackknife_folds,
    load_corpus,
    make_window,
    save_corpus,
)
from .encoder import Encoder, EncoderConfig, MarkedInput
from .entity import (
    NULL_LABEL,
    EntityLabelSet,
    EntityModel,
    EntityModelConfig,
    Span,
    enumerate_spans,
    num_spans,
)
from .relation import (
    FeatureMode,
    MarkerVocabulary,
    RelationCandidate,
    RelationLabelSet,
    RelationModel,
    RelationModelConfig,
)
from .approx import (
    DEFAULT_TOKEN_BUDGET,
    approx_logits,
    benchmark_speed,
    predict_relations_approx,
)
from .metrics import PRF, MetricsReport, full_report, score_entities, score_relations
from .training import (
    TrainConfig,
    TrainResult,
    train_entity,
    train_joint_shared,
    train_relation,
)
from .pipeline import compare_predictions, evaluate_corpus, predict_corpus, predict_document
from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, resolve_config

__all__ = [
    "AnnotatedDocument",
    "Checkpoint",
    "ConfigError",
    "ContextWindow",
    "DEFAULT_GRAMMAR",
    "DEFAULT_TOKEN_BUDGET",
    "DataError",
    "DivergenceError",
    "Encoder",
    "EncoderConfig",
    "EntityLabelSet",
    "EntityModel",
    "EntityModelConfig",
    "FeatureMode",
    "InputError",
    "MarkedInput",
    "MarkerVocabulary",
    "MetricsReport",
    "NULL_LABEL",
    "PRF",
    "PropertyViolation",
    "RelationCandidate",
    "RelationLabelSet",
    "RelationModel",
    "RelationModelConfig",
    "RunConfig",
    "Span",
    "SpanrelError",
    "SyntheticGrammar",
    "Template",
    "TrainConfig",
    "TrainResult",
    "UsageError",
    "Vocabulary",
    "approx_logits",
    "benchmark_speed",
    "collect_types",
    "compare_predictions",
    "enumerate_spans",
    "evaluate_corpus",
    "full_report",
    "generate_synthetic",
    "jackknife_folds",
    "load_corpus",
    "load_checkpoint",
    "make_window",
    "num_spans",
    "predict_corpus",
    "predict_document",
    "predict_relations_approx",
    "read_checkpoint",
    "resolve_config",
    "save_checkpoint",
    "save_corpus",
    "score_entities",
    "score_relations",
    "train_entity",
    "train_joint_shared",
    "train_relation",
]
