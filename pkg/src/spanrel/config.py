"""Run configuration: one flat namespace covering the encoder, both heads,
training, and IO paths.

A run is configured in three layers — built-in defaults, an optional flat
``key=value`` file, and explicit overrides (CLI flags) — applied in that
order, so flags always win. Resolution is pure: the same file and overrides
produce the same canonical JSON.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError, DataError
from .relation import FeatureMode

__all__ = [
    "RunConfig",
    "canonical_json",
    "parse_config_file",
    "resolve_config",
]

# Fields a config file may not set: these come from the command line because
# they identify the run's inputs rather than the model.
_PATH_FIELDS = ("train_path", "dev_path", "test_path")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RunConfig:
    # corpus paths (the only fields without usable defaults)
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    # encoder shape
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_position: int = 512
    dropout: float = 0.0
    # span / relation heads
    max_span_len: int = 8
    width_emb_dim: int = 150
    ffnn_hidden: int = 150
    type_emb_dim: int = 150
    feature_mode: str = "typed_markers"
    # context handling
    window_size: int = 100
    token_budget: int = 250
    # label sets; empty means "derive from the training corpus"
    entity_types: tuple[str, ...] = ()
    relation_types: tuple[str, ...] = ()
    symmetric_types: tuple[str, ...] = ()
    # optimization
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
    prune_lambda: float = 0.4

    def __post_init__(self):
        FeatureMode.from_string(self.feature_mode)  # raises ConfigError when unknown
        if self.window_size <= 0:
            raise ConfigError(f"window_size must be positive, got {self.window_size}")
        if self.token_budget <= 0:
            raise ConfigError(f"token_budget must be positive, got {self.token_budget}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("entity_types", "relation_types", "symmetric_types"):
            out[key] = list(out[key])
        return out

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    # bridges into the per-module config types --------------------------------

    def encoder_config(self, vocab_size: int):
        from .encoder import EncoderConfig

        return EncoderConfig(vocab_size=vocab_size, d_model=self.d_model,
                             n_heads=self.n_heads, n_layers=self.n_layers,
                             d_ff=self.d_ff, max_position=self.max_position,
                             dropout=self.dropout)

    def entity_model_config(self):
        from .entity import EntityModelConfig

        return EntityModelConfig(max_span_len=self.max_span_len,
                                 width_emb_dim=self.width_emb_dim,
                                 ffnn_hidden=self.ffnn_hidden)

    def relation_model_config(self):
        from .relation import RelationModelConfig

        return RelationModelConfig(mode=FeatureMode.from_string(self.feature_mode),
                                   type_emb_dim=self.type_emb_dim,
                                   width_emb_dim=self.width_emb_dim,
                                   max_span_len=self.max_span_len,
                                   ffnn_hidden=self.ffnn_hidden)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            epochs_entity=self.epochs_entity,
            epochs_relation=self.epochs_relation,
            batch_entity=self.batch_entity,
            batch_relation=self.batch_relation,
            lr_encoder=self.lr_encoder,
            lr_heads=self.lr_heads,
            lr_relation=self.lr_relation,
            warmup_ratio=self.warmup_ratio,
            seed=self.seed,
            shared_encoder=self.shared_encoder,
            entity_aux_relation_loss=self.entity_aux_relation_loss,
            relation_training_source=self.relation_training_source,
            grad_clip_norm=self.grad_clip_norm,
            window_size=self.window_size,
            prune_lambda=self.prune_lambda,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    """Parse a config-file string into the field's python type."""
    field = _FIELDS[name]
    default = field.default
    if name in ("entity_types", "relation_types", "symmetric_types"):
        return tuple(t for t in (s.strip() for s in raw.split(",")) if t)
    if name == "grad_clip_norm":
        return None if raw.lower() in ("none", "") else float(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_file(path) -> dict:
    """Read a flat ``key=value`` file (# comments, blank lines allowed).

    Keys may use either dashes or underscores. Unknown keys and path fields
    are rejected; values are coerced to the field types.
    """
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = stripped.partition("=")
            key = key.strip().replace("-", "_")
            if key in _PATH_FIELDS:
                raise ConfigError(f"{path}:{lineno}: {key} must be given on the "
                                  f"command line, not in a config file")
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = _coerce(key, value.strip())
    return out


def resolve_config(config_path=None, overrides: Mapping | None = None) -> RunConfig:
    """Defaults <- config file <- overrides; later layers win."""
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values)
