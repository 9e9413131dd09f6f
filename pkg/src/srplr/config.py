"""Flat, typed experiment configuration.

A config file is a flat JSON object. Every key has a typed default; the
resolved config (defaults filled in) is what gets echoed into run
directories, and parsing that echo gives back the same config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SyntheticSpec
from .encoders import EncoderConfig
from .model import LogicConfig, ModelVariant
from .trainer import TrainConfig

DATA_ROOT_ENV = "SRPLR_DATA_ROOT"

# Defaults that are conventions (backbone library defaults, numerical floors,
# loss readings) rather than published hyperparameters; run reports list them.
ASSUMED_KEYS = (
    "layers",
    "heads",
    "dropout",
    "eps_clamp",
    "soft_clamp",
    "attend_pre_negation",
    "logic_loss_form",
    "rec_loss_form",
)


class ValidationError(ValueError):
    """Bad user input: unknown keys, wrong types, out-of-range values."""


@dataclass(frozen=True)
class ExperimentConfig:
    # data: a preprocessed split directory, or "synthetic"
    dataset: str = "synthetic"
    max_len: int = 50
    synthetic_users: int = 50
    synthetic_items: int = 20
    synthetic_rule: str = "markov"
    synthetic_seed: int = 0
    synthetic_deterministic: bool = False
    # backbone
    backbone: str = "self_attention"
    hidden_size: int = 64
    # 0 resolves to the backbone default: 1 GRU layer, 2 attention blocks
    layers: int = 0
    heads: int = 2
    dropout: float = 0.5
    # variant
    use_attention: bool = True
    use_negation: bool = True
    use_feature: bool = True
    use_logic: bool = True
    # "lambda" in files
    lambda_: float = 0.5
    # logic network
    eps_clamp: float = 0.05
    soft_clamp: bool = False
    attend_pre_negation: bool = False
    logic_loss_form: str = "literal"
    rec_loss_form: str = "bce"
    # training
    epochs: int = 50
    batch_size: int = 2048
    learning_rate: float = 0.002
    logic_negatives: int = 1
    mask_r: float = 0.0
    seed: int = 2023
    eval_ks: tuple = (5, 10)
    eval_every: int = 1
    checkpoint_every: int = 0
    keep_best_valid: bool = False
    grad_clip: float = 0.0
    exclude_history: bool = False
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.layers == 0:
            object.__setattr__(self, "layers", 1 if self.backbone == "gru" else 2)
        try:
            self.encoder_config()
            self.variant()
            self.logic_config()
            self.train_config()
            if self.dataset == "synthetic":
                self.synthetic_spec()
        except ValueError as exc:
            raise ValidationError(str(exc)) from None

    # -- views onto component configs --------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            kind=self.backbone,
            hidden_size=self.hidden_size,
            layers=self.layers,
            heads=self.heads,
            dropout=self.dropout,
            max_len=self.max_len,
        )

    def variant(self) -> ModelVariant:
        return ModelVariant(
            self.use_attention, self.use_negation, self.use_feature, self.use_logic, self.lambda_
        )

    def logic_config(self) -> LogicConfig:
        return LogicConfig(
            eps_clamp=self.eps_clamp,
            soft_clamp=self.soft_clamp,
            attend_pre_negation=self.attend_pre_negation,
            logic_loss_form=self.logic_loss_form,
            rec_loss_form=self.rec_loss_form,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            logic_negatives=self.logic_negatives,
            mask_r=self.mask_r,
            seed=self.seed,
            eval_ks=tuple(self.eval_ks),
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
            keep_best_valid=self.keep_best_valid,
            grad_clip=self.grad_clip,
            exclude_history=self.exclude_history,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            users=self.synthetic_users,
            items=self.synthetic_items,
            rule=self.synthetic_rule,
            seed=self.synthetic_seed,
            deterministic=self.synthetic_deterministic,
        )

    def dataset_path(self) -> Path:
        p = Path(self.dataset)
        root = os.environ.get(DATA_ROOT_ENV)
        if not p.is_absolute() and root and not p.exists():
            p = Path(root) / p
        return p

    def assumed_keys(self) -> tuple[str, ...]:
        """Assumed keys still at their default value."""
        return tuple(k for k in ASSUMED_KEYS if getattr(self, k) == getattr(type(self)(backbone=self.backbone), k))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[_file_key(f.name)] = list(v) if isinstance(v, tuple) else v
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Hash of everything that affects results (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValidationError("config must be a flat JSON object")
        known = {_file_key(f.name): f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            f = known[key]
            kwargs[f.name] = _coerce(key, value, f.default)
        return cls(**kwargs)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text)


def _file_key(name: str) -> str:
    return "lambda" if name == "lambda_" else name


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"config key {key!r} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ValidationError(f"config key {key!r} must be a list of integers, got {value!r}")
        return tuple(value)
    raise ValidationError(f"config key {key!r} has unsupported type")
