"""Run configuration: strict JSON validation with defaults and echo."""

from __future__ import annotations

import difflib
import json
import os
from dataclasses import asdict, dataclass, field

from .encoder import EncoderConfig
from .objectives import DEFAULT_TEMPERATURE, OBJECTIVES
from .pooler import PoolStrategy
from .trainer import TrainConfig

_TOP_KEYS = {
    "objective", "corpus", "strategy", "norm_mode", "temperature",
    "batch_size", "learning_rate", "epochs", "seed", "frozen_features",
    "freeze_mlp", "checkpoint_dir", "output_dir", "encoder",
}
_ENCODER_KEYS = {
    "num_layers", "hidden_dim", "num_heads", "ffn_dim", "max_seq_len",
    "vocab_size", "dropout_p",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig
    corpus: str
    checkpoint_dir: str = "checkpoint"
    output_dir: str = "."


def _reject_unknown(doc: dict, known: set[str], context: str) -> None:
    for key in doc:
        if key not in known:
            hint = difflib.get_close_matches(key, known, n=1)
            suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown {context} key {key!r}{suggestion}")


def validate_config(doc: dict) -> RunConfig:
    """Type-check and default a parsed config document."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    for key in ("objective", "corpus"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")
    if doc["objective"] not in OBJECTIVES:
        raise ConfigError(
            f"objective must be one of {OBJECTIVES}, got {doc['objective']!r}"
        )
    strategy = doc.get("strategy", "attn_cls_avg_concat")
    try:
        PoolStrategy(strategy)
    except ValueError:
        raise ConfigError(f"unknown strategy {strategy!r}") from None
    tau = float(doc.get("temperature", DEFAULT_TEMPERATURE))
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    enc_doc = doc.get("encoder", {})
    _reject_unknown(enc_doc, _ENCODER_KEYS, "encoder")
    try:
        encoder = EncoderConfig(**enc_doc)
        train = TrainConfig(
            objective=doc["objective"],
            strategy=strategy,
            norm_mode=doc.get("norm_mode", "softmax"),
            tau=tau,
            batch_size=int(doc.get("batch_size", 16)),
            learning_rate=float(doc.get("learning_rate", 1e-3)),
            epochs=int(doc.get("epochs", 1)),
            seed=int(doc.get("seed", 0)),
            frozen_features=doc.get("frozen_features"),
            freeze_mlp=bool(doc.get("freeze_mlp", False)),
            encoder=encoder,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        train=train,
        corpus=str(doc["corpus"]),
        checkpoint_dir=str(doc.get("checkpoint_dir", "checkpoint")),
        output_dir=str(doc.get("output_dir", ".")),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    config = validate_config(doc)
    if not os.path.exists(config.corpus):
        raise ConfigError(f"corpus path does not exist: {config.corpus}")
    if config.train.frozen_features and not os.path.exists(config.train.frozen_features):
        raise ConfigError(
            f"frozen_features path does not exist: {config.train.frozen_features}"
        )
    return config


def effective_config_doc(config: RunConfig) -> dict:
    """The fully-defaulted document echoed next to every run's outputs."""
    t = config.train
    return {
        "objective": t.objective,
        "corpus": config.corpus,
        "strategy": t.strategy,
        "norm_mode": t.norm_mode,
        "temperature": t.tau,
        "batch_size": t.batch_size,
        "learning_rate": t.learning_rate,
        "epochs": t.epochs,
        "seed": t.seed,
        "frozen_features": t.frozen_features,
        "freeze_mlp": t.freeze_mlp,
        "checkpoint_dir": config.checkpoint_dir,
        "output_dir": config.output_dir,
        "encoder": asdict(t.encoder),
    }
