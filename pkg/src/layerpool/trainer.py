"""Training loop binding encoder, pooler, and one contrastive objective.

Determinism contract: every stochastic choice (init, shuffling, dropout) is
drawn from a stream derived from (seed, epoch/step), so a run is a pure
function of (config, corpus) and resuming from a checkpoint reproduces the
uninterrupted trajectory.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Rng, Tensor
from .encoder import (
    Encoder,
    EncoderConfig,
    FrozenFeatures,
    Tokenizer,
    init_encoder_params,
    load_frozen,
)
from .objectives import (
    DEFAULT_TEMPERATURE,
    OBJECTIVES,
    loss_sup_basic,
    loss_sup_hard,
    loss_unsup,
)
from .pooler import ATTENTION_STRATEGIES, PoolerParams, PoolStrategy, pool

CHECKPOINT_VERSION = 1

# corpus record keys required by each objective
_REQUIRED_KEYS = {
    "sup_basic": ("sent1", "sent2"),
    "unsup": ("text",),
    "sup_hard": ("anchor", "positive", "negative"),
}


class CheckpointVersionError(ValueError):
    """Checkpoint written by an incompatible version."""


class CheckpointCorruptError(ValueError):
    """Manifest unreadable or tensor payload inconsistent with it."""


@dataclass
class TrainConfig:
    objective: str = "unsup"
    strategy: str = "attn_cls_avg_concat"
    norm_mode: str = "softmax"
    tau: float = DEFAULT_TEMPERATURE
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0
    frozen_features: str | None = None
    freeze_mlp: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        PoolStrategy(self.strategy)
        if self.norm_mode not in ("softmax", "ratio"):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, Tensor]          # encoder (unless frozen) + pooler tensors
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    vocab: dict[str, int]
    tokenizer_mode: str = "whitespace"

    def pooler_params(self) -> PoolerParams:
        return PoolerParams(
            w_q=self.params["pooler.w_q"],
            w_k=self.params["pooler.w_k"],
            w_v=self.params["pooler.w_v"],
            mlp_weight=self.params["pooler.mlp_weight"],
            mlp_bias=self.params["pooler.mlp_bias"],
        )

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.tokenizer_mode, self.vocab)

    def encoder(self) -> Encoder | None:
        if self.config.frozen_features is not None:
            return None
        return Encoder(self.config.encoder, self.params)


def init_params(config: TrainConfig, rng: Rng, vocab_size: int | None = None) -> dict[str, Tensor]:
    """Seeded parameter set for (encoder unless frozen) + pooler."""
    params: dict[str, Tensor] = {}
    enc_cfg = config.encoder
    if config.frozen_features is None:
        if vocab_size is not None:
            enc_cfg = EncoderConfig(**{**asdict(enc_cfg), "vocab_size": vocab_size})
            config.encoder = enc_cfg
        params.update(init_encoder_params(enc_cfg, rng))
    params.update(PoolerParams.init(enc_cfg.hidden_dim, rng).named())
    return params


def validate_corpus(objective: str, corpus: list[dict]) -> None:
    if not corpus:
        raise ValueError("empty corpus")
    required = _REQUIRED_KEYS[objective]
    for key in required:
        if key not in corpus[0]:
            raise ValueError(
                f"objective {objective!r} needs corpus records with keys "
                f"{required}, got {tuple(sorted(corpus[0]))}"
            )


def _trainable(config: TrainConfig, params: dict[str, Tensor]) -> list[str]:
    names = []
    for name in params:
        if config.frozen_features is not None and not name.startswith("pooler."):
            continue
        if config.freeze_mlp and name in ("pooler.mlp_weight", "pooler.mlp_bias"):
            continue
        names.append(name)
    return names


# frozen-features row layout: record i of a pair corpus occupies rows
# (2i, 2i+1), a triplet corpus rows (3i, 3i+1, 3i+2), a bare corpus row i
_FROZEN_GROUP = {"sup_basic": 2, "unsup": 1, "sup_hard": 3}
_FROZEN_OFFSET = {"a": 0, "z": 0, "z2": 0, "p": 1, "n": 2}


def _encode_texts(encoder, tokenizer, frozen, texts, indices, cfg, rng_step, tag):
    """LayerStacks for one side of a batch, with per-sentence dropout streams."""
    stacks = []
    for pos, (text, idx) in enumerate(zip(texts, indices)):
        if frozen is not None:
            row = int(idx) * _FROZEN_GROUP[cfg.objective] + _FROZEN_OFFSET[tag]
            stacks.append(frozen.stack(row))
        else:
            ids = tokenizer.encode(text, cfg.encoder.max_seq_len)
            stacks.append(
                encoder.encode(ids, rng=rng_step.child(tag, pos), train_mode=True)
            )
    return stacks


def _batch_loss(config, encoder, tokenizer, frozen, batch, indices, pooler, rng_step):
    strategy = PoolStrategy(config.strategy)

    def embed(stacks):
        return Tensor.stack_rows(
            [pool(s, pooler, strategy, config.norm_mode) for s in stacks]
        )

    if config.objective == "sup_basic":
        a = _encode_texts(encoder, tokenizer, frozen, [r["sent1"] for r in batch], indices, config, rng_step, "a")
        p = _encode_texts(encoder, tokenizer, frozen, [r["sent2"] for r in batch], indices, config, rng_step, "p")
        return loss_sup_basic(embed(a), embed(p), config.tau)
    if config.objective == "unsup":
        texts = [r["text"] for r in batch]
        v1 = _encode_texts(encoder, tokenizer, frozen, texts, indices, config, rng_step, "z")
        v2 = _encode_texts(encoder, tokenizer, frozen, texts, indices, config, rng_step, "z2")
        return loss_unsup(embed(v1), embed(v2), config.tau)
    a = _encode_texts(encoder, tokenizer, frozen, [r["anchor"] for r in batch], indices, config, rng_step, "a")
    p = _encode_texts(encoder, tokenizer, frozen, [r["positive"] for r in batch], indices, config, rng_step, "p")
    n = _encode_texts(encoder, tokenizer, frozen, [r["negative"] for r in batch], indices, config, rng_step, "n")
    return loss_sup_hard(embed(a), embed(p), embed(n), config.tau)


def _corpus_texts(objective: str, corpus: list[dict]):
    for rec in corpus:
        for key in _REQUIRED_KEYS[objective]:
            yield rec[key]


def train(config: TrainConfig, corpus: list[dict],
          resume_from: Checkpoint | None = None,
          init_from: Checkpoint | None = None,
          max_steps: int | None = None):
    """Run the optimization loop; returns (Checkpoint, [(step, loss), ...]).

    Adam with beta1=0.9, beta2=0.999, eps=1e-8. The last incomplete batch of
    each epoch is dropped so the in-batch negative count is always M.

    `resume_from` continues an interrupted run (config, optimizer state, and
    step counter all come from the checkpoint). `init_from` warm-starts a new
    run from a pretrained checkpoint: encoder weights and vocabulary are
    copied, but the pooler, optimizer state, and schedule start fresh under
    the new config.
    """
    if resume_from is not None and init_from is not None:
        raise ValueError("resume_from and init_from are mutually exclusive")
    if resume_from is not None:
        config = resume_from.config
    validate_corpus(config.objective, corpus)
    rng = Rng(config.seed)

    frozen: FrozenFeatures | None = None
    if config.frozen_features is not None:
        frozen = load_frozen(config.frozen_features)
        needed = len(corpus) * _FROZEN_GROUP[config.objective]
        if frozen.num_sentences < needed:
            raise ValueError(
                f"frozen features hold {frozen.num_sentences} sentences, "
                f"corpus needs {needed}"
            )
        config.encoder = EncoderConfig(
            **{**asdict(config.encoder),
               "num_layers": frozen.num_layers, "hidden_dim": frozen.hidden_dim}
        )

    if resume_from is not None:
        ckpt = resume_from
        tokenizer = ckpt.tokenizer()
        params, adam_m, adam_v = ckpt.params, ckpt.adam_m, ckpt.adam_v
        start_step = ckpt.step
    elif init_from is not None:
        # vocab_size is excluded: it is resized to the fitted vocabulary,
        # which the warm start copies along with the embedding table
        theirs = {**asdict(init_from.config.encoder), "vocab_size": 0}
        ours = {**asdict(config.encoder), "vocab_size": 0}
        if theirs != ours:
            raise ValueError(
                "init_from encoder architecture differs from the new config"
            )
        tokenizer = init_from.tokenizer()
        params = init_params(config, rng, vocab_size=tokenizer.vocab_size)
        for name, tensor in init_from.params.items():
            if not name.startswith("pooler."):
                params[name] = Tensor(tensor.data.copy(), requires_grad=True)
        adam_m = {}
        adam_v = {}
        start_step = 0
    else:
        tokenizer = Tokenizer.from_texts(_corpus_texts(config.objective, corpus))
        params = init_params(config, rng, vocab_size=tokenizer.vocab_size)
        adam_m = {}
        adam_v = {}
        start_step = 0

    encoder = None if frozen is not None else Encoder(config.encoder, params)
    trainable = _trainable(config, params)
    for name in trainable:
        adam_m.setdefault(name, np.zeros_like(params[name].data))
        adam_v.setdefault(name, np.zeros_like(params[name].data))

    M = config.batch_size
    steps_per_epoch = len(corpus) // M
    if steps_per_epoch == 0:
        raise ValueError("batch_size larger than corpus")
    total_steps = steps_per_epoch * config.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace: list[tuple[int, float]] = []
    for step in range(start_step, total_steps):
        epoch, slot = divmod(step, steps_per_epoch)
        order = rng.child("shuffle", epoch).generator().permutation(len(corpus))
        indices = order[slot * M : (slot + 1) * M]
        batch = [corpus[i] for i in indices]

        for name in params:
            params[name].grad = None
        loss = _batch_loss(config, encoder, tokenizer, frozen, batch, indices,
                           _as_pooler(params), rng.child("step", step))
        loss.backward()

        t = step + 1
        for name in trainable:
            g = params[name].grad
            if g is None:
                continue
            adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * g
            adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * g * g
            m_hat = adam_m[name] / (1 - beta1**t)
            v_hat = adam_v[name] / (1 - beta2**t)
            params[name].data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        trace.append((step, loss.item()))

    return (
        Checkpoint(
            config=config,
            params=params,
            adam_m=adam_m,
            adam_v=adam_v,
            step=total_steps,
            vocab=tokenizer.vocab,
            tokenizer_mode=tokenizer.mode,
        ),
        trace,
    )


def _as_pooler(params: dict[str, Tensor]) -> PoolerParams:
    return PoolerParams(
        w_q=params["pooler.w_q"],
        w_k=params["pooler.w_k"],
        w_v=params["pooler.w_v"],
        mlp_weight=params["pooler.mlp_weight"],
        mlp_bias=params["pooler.mlp_bias"],
    )


def write_loss_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in trace:
            w.writerow([step, repr(loss)])


# ---- checkpoint persistence -----------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Directory with a JSON manifest + raw little-endian float64 tensors.

    Tensors are stored in float64 (not the f32 used for embedding files) so
    resume-from-checkpoint reproduces the uninterrupted trajectory exactly.
    """
    os.makedirs(path, exist_ok=True)
    tensors = {f"param.{k}": v.data for k, v in ckpt.params.items()}
    tensors.update({f"adam_m.{k}": v for k, v in ckpt.adam_m.items()})
    tensors.update({f"adam_v.{k}": v for k, v in ckpt.adam_v.items()})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "config": asdict(ckpt.config),
        "vocab": ckpt.vocab,
        "tokenizer_mode": ckpt.tokenizer_mode,
        "rng": {"seed": ckpt.config.seed},
        "tensors": [
            {"name": k, "shape": list(v.shape), "file": f"t{i:04d}.bin"}
            for i, (k, v) in enumerate(tensors.items())
        ],
    }
    for entry, (_, v) in zip(manifest["tensors"], tensors.items()):
        np.ascontiguousarray(v, dtype="<f8").tofile(os.path.join(path, entry["file"]))
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_checkpoint(path) -> Checkpoint:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}"
        )
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        file_path = os.path.join(path, entry["file"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        try:
            raw = np.fromfile(file_path, dtype="<f8")
        except OSError as exc:
            raise CheckpointCorruptError(f"missing tensor file {entry['file']}") from exc
        if raw.size != count:
            raise CheckpointCorruptError(
                f"tensor {entry['name']}: {raw.size} values on disk, expected {count}"
            )
        tensors[entry["name"]] = raw.reshape(shape)
    config = TrainConfig(**manifest["config"])
    params = {
        k[len("param."):]: Tensor(v, requires_grad=True)
        for k, v in tensors.items() if k.startswith("param.")
    }
    return Checkpoint(
        config=config,
        params=params,
        adam_m={k[len("adam_m."):]: v for k, v in tensors.items() if k.startswith("adam_m.")},
        adam_v={k[len("adam_v."):]: v for k, v in tensors.items() if k.startswith("adam_v.")},
        step=manifest["step"],
        vocab=manifest["vocab"],
        tokenizer_mode=manifest["tokenizer_mode"],
    )
