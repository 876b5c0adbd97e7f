"""Spearman-correlation evaluation, per-layer sweeps, attention reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import cosine_sim
from .encoder import LayerStack
from .pooler import (
    ATTENTION_STRATEGIES,
    AttentionReport,
    PoolStrategy,
    attention_scores,
    pool,
)
from .trainer import Checkpoint


@dataclass
class StsRecord:
    sent1: str
    sent2: str
    gold: float

    def __post_init__(self):
        if not 0.0 <= self.gold <= 5.0:
            raise ValueError(f"gold score {self.gold} outside [0, 5]")


def load_sts_records(path) -> list[StsRecord]:
    """Read STS records from JSONL ({"sent1","sent2","score"}) or TSV."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.lstrip().startswith("{"):
                doc = json.loads(line)
                records.append(StsRecord(doc["sent1"], doc["sent2"], float(doc["score"])))
            else:
                s1, s2, score = line.split("\t")
                records.append(StsRecord(s1, s2, float(score)))
    return records


def rank_average_ties(xs: np.ndarray) -> np.ndarray:
    """1-based fractional ranks; tied values get the mean of their positions."""
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Pearson correlation of average-tie rank vectors."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("spearman needs two equal-length 1-D score arrays")
    if len(xs) < 2:
        raise ValueError("spearman needs at least two scores")
    rx = rank_average_ties(xs)
    ry = rank_average_ties(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0.0:
        raise ValueError("spearman undefined: zero rank variance")
    return float(np.clip(rx @ ry / denom, -1.0, 1.0))


def _stack_for(checkpoint: Checkpoint, text: str) -> LayerStack:
    encoder = checkpoint.encoder()
    if encoder is None:
        raise ValueError("checkpoint has no encoder (frozen-features training); "
                         "evaluate via stack pairs instead")
    ids = checkpoint.tokenizer().encode(text, checkpoint.config.encoder.max_seq_len)
    return encoder.encode(ids, train_mode=False)


def evaluate_stacks(stack_pairs, golds, pooler, strategy, norm_mode="softmax") -> float:
    """Spearman of per-pair cosine similarities against gold scores."""
    sims = [
        cosine_sim(
            pool(a, pooler, strategy, norm_mode).data,
            pool(b, pooler, strategy, norm_mode).data,
        )
        for a, b in stack_pairs
    ]
    return spearman(sims, golds)


def evaluate(checkpoint: Checkpoint, strategy, records: list[StsRecord],
             norm_mode: str | None = None) -> float:
    """Embed both sentences of each record with dropout off; Spearman vs gold."""
    if not records:
        raise ValueError("no STS records")
    strategy = PoolStrategy(strategy)
    norm_mode = norm_mode or checkpoint.config.norm_mode
    pairs = [
        (_stack_for(checkpoint, r.sent1), _stack_for(checkpoint, r.sent2))
        for r in records
    ]
    return evaluate_stacks(pairs, [r.gold for r in records],
                           checkpoint.pooler_params(), strategy, norm_mode)


@dataclass
class SweepResult:
    """One Spearman score per swept configuration (layer x {cls, avg})."""

    rows: list[tuple[str, float]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["configuration", "spearman"])
            for name, score in self.rows:
                w.writerow([name, repr(score)])


def layer_sweep_stacks(stack_pairs, golds) -> SweepResult:
    n = stack_pairs[0][0].num_layers
    rows = []
    for i in range(n):
        for kind in ("cls", "avg"):
            sims = []
            for a, b in stack_pairs:
                va = (a.h_c if kind == "cls" else a.h_a)[i].data
                vb = (b.h_c if kind == "cls" else b.h_a)[i].data
                sims.append(cosine_sim(va, vb))
            rows.append((f"layer{i + 1}_{kind}", spearman(sims, golds)))
    return SweepResult(rows=rows)


def layer_sweep(checkpoint: Checkpoint, records: list[StsRecord]) -> SweepResult:
    """Spearman of each single layer's CLS and AVG vector taken alone."""
    if not records:
        raise ValueError("no STS records")
    pairs = [
        (_stack_for(checkpoint, r.sent1), _stack_for(checkpoint, r.sent2))
        for r in records
    ]
    return layer_sweep_stacks(pairs, [r.gold for r in records])


def attention_report(checkpoint: Checkpoint, texts: list[str]) -> list[AttentionReport]:
    """Layer-attention weight matrices for each text."""
    strategy = PoolStrategy(checkpoint.config.strategy)
    if strategy not in ATTENTION_STRATEGIES:
        raise ValueError(
            f"strategy {strategy.value!r} is fixed pooling; no attention to report"
        )
    reports = []
    for text in texts:
        stack = _stack_for(checkpoint, text)
        reports.append(
            attention_scores(stack, checkpoint.pooler_params(), strategy,
                             checkpoint.config.norm_mode)
        )
    return reports
