"""Layer-wise attention pooling and the fixed baseline strategies.

The attention path scores every (query layer, key layer) pair with
multiplicative attention, normalizes each row, mixes the value stream with
the resulting weights, and averages over query layers. The headline strategy
concatenates the last layer's CLS vector and projects through a tanh MLP
back to the model dimension.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Rng, Tensor
from .encoder import LayerStack

RATIO_EPS = 1e-9


class PoolStrategy(str, Enum):
    CLS_LAST = "cls_last"
    AVG_LAST = "avg_last"
    AVG_FL = "avg_fl"
    CONCAT_AVG = "concat_avg"              # AVG_Last + AVG_FL
    CONCAT_CLS_AVG = "concat_cls_avg"      # CLS_Last + AVG_Last
    ATTN_CLS = "attn_cls"                  # CLS_All attention
    ATTN_AVG = "attn_avg"                  # AVG_All attention
    ATTN_CLS_AVG = "attn_cls_avg"          # CLS_All + AVG_All attention
    ATTN_CLS_AVG_CONCAT = "attn_cls_avg_concat"  # + CLS_Last concat, headline


ATTENTION_STRATEGIES = {
    PoolStrategy.ATTN_CLS,
    PoolStrategy.ATTN_AVG,
    PoolStrategy.ATTN_CLS_AVG,
    PoolStrategy.ATTN_CLS_AVG_CONCAT,
}


@dataclass
class PoolerParams:
    """Learnable attention matrices and the tanh projection."""

    w_q: Tensor  # (d, d)
    w_k: Tensor  # (d, d)
    w_v: Tensor  # (d, d)
    mlp_weight: Tensor  # (d, 2d)
    mlp_bias: Tensor  # (d,)

    @classmethod
    def init(cls, hidden_dim: int, rng: Rng) -> "PoolerParams":
        d = hidden_dim
        gen = rng.child("pooler_init").generator()

        def u(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(gen.uniform(-bound, bound, size=shape), requires_grad=True)

        return cls(
            w_q=u((d, d), d),
            w_k=u((d, d), d),
            w_v=u((d, d), d),
            mlp_weight=u((d, 2 * d), 2 * d),
            mlp_bias=Tensor(np.zeros(d), requires_grad=True),
        )

    def named(self) -> dict[str, Tensor]:
        return {
            "pooler.w_q": self.w_q,
            "pooler.w_k": self.w_k,
            "pooler.w_v": self.w_v,
            "pooler.mlp_weight": self.mlp_weight,
            "pooler.mlp_bias": self.mlp_bias,
        }


@dataclass
class AttentionReport:
    """Row-stochastic layer-attention matrix plus per-layer aggregate weight."""

    weights: np.ndarray  # (N, N), row i = attention of query layer i
    fallback_rows: list[int]  # rows where ratio mode fell back to uniform

    @property
    def per_layer_weight(self) -> np.ndarray:
        return self.weights.mean(axis=0)

    def write_csv(self, path) -> None:
        n = self.weights.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + [f"layer{j + 1}" for j in range(n)])
            for i in range(n):
                w.writerow([f"layer{i + 1}"] + [repr(x) for x in self.weights[i]])
            w.writerow(["aggregate"] + [repr(x) for x in self.per_layer_weight])


def _qkv_streams(stack: LayerStack, strategy: PoolStrategy):
    if strategy in (PoolStrategy.ATTN_CLS_AVG, PoolStrategy.ATTN_CLS_AVG_CONCAT):
        return stack.h_c, stack.h_a, stack.h_a
    if strategy == PoolStrategy.ATTN_CLS:
        return stack.h_c, stack.h_c, stack.h_c
    if strategy == PoolStrategy.ATTN_AVG:
        return stack.h_a, stack.h_a, stack.h_a
    raise ValueError(f"{strategy.value} is not an attention strategy")


def attention_matrix(stack: LayerStack, params: PoolerParams,
                     strategy: PoolStrategy, norm_mode: str = "softmax"):
    """Differentiable (N, N) row-normalized layer-attention matrix.

    Returns (matrix Tensor, fallback row indices). Fallbacks only occur in
    ratio mode when a row of raw scores sums to (almost) zero.
    """
    if norm_mode not in ("softmax", "ratio"):
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    queries, keys, _ = _qkv_streams(stack, strategy)
    q = Tensor.stack_rows(queries) @ params.w_q.T  # (N, d)
    k = Tensor.stack_rows(keys) @ params.w_k.T
    scores = q @ k.T  # (N, N)
    n = len(queries)
    if norm_mode == "softmax":
        return scores.softmax(axis=-1), []

    row_sums = scores.data.sum(axis=-1)
    fallback = [i for i in range(n) if abs(row_sums[i]) < RATIO_EPS]
    if not fallback:
        return scores / scores.sum(axis=-1, keepdims=True), []
    # normalize the healthy rows, overwrite degenerate ones with uniform
    rows = []
    for i in range(n):
        if i in fallback:
            rows.append(Tensor(np.full(n, 1.0 / n)))
        else:
            rows.append(scores[i] / scores[i].sum())
    return Tensor.stack_rows(rows), fallback


def attention_scores(stack: LayerStack, params: PoolerParams,
                     strategy: PoolStrategy = PoolStrategy.ATTN_CLS_AVG_CONCAT,
                     norm_mode: str = "softmax") -> AttentionReport:
    matrix, fallback = attention_matrix(stack, params, strategy, norm_mode)
    return AttentionReport(weights=matrix.data.copy(), fallback_rows=fallback)


def pool_layerwise(stack: LayerStack, params: PoolerParams,
                   strategy: PoolStrategy = PoolStrategy.ATTN_CLS_AVG_CONCAT,
                   norm_mode: str = "softmax") -> Tensor:
    """Attention-weighted mix of the value stream, averaged over query layers."""
    matrix, _ = attention_matrix(stack, params, strategy, norm_mode)
    _, _, values = _qkv_streams(stack, strategy)
    v = Tensor.stack_rows(values) @ params.w_v.T  # (N, d)
    mixed = matrix @ v  # row i = sum_j A[i, j] * (W_v v_j)
    return mixed.mean(axis=0)


def project(stack: LayerStack, h_layers: Tensor, params: PoolerParams) -> Tensor:
    """Concatenate last-layer CLS with the pooled vector and apply tanh MLP."""
    d = params.mlp_bias.data.shape[0]
    if h_layers.data.shape != (d,):
        raise ValueError(
            f"pooled vector has shape {h_layers.data.shape}, expected ({d},)"
        )
    h_cl = Tensor.concat([stack.h_c_last, h_layers], axis=0)  # (2d,)
    return (params.mlp_weight @ h_cl + params.mlp_bias).tanh()


def pool(stack: LayerStack, params: PoolerParams,
         strategy: PoolStrategy = PoolStrategy.ATTN_CLS_AVG_CONCAT,
         norm_mode: str = "softmax") -> Tensor:
    """One sentence embedding per the selected strategy.

    Fixed strategies are parameter-free; concat baselines return 2d vectors.
    """
    strategy = PoolStrategy(strategy)
    if strategy == PoolStrategy.CLS_LAST:
        return stack.h_c[-1]
    if strategy == PoolStrategy.AVG_LAST:
        return stack.h_a[-1]
    if strategy == PoolStrategy.AVG_FL:
        return (stack.h_a[0] + stack.h_a[-1]) * 0.5
    if strategy == PoolStrategy.CONCAT_AVG:
        avg_fl = (stack.h_a[0] + stack.h_a[-1]) * 0.5
        return Tensor.concat([stack.h_a[-1], avg_fl], axis=0)
    if strategy == PoolStrategy.CONCAT_CLS_AVG:
        return Tensor.concat([stack.h_c[-1], stack.h_a[-1]], axis=0)
    h_layers = pool_layerwise(stack, params, strategy, norm_mode)
    if strategy == PoolStrategy.ATTN_CLS_AVG_CONCAT:
        return project(stack, h_layers, params)
    return h_layers
