"""Contrastive training objectives over batches of pooled embeddings.

All three losses share the same skeleton: cosine similarities scaled by a
temperature, one positive per anchor, a log-sum-exp denominator over the
batch. Losses are averaged over the batch so the learning rate does not
depend on batch size.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

OBJECTIVES = ("sup_basic", "unsup", "sup_hard")

DEFAULT_TEMPERATURE = 0.05


def _check_rows(h: Tensor, name: str) -> None:
    # a row has zero norm exactly when every entry is zero
    bad = np.nonzero(~h.data.any(axis=1))[0]
    if bad.size:
        raise ValueError(f"{name}: zero-norm embedding at row {int(bad[0])}")


def _normalize_rows(h: Tensor) -> Tensor:
    sq = (h * h).sum(axis=1, keepdims=True)
    return h / sq**0.5


def similarity_matrix(h_a: Tensor, h_b: Tensor) -> Tensor:
    """Pairwise cosine similarities, differentiable: (M, M') for M x d inputs."""
    _check_rows(h_a, "similarity_matrix lhs")
    _check_rows(h_b, "similarity_matrix rhs")
    return _normalize_rows(h_a) @ _normalize_rows(h_b).T


def _diagonal(m: Tensor) -> Tensor:
    n = m.data.shape[0]
    return m[np.arange(n), np.arange(n)]


def _validate_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def loss_sup_basic(h: Tensor, h_pos: Tensor, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """In-batch negative cross-entropy: anchors vs positives."""
    _validate_tau(tau)
    sims = similarity_matrix(h, h_pos) * (1.0 / tau)  # (M, M)
    per_example = sims.logsumexp(axis=1) - _diagonal(sims)
    return per_example.mean()


def loss_unsup(h_view1: Tensor, h_view2: Tensor, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Dropout-pair objective: two stochastic views of the same sentences.

    Structurally identical to the supervised in-batch loss; the views come
    from two encoder passes with independent dropout streams. Negatives are
    drawn only from the second view's rows.
    """
    return loss_sup_basic(h_view1, h_view2, tau)


def loss_sup_hard(h: Tensor, h_pos: Tensor, h_neg: Tensor,
                  tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Hard-negative objective: the denominator also sums over contradictions."""
    _validate_tau(tau)
    sims_pos = similarity_matrix(h, h_pos) * (1.0 / tau)
    sims_neg = similarity_matrix(h, h_neg) * (1.0 / tau)
    both = Tensor.concat([sims_pos, sims_neg], axis=1)  # (M, 2M)
    per_example = both.logsumexp(axis=1) - _diagonal(sims_pos)
    return per_example.mean()
