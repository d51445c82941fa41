"""Contrastive losses and similarity aggregation."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def infonce_loss(sim: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over an n x n in-batch similarity matrix.

    Rows are images, columns are query sets, diagonal entries are the
    matched pairs. Both softmax directions are penalized:
    -(1/n) sum_g [log softmax_row(g, g) + log softmax_col(g, g)],
    computed log-sum-exp stabilized. Nonnegative; exactly 0 for n=1.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"expected square similarity matrix, got {tuple(sim.shape)}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not torch.isfinite(sim).all():
        raise ValueError("non-finite similarity matrix")
    logits = tau * sim
    per_row = F.log_softmax(logits, dim=1).diagonal()
    per_col = F.log_softmax(logits, dim=0).diagonal()
    return -(per_row.mean() + per_col.mean())


def check_weights(alpha: float, beta: float) -> float:
    """Validate similarity weights; returns the implied global weight."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if alpha + beta > 1 + 1e-12:
        raise ValueError("alpha + beta must not exceed 1")
    return 1.0 - alpha - beta


def total_loss(loss_local, loss_reason, loss_global, alpha: float, beta: float):
    """Weighted multi-level loss: alpha*local + beta*reason + (1-a-b)*global."""
    gamma = check_weights(alpha, beta)
    return alpha * loss_local + beta * loss_reason + gamma * loss_global


def aggregate_similarity(s_local, s_reason, s_global, alpha: float, beta: float):
    """Single-model aggregate with the direction's local term."""
    gamma = check_weights(alpha, beta)
    return alpha * s_local + beta * s_reason + gamma * s_global


def ensemble_similarity(s1, s2):
    """Sum of the two individual models' aggregated similarities."""
    return s1 + s2


def uniform_infonce_value(n: int) -> float:
    """Closed-form loss for an all-equal similarity matrix: 2 ln n."""
    return 2.0 * math.log(n)
