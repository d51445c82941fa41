"""Scalar similarities: local cross-attention (both directions) and global.

All functions accept arbitrary leading batch dimensions and are pure
functions of their inputs, so they are safe to call concurrently.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .utils import EPS, check_unit_norm, l2norm


def cosine_matrix(v_loc: torch.Tensor, t_loc: torch.Tensor,
                  eps: float = EPS, strict: bool = False) -> torch.Tensor:
    """Cosine similarity for all region-query pairs.

    (..., K, D) x (..., N, D) -> (..., K, N) with entries in [-1, 1].
    strict=True raises on zero-norm rows instead of eps-guarding them.
    """
    if strict:
        if (v_loc.norm(dim=-1) <= 0).any() or (t_loc.norm(dim=-1) <= 0).any():
            raise ValueError("zero-norm row in cosine similarity input")
        eps = 0.0
    vn = l2norm(v_loc, eps=eps)
    tn = l2norm(t_loc, eps=eps)
    return vn @ tn.transpose(-2, -1)


def local_similarity_it(sim: torch.Tensor, lambda1: float) -> torch.Tensor:
    """Image-text local similarity: per-region softmax attention over queries.

    Clips similarities at zero, weights them by softmax(lambda1 * clipped)
    along the query axis, and averages the attended values over regions.
    Result is in [0, 1].
    """
    if lambda1 <= 0:
        raise ValueError("lambda1 must be positive")
    sp = sim.clamp(min=0)
    alpha = F.softmax(lambda1 * sp, dim=-1)
    return (alpha * sp).sum(dim=-1).mean(dim=-1)


def local_similarity_ti(sim: torch.Tensor, lambda2: float) -> torch.Tensor:
    """Text-image local similarity: mirror of the I-T direction.

    Softmax over regions per query with lambda2, averaged over queries.
    """
    if lambda2 <= 0:
        raise ValueError("lambda2 must be positive")
    sp = sim.clamp(min=0)
    alpha = F.softmax(lambda2 * sp, dim=-2)
    return (alpha * sp).sum(dim=-2).mean(dim=-1)


def region_attention_ti(sim: torch.Tensor, lambda2: float) -> torch.Tensor:
    """Per-query softmax weights over regions, (..., K, N); columns sum to 1.

    These are exactly the weights used inside local_similarity_ti; exposed
    for attention visualization.
    """
    return F.softmax(lambda2 * sim.clamp(min=0), dim=-2)


def global_similarity(v_glo: torch.Tensor, t_glo: torch.Tensor,
                      check: bool = True) -> torch.Tensor:
    """Dot product of the two unit-norm global vectors, in [-1, 1]."""
    if check:
        check_unit_norm(v_glo, "v_glo")
        check_unit_norm(t_glo, "t_glo")
    return (v_glo * t_glo).sum(dim=-1)
