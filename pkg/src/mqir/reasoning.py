"""Graph reasoning over region-query pair nodes.

Regions are projected into query space via text-image attention, each
(projected region, query) pair is fused into a correlation node, and a
fully connected graph over the N pair nodes plus one global node is
updated for a fixed number of steps. The similarity score is read off the
global node.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import EPS, l2norm


def project_visual(sim: torch.Tensor, v_loc: torch.Tensor, lambda2: float,
                   eps: float = EPS) -> torch.Tensor:
    """Attend regions per query to build query-aligned visual vectors.

    Clipped cosines are first normalized per region across queries
    (s+ / sqrt(sum_j s+^2)), then softmaxed over regions with lambda2.
    (..., K, N) x (..., K, D) -> (..., N, D). An all-clipped column falls
    back to uniform attention via the eps guard.
    """
    sp = sim.clamp(min=0)
    denom = sp.pow(2).sum(dim=-1, keepdim=True).sqrt() + eps
    alpha = F.softmax(lambda2 * (sp / denom), dim=-2)
    return torch.einsum("...kn,...kd->...nd", alpha, v_loc)


def affinity(nodes: torch.Tensor, w_q: nn.Linear, w_k: nn.Linear) -> torch.Tensor:
    """Edge weights between nodes: exp((W_q c_q)^T (W_k c_k)), normalized
    over the incoming node axis q (each column sums to 1)."""
    logits = torch.einsum("...qd,...kd->...qk", w_q(nodes), w_k(nodes))
    return F.softmax(logits, dim=-2)


class GraphReasoner(nn.Module):
    """Intra-pair correlation nodes + iterative inter-pair graph updates."""

    INTRA_MODES = ("sub", "concat")

    def __init__(self, dim: int, steps: int = 3, intra_mode: str = "sub"):
        super().__init__()
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if intra_mode not in self.INTRA_MODES:
            raise ValueError(f"intra_mode must be one of {self.INTRA_MODES}")
        self.steps = steps
        self.intra_mode = intra_mode
        in_dim = dim if intra_mode == "sub" else 2 * dim
        self.w_c = nn.Linear(in_dim, dim, bias=False)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_r = nn.Linear(dim, dim, bias=False)
        self.head = nn.Linear(dim, 1)
        nn.init.zeros_(self.head.bias)

    def intra_correlation(self, v_rows: torch.Tensor,
                          t_rows: torch.Tensor) -> torch.Tensor:
        """Fuse matching visual/textual rows into unit-norm correlation nodes.

        sub mode: W_c applied to the elementwise squared difference;
        concat mode: W_c applied to the (2D) concatenation. Rows that map to
        zero stay zero (eps guard).
        """
        if self.intra_mode == "sub":
            fused = self.w_c((v_rows - t_rows).pow(2))
        else:
            fused = self.w_c(torch.cat([v_rows, t_rows], dim=-1))
        return l2norm(fused)

    def reason(self, nodes: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        """Run graph updates; the affinity matrix is recomputed each step.

        node_k <- ReLU(W_R sum_q A(q, k) node_q) over all (..., P, D) nodes.
        """
        steps = self.steps if steps is None else steps
        if steps < 1:
            raise ValueError("steps must be >= 1")
        c = nodes
        for _ in range(steps):
            a = affinity(c, self.w_q, self.w_k)
            agg = torch.einsum("...qk,...qd->...kd", a, c)
            c = F.relu(self.w_r(agg))
        return c

    def similarity(self, nodes: torch.Tensor) -> torch.Tensor:
        """ReLU linear head on the last (global) node: (..., P, D) -> (...,)."""
        return F.relu(self.head(nodes[..., -1, :]).squeeze(-1))

    def forward(self, v_rows: torch.Tensor, t_rows: torch.Tensor,
                steps: int | None = None) -> torch.Tensor:
        """Stacked pair+global rows for both modalities -> reasoning score."""
        return self.similarity(self.reason(self.intra_correlation(v_rows, t_rows),
                                           steps))
