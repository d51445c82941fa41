"""Full similarity model: encoders + scalar matching + graph reasoning.

One RetrievalScorer computes any subset of the four similarity levels
(it, ti, g, r) for matched pairs, cross batches, or one query set against
a whole gallery; the subset actually computed is controlled by `need` so
ablated configurations skip dead work.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .encoders import AttentionPool, QueryEncoder, RegionEncoder
from .matching import (cosine_matrix, global_similarity, local_similarity_it,
                       local_similarity_ti, region_attention_ti)
from .reasoning import GraphReasoner, project_visual

ALL_LEVELS = frozenset({"it", "ti", "g", "r"})


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int            # X
    word_dim: int = 300         # E
    embed_dim: int = 256        # D, also the GRU hidden size
    lambda1: float = 5.0
    lambda2: float = 15.0
    vr_steps: int = 3
    intra_mode: str = "sub"
    shared_pool: bool = False

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("temperature coefficients must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimilarityBundle:
    """All similarity scalars of one model for one (image, query set) pair."""

    s_it: float
    s_ti: float
    s_g: float
    s_r: float
    s1: float
    s2: float
    s_ensemble: float

    @classmethod
    def from_levels(cls, levels: dict, alpha: float, beta: float) -> "SimilarityBundle":
        gamma = 1.0 - alpha - beta
        s1 = alpha * levels["it"] + beta * levels["r"] + gamma * levels["g"]
        s2 = alpha * levels["ti"] + beta * levels["r"] + gamma * levels["g"]
        return cls(levels["it"], levels["ti"], levels["g"], levels["r"],
                   s1, s2, s1 + s2)


def with_temperatures(model: "RetrievalScorer", lambda1: float,
                      lambda2: float) -> "RetrievalScorer":
    """Same weights, different attention temperatures (for sensitivity sweeps)."""
    cfg = ModelConfig(**{**model.cfg.to_dict(),
                         "lambda1": lambda1, "lambda2": lambda2})
    clone = RetrievalScorer(cfg, dtype=model.dtype)
    clone.load_state_dict(model.state_dict())
    clone.eval()
    return clone


class RetrievalScorer(nn.Module):
    """Scores images against ordered query sets at all similarity levels."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.region_enc = RegionEncoder(cfg.feature_dim, cfg.embed_dim)
        self.query_enc = QueryEncoder(cfg.vocab_size, cfg.word_dim, cfg.embed_dim)
        self.pool_vis = AttentionPool(cfg.embed_dim)
        self.pool_txt = self.pool_vis if cfg.shared_pool else AttentionPool(cfg.embed_dim)
        self.reasoner = GraphReasoner(cfg.embed_dim, cfg.vr_steps, cfg.intra_mode)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.region_enc.fc.weight.dtype

    def encode_images(self, features: torch.Tensor):
        """(..., K, X) -> local (..., K, D) and pooled global (..., D)."""
        v_loc = self.region_enc(features)
        v_glo, _ = self.pool_vis(v_loc)
        return v_loc, v_glo

    def encode_queries(self, tokens: torch.Tensor, lengths: torch.Tensor):
        """(..., N, L) ids + (..., N) lengths -> (..., N, D) and (..., D)."""
        t_loc = self.query_enc(tokens, lengths)
        t_glo, _ = self.pool_txt(t_loc)
        return t_loc, t_glo

    def pair_similarities(self, v_loc, v_glo, t_loc, t_glo,
                          need=ALL_LEVELS) -> dict[str, torch.Tensor]:
        """Similarities over broadcastable leading dims.

        v_loc (..., K, D), v_glo (..., D), t_loc (..., N, D), t_glo (..., D);
        leading dims broadcast against each other (e.g. (n, 1) vs (1, m) for
        a full cross product). Returns one tensor per requested level.
        """
        unknown = set(need) - ALL_LEVELS
        if unknown:
            raise ValueError(f"unknown similarity levels: {sorted(unknown)}")
        cfg = self.cfg
        out: dict[str, torch.Tensor] = {}
        sim = None
        if need & {"it", "ti", "r"}:
            sim = cosine_matrix(v_loc, t_loc)
        if "it" in need:
            out["it"] = local_similarity_it(sim, cfg.lambda1)
        if "ti" in need:
            out["ti"] = local_similarity_ti(sim, cfg.lambda2)
        if "g" in need:
            out["g"] = global_similarity(v_glo, t_glo, check=False)
        if "r" in need:
            v_p = project_visual(sim, v_loc, cfg.lambda2)
            lead = v_p.shape[:-2]
            d = v_p.shape[-1]
            n = t_loc.shape[-2]
            v_rows = torch.cat(
                [v_p, torch.broadcast_to(v_glo.unsqueeze(-2), (*lead, 1, d))], dim=-2)
            t_rows = torch.cat(
                [torch.broadcast_to(t_loc, (*lead, n, d)),
                 torch.broadcast_to(t_glo.unsqueeze(-2), (*lead, 1, d))], dim=-2)
            out["r"] = self.reasoner(v_rows, t_rows)
        return out

    def cross_similarities(self, features, tokens, lengths,
                           need=ALL_LEVELS) -> dict[str, torch.Tensor]:
        """All images x all query sets of a batch -> (n, m) per level.

        Entry (a, b) scores image a against query set b.
        """
        v_loc, v_glo = self.encode_images(features)
        t_loc, t_glo = self.encode_queries(tokens, lengths)
        return self.pair_similarities(
            v_loc.unsqueeze(1), v_glo.unsqueeze(1),
            t_loc.unsqueeze(0), t_glo.unsqueeze(0), need)

    def forward(self, features, tokens, lengths, need=ALL_LEVELS):
        return self.cross_similarities(features, tokens, lengths, need)

    def matched_similarities(self, features, tokens, lengths,
                             need=ALL_LEVELS) -> dict[str, torch.Tensor]:
        """Diagonal pairs only: image b against query set b -> (n,) per level."""
        v_loc, v_glo = self.encode_images(features)
        t_loc, t_glo = self.encode_queries(tokens, lengths)
        return self.pair_similarities(v_loc, v_glo, t_loc, t_glo, need)

    def bundle(self, features, tokens, lengths, alpha: float,
               beta: float) -> SimilarityBundle:
        """All four levels plus aggregates for one (image, query set) pair."""
        sims = self.matched_similarities(features.unsqueeze(0),
                                         tokens.unsqueeze(0),
                                         lengths.unsqueeze(0))
        levels = {k: float(v[0]) for k, v in sims.items()}
        return SimilarityBundle.from_levels(levels, alpha, beta)

    @torch.no_grad()
    def explain(self, features, tokens, lengths) -> dict[str, torch.Tensor]:
        """Per-query attention over regions for visualization.

        Returns region weights (N, K) summing to 1 per query (the text-image
        attention), the raw cosine matrix (N, K), and the top-1 region index
        per query. Inputs are a single image (K, X) and query set (N, L).
        """
        v_loc = self.region_enc(features)
        t_loc = self.query_enc(tokens, lengths)
        sim = cosine_matrix(v_loc, t_loc)               # (K, N)
        att = region_attention_ti(sim, self.cfg.lambda2)
        return {
            "weights": att.transpose(-2, -1),           # (N, K)
            "cosine": sim.transpose(-2, -1),            # (N, K)
            "top_region": att.argmax(dim=-2),           # (N,)
        }
