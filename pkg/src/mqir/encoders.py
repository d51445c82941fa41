"""Region and query encoders plus self-attention global pooling."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .data import PAD_ID
from .utils import l2norm, l2norm_strict


class RegionEncoder(nn.Module):
    """Affine projection of raw detector features into the D-dim space.

    No normalization here; cosine scoring normalizes later.
    """

    def __init__(self, feature_dim: int, embed_dim: int):
        super().__init__()
        self.fc = nn.Linear(feature_dim, embed_dim)
        nn.init.zeros_(self.fc.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(..., K, X) -> (..., K, D)."""
        if features.shape[-1] != self.fc.in_features:
            raise ValueError(f"expected feature dim {self.fc.in_features}, "
                             f"got {features.shape[-1]}")
        return self.fc(features)


class QueryEncoder(nn.Module):
    """Word embedding + Bi-GRU; a query is the averaged fwd/bwd hidden state
    at its true last token. Padded positions never influence the output."""

    def __init__(self, vocab_size: int, word_dim: int, hidden_dim: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, word_dim, padding_idx=PAD_ID)
        self.gru = nn.GRU(word_dim, hidden_dim, batch_first=True,
                          bidirectional=True)
        self.hidden_dim = hidden_dim
        nn.init.normal_(self.embed.weight, std=0.1)
        with torch.no_grad():
            self.embed.weight[PAD_ID].zero_()
        for name, p in self.gru.named_parameters():
            if name.startswith("bias"):
                nn.init.zeros_(p)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(..., L) token ids with (...,) true lengths -> (..., D)."""
        lead = tokens.shape[:-1]
        flat = tokens.reshape(-1, tokens.shape[-1])
        lens = lengths.reshape(-1)
        if (lens < 1).any():
            raise ValueError("query length must be >= 1")
        emb = self.embed(flat)
        packed = pack_padded_sequence(emb, lens.cpu(), batch_first=True,
                                      enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True)
        h = (out[..., :self.hidden_dim] + out[..., self.hidden_dim:]) / 2
        idx = (lens - 1).view(-1, 1, 1).expand(-1, 1, self.hidden_dim)
        last = h.gather(1, idx).squeeze(1)
        return last.reshape(*lead, self.hidden_dim)


class AttentionPool(nn.Module):
    """Self-attention pooling of R row vectors into one unit-norm vector.

    Weight for row i is softmax over rows of W_s[(W_ave f_ave) * (W_r f_i)],
    where f_ave is the plain row mean.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.w_ave = nn.Linear(dim, dim, bias=False)
        self.w_r = nn.Linear(dim, dim, bias=False)
        self.w_s = nn.Linear(dim, 1, bias=False)

    def forward(self, rows: torch.Tensor, strict: bool = False):
        """(..., R, D) -> (global (..., D) unit vector, weights (..., R)).

        strict=True raises on a zero pooled vector instead of eps-guarding.
        """
        if rows.shape[-2] < 1:
            raise ValueError("need at least one row to pool")
        f_ave = rows.mean(dim=-2, keepdim=True)
        logits = self.w_s(self.w_ave(f_ave) * self.w_r(rows)).squeeze(-1)
        weights = F.softmax(logits, dim=-1)
        pooled = torch.einsum("...r,...rd->...d", weights, rows)
        normed = l2norm_strict(pooled) if strict else l2norm(pooled)
        return normed, weights
