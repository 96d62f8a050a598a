"""Single-query attention pooling of encoded patch latents into one token.

A learned placeholder token queries the encoded sequence; the pooled output
is the attention-weighted convex combination of the value projections, with
the 1/sqrt(d) logit scale taken over the full embedding dimension.
"""

from __future__ import annotations

import torch
from torch import nn


class AttentionPool(nn.Module):
    """Collapse an (N, d) latent sequence to a single d-vector."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.scale = dim ** -0.5
        self.query_token = nn.Parameter(torch.zeros(dim))
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def attention_weights(self, z):
        """Simplex weights over the input rows; z: (..., N, d)."""
        if z.shape[-2] == 0:
            raise ValueError("attention pooling requires a non-empty sequence")
        q = self.q(self.query_token)  # (d,)
        k = self.k(z)  # (..., N, d)
        logits = (k @ q) * self.scale
        return torch.softmax(logits, dim=-1)

    def forward(self, z):
        weights = self.attention_weights(z)
        values = self.v(z)
        return (weights.unsqueeze(-2) @ values).squeeze(-2)
