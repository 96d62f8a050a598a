"""Patch relevance scoring and its binary cross-entropy loss.

The relevance score between an image's pooled context token and a candidate
pool patch is sigmoid of the scaled dot product, so it lives in (0, 1) and
the loss is an ordinary binary cross-entropy over positive (same-image) and
negative (other-image) candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SCORE_CLAMP = 1e-7


@dataclass
class ScoredPatch:
    image_id: str
    index: int
    score: float  # in (0, 1)
    label: int  # 1 iff the patch came from the anchor image


def prs_score(z_ct, z_p, mode="sigmoid_dot"):
    """Relevance in (0, 1) between context token(s) and patch latent(s).

    mode "sigmoid_dot": sigmoid(a . b / sqrt(d)); mode "cosine": (1 + cos)/2.
    Shapes broadcast; the last dimension is the embedding dimension.
    """
    if mode == "sigmoid_dot":
        d = z_ct.shape[-1]
        return torch.sigmoid((z_ct * z_p).sum(-1) / math.sqrt(d))
    if mode == "cosine":
        cos = torch.nn.functional.cosine_similarity(z_ct, z_p, dim=-1)
        return (1.0 + cos) / 2.0
    raise ValueError(f"unknown similarity mode '{mode}'")


def relevance_loss(scores, labels):
    """Mean binary cross-entropy over scored patches.

    Returns (loss, saturation count), where the count tallies scores clamped
    away from exactly 0 or 1.
    """
    if scores.numel() == 0:
        raise ValueError("relevance_loss requires at least one scored patch")
    saturated = int(((scores <= 0.0) | (scores >= 1.0)).sum().item())
    s = scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    y = labels.to(s.dtype)
    loss = -(y * torch.log(s) + (1.0 - y) * torch.log(1.0 - s)).mean()
    return loss, saturated
