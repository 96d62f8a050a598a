"""The assembled pretraining model: image/text encoders, pooling, PRS, decoder."""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import torch
from torch import nn

from microfeat.alignment import DescriptionDecoder
from microfeat.core import Encoder, PatchEmbedding, TextEmbedding, trunc_normal_init
from microfeat.pooling import AttentionPool
from microfeat.prs import prs_score


@dataclass
class ModelConfig:
    """Desk-scale defaults; every dimension is configuration-generic."""

    vocab_size: int
    dim: int = 64
    heads: int = 4
    depth_image: int = 4
    depth_text: int = 2
    decoder_depth: int = 2
    mlp_ratio: float = 4.0
    patch_side: int = 8
    image_size: tuple = (32, 32)
    max_text_len: int = 64
    prs_mode: str = "sigmoid_dot"
    temperature: float = 1.0
    share_pool: bool = True  # one pooling instance for both PRS and contrastive

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        h, w = self.image_size
        if h % self.patch_side or w % self.patch_side:
            raise ValueError("image size must be divisible by patch_side")

    @property
    def n_patches(self):
        h, w = self.image_size
        return (h // self.patch_side) * (w // self.patch_side)

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class PretrainModel(nn.Module):
    """Image encoder + text encoder + attention pooling + description decoder.

    All parameters are float64; construction is deterministic for a fixed seed.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        torch.manual_seed(seed)
        c = config
        self.patch_embed = PatchEmbedding(c.patch_side, c.dim, c.n_patches)
        self.image_encoder = Encoder(c.dim, c.heads, c.depth_image, c.mlp_ratio)
        self.text_embed = TextEmbedding(c.vocab_size, c.dim, c.max_text_len)
        self.text_encoder = Encoder(c.dim, c.heads, c.depth_text, c.mlp_ratio)
        self.pool = AttentionPool(c.dim)
        self.contrastive_pool = None if c.share_pool else AttentionPool(c.dim)
        self.decoder = DescriptionDecoder(
            c.vocab_size, c.dim, c.heads, c.decoder_depth, c.max_text_len, c.mlp_ratio
        )
        self.apply(trunc_normal_init)
        # positional tables and query/context tokens follow the same init scale
        for p in (self.patch_embed.pos, self.text_embed.pos, self.text_embed.ctx,
                  self.pool.query_token, self.decoder.pos):
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
        if self.contrastive_pool is not None:
            nn.init.trunc_normal_(self.contrastive_pool.query_token, std=0.02, a=-0.04, b=0.04)
        self.double()

    # -- image side ---------------------------------------------------------

    def encode_patches(self, patches, indices):
        """Embed kept patches with positions and run the image encoder.

        patches: (B, K, s, s, 3) float64; indices: (B, K) original grid index.
        """
        x = self.patch_embed(patches, indices)
        return self.image_encoder(x)

    def image_context_token(self, latents):
        """Pooled context token of encoded patch latents (..., N, d) -> (..., d)."""
        return self.pool(latents)

    def contrastive_image_token(self, latents):
        pool = self.pool if self.contrastive_pool is None else self.contrastive_pool
        return pool(latents)

    def embed_pool_patch(self, patches):
        """Encode candidate patches as 1-token sequences WITHOUT positions.

        patches: (..., s, s, 3); returns (..., d).
        """
        x = self.patch_embed.project(patches)  # (..., d)
        seq = x.reshape(-1, 1, x.shape[-1])
        z = self.image_encoder(seq)
        return z.reshape(*x.shape)

    def score_pool_patches(self, z_ct, z_p):
        """Relevance score in (0, 1); shapes broadcast over leading dims."""
        return prs_score(z_ct, z_p, mode=self.config.prs_mode)

    # -- text side ----------------------------------------------------------

    def encode_text_ids(self, ids, pad_id=None):
        """Encode token ids with the context token prepended; returns (B, T+1, d).

        PAD positions (and never the context token) are masked out of attention.
        """
        x = self.text_embed(ids, prepend_ctx=True)
        mask = None
        if pad_id is not None:
            pad = ids == pad_id
            keep_ctx = torch.zeros(*ids.shape[:-1], 1, dtype=torch.bool, device=ids.device)
            mask = torch.cat([keep_ctx, pad], dim=-1)
        return self.text_encoder(x, key_padding_mask=mask)

    def text_context_token(self, encoded):
        """Row 0 of the encoded text sequence."""
        return encoded[..., 0, :]

    def decode_description(self, image_latents, input_ids):
        """Per-position next-token logits conditioned on the image latents."""
        return self.decoder(image_latents, input_ids)
