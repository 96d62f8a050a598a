"""Transformer substrate: embeddings, pre-norm blocks, encoders, grad checking.

Everything runs in double precision on CPU; forward passes are bit-identical
for a fixed seed in single-threaded mode.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


class NumericsError(RuntimeError):
    """Raised when activations go non-finite inside a block stack."""


def trunc_normal_init(module, std=0.02):
    """Truncated normal for weights, zeros for biases; LN stays (1, 0)."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class MultiheadSelfAttention(nn.Module):
    """Scaled dot-product self-attention, optional causal mask and key padding."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attention_weights(self, x, causal=False, key_padding_mask=None):
        b, t, _ = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(-2, -1)) * self.scale  # (b, heads, t, t)
        if causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
            logits = logits.masked_fill(mask, float("-inf"))
        if key_padding_mask is not None:  # True marks PAD keys
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        return attn, v

    def forward(self, x, causal=False, key_padding_mask=None):
        b, t, _ = x.shape
        attn, v = self.attention_weights(x, causal=causal, key_padding_mask=key_padding_mask)
        out = (attn @ v).transpose(1, 2).reshape(b, t, self.dim)
        return self.proj(out)


class CrossAttention(nn.Module):
    """Multi-head attention from a query sequence onto a memory sequence."""

    def __init__(self, dim, heads):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, memory):
        b, t, _ = x.shape
        s = memory.shape[1]
        q = self.q(x).reshape(b, t, self.heads, self.head_dim).transpose(1, 2)
        kv = self.kv(memory).reshape(b, s, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, self.dim)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm residual block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x, causal=False, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), causal=causal, key_padding_mask=key_padding_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class Encoder(nn.Module):
    """Stack of pre-norm blocks followed by a final LayerNorm."""

    def __init__(self, dim, heads, depth, mlp_ratio=4.0):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, key_padding_mask=None):
        for i, block in enumerate(self.blocks):
            x = block(x, key_padding_mask=key_padding_mask)
            if not torch.isfinite(x).all():
                raise NumericsError(f"non-finite activations after encoder block {i}")
        return self.norm(x)


class PatchEmbedding(nn.Module):
    """Linear projection of flattened patches plus a positional table."""

    def __init__(self, patch_side, dim, n_positions):
        super().__init__()
        self.patch_side = patch_side
        self.proj = nn.Linear(patch_side * patch_side * 3, dim)
        self.pos = nn.Parameter(torch.zeros(n_positions, dim))

    def project(self, patches):
        """Projection only (no positional term), for pool-patch encoding."""
        if patches.shape[-3] != self.patch_side or patches.shape[-2] != self.patch_side:
            raise ValueError(
                f"patch block side {tuple(patches.shape[-3:-1])} does not match "
                f"configured side {self.patch_side}"
            )
        flat = patches.reshape(*patches.shape[:-3], -1)
        return self.proj(flat)

    def forward(self, patches, indices):
        """patches: (..., K, s, s, 3); indices: (..., K) original grid indices."""
        x = self.project(patches)
        return x + self.pos[indices]


class TextEmbedding(nn.Module):
    """Token embedding plus positional table, with a learned context token
    prepended at position 0."""

    def __init__(self, vocab_size, dim, max_len):
        super().__init__()
        self.max_len = max_len
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(max_len, dim))
        self.ctx = nn.Parameter(torch.zeros(dim))

    def forward(self, ids, prepend_ctx=True):
        """ids: (B, T) token ids; returns (B, T(+1), d)."""
        t = ids.shape[-1]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds maximum {self.max_len}")
        x = self.tok(ids) + self.pos[:t]
        if prepend_ctx:
            ctx = self.ctx.expand(*ids.shape[:-1], 1, -1)
            x = torch.cat([ctx, x], dim=-2)
        return x


def grad_check(loss_fn, model, eps=1e-5, max_entries_per_tensor=4, seed=0):
    """Max relative error of autograd gradients vs central finite differences.

    Samples a few entries per parameter tensor; model must be float64. Each
    coordinate is probed at a small ladder of step sizes (eps, 10eps, 100eps)
    and scored against the best-agreeing one, since no single step size wins
    both the roundoff and the truncation battle on coordinates whose gradient
    is tiny relative to the loss magnitude.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        flat = p.detach().reshape(-1)
        gflat = p.grad.detach().reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(max_entries_per_tensor, n), replace=False)
        for i in picks:
            i = int(i)
            orig = flat[i].item()
            g_impl = gflat[i].item()
            best = float("inf")
            for step in (eps, 10 * eps, 100 * eps, 1000 * eps):
                with torch.no_grad():
                    flat[i] = orig + step
                    plus = loss_fn(model).item()
                    flat[i] = orig - step
                    minus = loss_fn(model).item()
                    flat[i] = orig
                g_fd = (plus - minus) / (2 * step)
                err = abs(g_impl - g_fd) / max(abs(g_impl), abs(g_fd), 1e-8)
                best = min(best, err)
            worst = max(worst, best)
    model.zero_grad(set_to_none=True)
    return worst
