"""Text-side input modeling and the two image-text objectives.

Contains the word-level tokenizer over a closed vocabulary, the description
join policy, the symmetric image-text contrastive loss, and the
autoregressive multi-modal description decoder with its negative
log-likelihood loss.
"""

from __future__ import annotations

import torch
from torch import nn

from microfeat.core import CrossAttention, MultiheadSelfAttention, MLP
from microfeat.corpus import LEVELS, RESERVED_TOKENS


class TokenizerError(ValueError):
    pass


class Tokenizer:
    """Whitespace word-level tokenizer over an ordered closed vocabulary."""

    def __init__(self, vocab):
        missing = [t for t in RESERVED_TOKENS if t not in vocab]
        if missing:
            raise TokenizerError(f"vocabulary missing reserved tokens {missing}")
        if len(set(vocab)) != len(vocab):
            raise TokenizerError("vocabulary contains duplicate tokens")
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.pad_id = self.index["PAD"]
        self.bos_id = self.index["BOS"]
        self.eos_id = self.index["EOS"]
        self.ctx_id = self.index["CTX"]
        self.sep_id = self.index["SEP"]

    def __len__(self):
        return len(self.vocab)

    @classmethod
    def from_records(cls, records):
        words = set()
        for rec in records:
            for _, text in rec.descriptions:
                words.update(text.split())
        return cls(list(RESERVED_TOKENS) + sorted(words))

    def encode(self, text: str) -> list:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise TokenizerError(f"out-of-vocabulary token '{word}'")
            ids.append(self.index[word])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.vocab[int(i)] for i in ids)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.vocab) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def join_description_ids(tokenizer: Tokenizer, descriptions, max_len: int) -> list:
    """Concatenate per-level texts high-to-low with SEP separators.

    When the result exceeds max_len tokens, whole high-level segments are
    dropped first so the lowest-level (most discriminative) text survives.
    """
    order = {lv: i for i, lv in enumerate(LEVELS)}
    segments = [tokenizer.encode(text) for lv, text in sorted(
        descriptions, key=lambda d: order.get(d[0], len(LEVELS)))]
    while segments:
        ids = []
        for i, seg in enumerate(segments):
            if i:
                ids.append(tokenizer.sep_id)
            ids.extend(seg)
        if len(ids) <= max_len:
            return ids
        segments = segments[1:]
    raise TokenizerError(f"no description fits within {max_len} tokens")


def contrastive_loss(z, w, temperature=1.0, normalize=True):
    """Symmetric InfoNCE over a batch of (image token, text token) pairs.

    Sum of the image-to-text and text-to-image cross-entropies, each averaged
    over the batch; a single pair gives exactly zero.
    """
    if z.shape != w.shape:
        raise ValueError("image and text token batches must have equal shapes")
    if normalize:
        z = torch.nn.functional.normalize(z, dim=-1)
        w = torch.nn.functional.normalize(w, dim=-1)
    logits = (z @ w.T) / temperature
    labels = torch.arange(z.shape[0], device=z.device)
    i2t = torch.nn.functional.cross_entropy(logits, labels)
    t2i = torch.nn.functional.cross_entropy(logits.T, labels)
    return i2t + t2i


class DecoderBlock(nn.Module):
    """Causal self-attention, then cross-attention onto image latents, then MLP."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiheadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x, memory):
        x = x + self.self_attn(self.norm1(x), causal=True)
        x = x + self.cross_attn(self.norm2(x), memory)
        x = x + self.mlp(self.norm3(x))
        return x


class DescriptionDecoder(nn.Module):
    """Autoregressive multi-modal decoder over description tokens.

    Logits at position t depend only on input tokens 0..t (causal mask) and
    on the image latents through cross-attention.
    """

    def __init__(self, vocab_size, dim, heads, depth=2, max_len=64, mlp_ratio=4.0):
        super().__init__()
        self.max_len = max_len
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(max_len, dim))
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)

    def forward(self, memory, input_ids):
        """memory: (B, S, d) image latents; input_ids: (B, T). Returns (B, T, |V|)."""
        t = input_ids.shape[-1]
        if t > self.max_len:
            raise ValueError(f"decoder input length {t} exceeds maximum {self.max_len}")
        x = self.tok(input_ids) + self.pos[:t]
        for block in self.blocks:
            x = block(x, memory)
        return self.head(self.norm(x))


def description_loss(logits, targets, pad_id):
    """Negative log-likelihood of the target tokens, PAD positions excluded.

    Returns (loss, token count); the loss is the mean over batch items of the
    per-sequence sum of next-token NLLs.
    """
    if logits.shape[:-1] != targets.shape:
        raise ValueError("logits and targets have mismatched shapes")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = (targets != pad_id).to(nll.dtype)
    batch = targets.shape[0] if targets.dim() > 1 else 1
    loss = (nll * mask).sum() / batch
    return loss, int(mask.sum().item())
