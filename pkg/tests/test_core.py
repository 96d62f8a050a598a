import numpy as np
import pytest
import torch
from torch import nn

from microfeat.core import (
    CrossAttention,
    Encoder,
    EncoderBlock,
    MultiheadSelfAttention,
    NumericsError,
    PatchEmbedding,
    TextEmbedding,
    grad_check,
    trunc_normal_init,
)


def make_attn(dim=8, heads=2, seed=0):
    torch.manual_seed(seed)
    attn = MultiheadSelfAttention(dim, heads).double()
    for p in attn.parameters():
        nn.init.normal_(p, std=0.3)
    return attn


def test_attention_rows_are_normalized():
    attn = make_attn()
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    weights, _ = attn.attention_weights(x)
    assert torch.all(weights >= 0)
    assert torch.allclose(weights.sum(-1), torch.ones(2, attn.heads, 5, dtype=torch.float64),
                          atol=1e-6)


def test_attention_head_split():
    with pytest.raises(ValueError):
        MultiheadSelfAttention(10, 3)


def test_causal_mask_blocks_the_future():
    attn = make_attn()
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    base = attn(x, causal=True)
    y = x.clone()
    y[0, 4] += 10.0  # perturb a late position
    out = attn(y, causal=True)
    assert torch.equal(out[0, :4], base[0, :4])
    assert not torch.allclose(out[0, 4:], base[0, 4:])


def test_key_padding_mask_removes_keys():
    attn = make_attn()
    x = torch.randn(1, 5, 8, dtype=torch.float64)
    mask = torch.tensor([[False, False, False, True, True]])
    base = attn(x, key_padding_mask=mask)
    y = x.clone()
    y[0, 3:] = 123.0
    out = attn(y, key_padding_mask=mask)
    # masked keys may change their own query rows but not the unmasked ones
    assert torch.allclose(out[0, :3], base[0, :3], atol=1e-12)


def test_encoder_is_permutation_equivariant():
    torch.manual_seed(1)
    enc = Encoder(8, 2, depth=2).double()
    x = torch.randn(1, 7, 8, dtype=torch.float64)
    perm = torch.randperm(7)
    assert torch.allclose(enc(x)[:, perm], enc(x[:, perm]), atol=1e-10)


def test_encoder_block_is_residual():
    torch.manual_seed(0)
    block = EncoderBlock(8, 2).double()
    # zero the output projections so the block must reduce to the identity
    with torch.no_grad():
        block.attn.proj.weight.zero_()
        block.attn.proj.bias.zero_()
        block.mlp.fc2.weight.zero_()
        block.mlp.fc2.bias.zero_()
    x = torch.randn(2, 4, 8, dtype=torch.float64)
    assert torch.equal(block(x), x)


def test_encoder_raises_on_nonfinite():
    enc = Encoder(8, 2, depth=1).double()
    with torch.no_grad():
        enc.blocks[0].attn.qkv.weight.fill_(float("nan"))
    with pytest.raises(NumericsError, match="block 0"):
        enc(torch.randn(1, 3, 8, dtype=torch.float64))


def test_cross_attention_depends_on_memory():
    torch.manual_seed(2)
    cross = CrossAttention(8, 2).double()
    for p in cross.parameters():
        nn.init.normal_(p, std=0.3)
    x = torch.randn(1, 3, 8, dtype=torch.float64)
    m1 = torch.randn(1, 5, 8, dtype=torch.float64)
    m2 = torch.randn(1, 5, 8, dtype=torch.float64)
    assert not torch.allclose(cross(x, m1), cross(x, m2))


def test_trunc_normal_init_bounds():
    torch.manual_seed(0)
    lin = nn.Linear(64, 256)
    trunc_normal_init(lin)
    assert lin.weight.abs().max().item() <= 0.04 + 1e-12
    assert torch.all(lin.bias == 0)
    ln = nn.LayerNorm(8)
    trunc_normal_init(ln)
    assert torch.all(ln.weight == 1) and torch.all(ln.bias == 0)


def test_patch_embedding_positions():
    torch.manual_seed(0)
    emb = PatchEmbedding(4, 8, n_positions=16).double()
    with torch.no_grad():
        emb.pos.normal_()
    patches = torch.randn(2, 3, 4, 4, 3, dtype=torch.float64)
    idx = torch.tensor([[0, 5, 9], [1, 2, 15]])
    out = emb(patches, idx)
    assert torch.allclose(out, emb.project(patches) + emb.pos[idx], atol=1e-12)


def test_patch_embedding_rejects_wrong_side():
    emb = PatchEmbedding(4, 8, n_positions=16).double()
    with pytest.raises(ValueError, match="side"):
        emb.project(torch.randn(1, 5, 5, 3, dtype=torch.float64))


def test_text_embedding_prepends_context():
    torch.manual_seed(0)
    emb = TextEmbedding(11, 8, max_len=6).double()
    with torch.no_grad():
        emb.ctx.normal_()
    ids = torch.tensor([[1, 2, 3]])
    out = emb(ids)
    assert out.shape == (1, 4, 8)
    assert torch.equal(out[0, 0], emb.ctx)
    with pytest.raises(ValueError, match="length"):
        emb(torch.zeros(1, 7, dtype=torch.long))


def test_grad_check_accepts_correct_gradients():
    torch.manual_seed(3)
    model = nn.Sequential(nn.Linear(4, 8), nn.Tanh(), nn.Linear(8, 1)).double()
    x = torch.randn(5, 4, dtype=torch.float64)

    def loss_fn(m):
        return (m(x) ** 2).mean()

    assert grad_check(loss_fn, model) < 1e-7


def test_grad_check_flags_wrong_gradients():
    torch.manual_seed(3)
    lin = nn.Linear(4, 1).double()
    x = torch.randn(5, 4, dtype=torch.float64)

    class Doubled(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return t.clone()

        @staticmethod
        def backward(ctx, g):
            return 2.0 * g

    def loss_fn(m):
        return Doubled.apply(m(x)).pow(2).mean()

    assert grad_check(loss_fn, lin) > 0.3
