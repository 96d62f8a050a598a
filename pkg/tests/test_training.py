import json
import math
import os

import numpy as np
import pytest
import torch

from conftest import TINY_MODEL
from microfeat.alignment import Tokenizer
from microfeat.patching import PatchPool
from microfeat.training import (
    AdamW,
    DivergenceError,
    TrainConfig,
    compute_losses,
    lr_at,
    prepare_batch,
    train,
)

TINY_TRAIN = dict(batch_size=2, k_pos=2, k_neg=2, pool_capacity=64,
                  checkpoint_every=0, model=dict(TINY_MODEL))


def tiny_cfg(**over):
    base = dict(TINY_TRAIN)
    base.update(over)
    return TrainConfig(**base)


# -- schedule ----------------------------------------------------------------


def test_lr_hits_base_exactly_at_warmup_end():
    cfg = TrainConfig(steps=2000, base_lr=3e-4, warmup_frac=0.05)
    warmup = int(round(0.05 * 2000))
    assert lr_at(warmup, cfg) == 3e-4
    assert lr_at(0, cfg) == 0.0


def test_lr_warmup_is_linear():
    cfg = TrainConfig(steps=1000, base_lr=1e-3, warmup_frac=0.1)
    for step in range(100):
        assert lr_at(step, cfg) == pytest.approx(1e-3 * step / 100, abs=1e-18)


def test_lr_cosine_tail():
    cfg = TrainConfig(steps=1000, base_lr=1e-3, warmup_frac=0.1)
    assert lr_at(1000, cfg) == pytest.approx(0.0, abs=1e-18)
    mid = (100 + 1000) // 2
    assert lr_at(mid, cfg) == pytest.approx(5e-4, abs=1e-12)
    rates = [lr_at(s, cfg) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_lr_rejects_out_of_range():
    cfg = TrainConfig(steps=10)
    with pytest.raises(ValueError):
        lr_at(11, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_full_scale_config_learning_rate():
    path = os.path.join(os.path.dirname(__file__), "..", "configs", "full_scale.json")
    cfg = TrainConfig.from_file(path)
    assert cfg.base_lr == 1.5e-4


# -- optimizer ---------------------------------------------------------------


def test_adamw_first_step_closed_form():
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = AdamW({"p": p}, weight_decay=0.1)
    p.grad = torch.tensor([0.5], dtype=torch.float64)
    lr = 1e-2
    opt.step(lr)
    # bias-corrected moments after one step reduce to g and g^2
    expected = 2.0 * (1 - lr * 0.1) - lr * 0.5 / (math.sqrt(0.25) + 1e-8)
    assert p.item() == pytest.approx(expected, abs=1e-14)


def test_adamw_matches_reference_implementation():
    torch.manual_seed(0)
    model_a = torch.nn.Linear(4, 3).double()
    model_b = torch.nn.Linear(4, 3).double()
    model_b.load_state_dict(model_a.state_dict())
    opt_a = AdamW(dict(model_a.named_parameters()), weight_decay=0.05)
    opt_b = torch.optim.AdamW(model_b.parameters(), lr=1e-3, betas=(0.9, 0.999),
                              eps=1e-8, weight_decay=0.05)
    x = torch.randn(8, 4, dtype=torch.float64)
    for _ in range(5):
        for model, opt in ((model_a, opt_a), (model_b, opt_b)):
            opt.zero_grad()
            model(x).pow(2).mean().backward()
            opt.step(1e-3) if isinstance(opt, AdamW) else opt.step()
    for pa, pb in zip(model_a.parameters(), model_b.parameters()):
        assert torch.allclose(pa, pb, atol=1e-10)


# -- config ------------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"steps": 5, "nonsense": 1})


def test_config_round_trips_through_json(tmp_path):
    cfg = tiny_cfg(steps=17, base_lr=2e-4)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_file(path) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_rel=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(enable_rel=False, enable_con=False, enable_desc=False)


# -- batches and losses ------------------------------------------------------


@pytest.fixture()
def batch_parts(tiny_corpus):
    tokenizer = Tokenizer.from_records(tiny_corpus)
    cfg = tiny_cfg(batch_size=4)
    pool = PatchPool(capacity=cfg.pool_capacity)
    rng = np.random.default_rng(0)
    batch = prepare_batch(tiny_corpus, [0, 2, 4, 6], pool, cfg, tokenizer, rng,
                          patch_side=8, max_text_len=64)
    return tokenizer, cfg, pool, batch


def test_prepare_batch_shapes_and_labels(batch_parts):
    tokenizer, cfg, pool, batch = batch_parts
    assert batch.kept_blocks.shape == (4, 2, 8, 8, 3)  # 4 patches, half kept
    assert batch.cand_blocks.shape == (4, cfg.k_pos + cfg.k_neg, 8, 8, 3)
    assert torch.equal(batch.cand_labels.sum(dim=1),
                       torch.full((4,), cfg.k_pos, dtype=torch.long))
    assert len(pool) == 4 * 2  # every held-out patch entered the pool
    assert torch.all(batch.dec_input[:, 0] == tokenizer.bos_id)


def test_prepare_batch_decoder_targets_shifted(batch_parts):
    tokenizer, _, _, batch = batch_parts
    assert torch.equal(batch.dec_input[:, 1:], batch.dec_target[:, :-1])
    for row in batch.dec_target:
        toks = row.tolist()
        assert tokenizer.eos_id in toks
        after_eos = toks[toks.index(tokenizer.eos_id) + 1:]
        assert all(t == tokenizer.pad_id for t in after_eos)


def test_total_loss_is_weighted_sum(tiny_model, batch_parts):
    tokenizer, cfg, _, batch = batch_parts
    tiny_model._pad_id = tokenizer.pad_id
    base = TrainConfig.from_dict({**cfg.to_dict(),
                                  "lambda_rel": 1.0, "lambda_con": 1.0, "lambda_desc": 1.0})
    total, breakdown, _ = compute_losses(tiny_model, batch, base)
    assert total.item() == pytest.approx(
        sum(v.item() for v in breakdown.values()), abs=1e-12)

    weighted = TrainConfig.from_dict({**cfg.to_dict(),
                                      "lambda_rel": 2.0, "lambda_con": 0.5, "lambda_desc": 0.1})
    total_w, breakdown_w, _ = compute_losses(tiny_model, batch, weighted)
    for name in breakdown:
        assert breakdown_w[name].item() == pytest.approx(breakdown[name].item(), abs=1e-12)
    expected = (2.0 * breakdown["loss_rel"] + 0.5 * breakdown["loss_con"]
                + 0.1 * breakdown["loss_desc"]).item()
    assert total_w.item() == pytest.approx(expected, abs=1e-12)


def test_disabled_terms_are_absent(tiny_model, batch_parts):
    tokenizer, cfg, _, batch = batch_parts
    tiny_model._pad_id = tokenizer.pad_id
    only_rel = TrainConfig.from_dict({**cfg.to_dict(),
                                      "enable_con": False, "enable_desc": False})
    total, breakdown, aux = compute_losses(tiny_model, batch, only_rel)
    assert set(breakdown) == {"loss_rel"}
    assert total.item() == pytest.approx(breakdown["loss_rel"].item(), abs=1e-15)
    assert 0.0 < aux["prs_pos"] < 1.0 and 0.0 < aux["prs_neg"] < 1.0


def test_nonfinite_loss_raises(tiny_model, batch_parts):
    tokenizer, cfg, _, batch = batch_parts
    tiny_model._pad_id = tokenizer.pad_id
    with torch.no_grad():
        tiny_model.decoder.head.weight.fill_(float("inf"))
    with pytest.raises((DivergenceError, Exception)):
        compute_losses(tiny_model, batch, cfg)


# -- training loop -----------------------------------------------------------


def test_training_is_deterministic(tiny_corpus):
    cfg = tiny_cfg(steps=5, seed=9)
    model_a, metrics_a, _ = train(cfg, tiny_corpus)
    model_b, metrics_b, _ = train(cfg, tiny_corpus)
    assert metrics_a == metrics_b
    for pa, pb in zip(model_a.parameters(), model_b.parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_resume_is_bit_exact(tiny_corpus, tmp_path):
    cfg = tiny_cfg(steps=6, seed=4, checkpoint_every=3)
    full_dir = tmp_path / "full"
    model_full, metrics_full, _ = train(cfg, tiny_corpus, out_dir=str(full_dir))

    ckpt = full_dir / "step-000003.ckpt"
    resume_dir = tmp_path / "resume"
    model_res, metrics_res, _ = train(cfg, tiny_corpus, out_dir=str(resume_dir),
                                      resume_from=str(ckpt))
    assert [m["total"] for m in metrics_res] == [m["total"] for m in metrics_full[3:]]
    for pa, pb in zip(model_full.parameters(), model_res.parameters()):
        assert torch.equal(pa, pb)
    assert (full_dir / "final.ckpt").read_bytes() == (resume_dir / "final.ckpt").read_bytes()


def test_saved_model_reloads_exactly(tiny_corpus, tmp_path):
    from microfeat.training import load_model

    cfg = tiny_cfg(steps=4, seed=2)
    out = tmp_path / "run"
    model, _, tokenizer = train(cfg, tiny_corpus, out_dir=str(out))
    loaded, tok2, cfg2, extra = load_model(str(out / "final.ckpt"))
    assert tok2.vocab == tokenizer.vocab
    assert cfg2 == cfg
    assert extra["step"] == 4
    for pa, pb in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(pa, pb)


def test_divergence_aborts(tiny_corpus):
    cfg = tiny_cfg(steps=300, seed=0, base_lr=50.0, warmup_frac=0.0)
    with pytest.raises(DivergenceError):
        train(cfg, tiny_corpus)


def test_metrics_written(tiny_corpus, tmp_path):
    cfg = tiny_cfg(steps=3, seed=1)
    out = tmp_path / "run"
    _, metrics, _ = train(cfg, tiny_corpus, out_dir=str(out))
    lines = (out / "metrics.jsonl").read_text().strip().split("\n")
    assert len(lines) == 3
    first = json.loads(lines[0])
    assert {"step", "lr", "total", "loss_rel", "loss_con", "loss_desc"} <= set(first)
