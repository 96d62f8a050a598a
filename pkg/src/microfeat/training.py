"""Training harness: loss composition, schedule, optimizer, checkpoints, metrics."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict, fields as dataclass_fields

import numpy as np
import torch

from microfeat.alignment import Tokenizer, contrastive_loss, description_loss, join_description_ids
from microfeat.checkpoint import load_checkpoint, save_checkpoint
from microfeat.model import ModelConfig, PretrainModel
from microfeat.patching import PatchPool, split, sample_subset
from microfeat.prs import relevance_loss


class DivergenceError(RuntimeError):
    """Total loss stayed above 10x its initialization value for too long."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    base_lr: float = 1e-3
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    lambda_rel: float = 1.0
    lambda_con: float = 0.3
    lambda_desc: float = 0.05
    enable_rel: bool = True
    enable_con: bool = True
    enable_desc: bool = True
    sampling_ratio: float = 0.5
    k_pos: int = 8
    k_neg: int = 8
    pool_capacity: int = 4096
    temperature: float = 1.0
    checkpoint_every: int = 500
    threads: int = 1
    model: dict = field(default_factory=dict)  # ModelConfig overrides (vocab_size set at train time)

    def __post_init__(self):
        for name in ("lambda_rel", "lambda_con", "lambda_desc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.enable_rel or self.enable_con or self.enable_desc):
            raise ValueError("at least one loss must be enabled")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclass_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def lr_at(step, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at the final step."""
    total = config.steps
    warmup = int(round(config.warmup_frac * total))
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return config.base_lr * step / warmup
    if total == warmup:
        return config.base_lr
    progress = (step - warmup) / (total - warmup)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            p.mul_(1.0 - lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        out = {}
        for n in self.params:
            out[f"optim.m.{n}"] = self.m[n].numpy()
            out[f"optim.v.{n}"] = self.v[n].numpy()
        return out

    def load_state(self, tensors, t):
        self.t = t
        for n in self.params:
            self.m[n] = torch.from_numpy(tensors[f"optim.m.{n}"]).clone()
            self.v[n] = torch.from_numpy(tensors[f"optim.v.{n}"]).clone()


@dataclass
class TrainBatch:
    image_ids: list
    kept_blocks: torch.Tensor  # (B, K, s, s, 3)
    kept_indices: torch.Tensor  # (B, K)
    cand_blocks: torch.Tensor  # (B, k_pos + k_neg, s, s, 3)
    cand_labels: torch.Tensor  # (B, k_pos + k_neg) in {0, 1}
    text_ids: torch.Tensor  # (B, T) encoder token ids, PAD padded
    dec_input: torch.Tensor  # (B, T') decoder inputs starting with BOS
    dec_target: torch.Tensor  # (B, T') next-token targets, PAD padded


def prepare_batch(records, indices, pool: PatchPool, cfg: TrainConfig,
                  tokenizer: Tokenizer, rng: np.random.Generator,
                  patch_side: int, max_text_len: int) -> TrainBatch:
    """Assemble one training batch and advance the pool by its held-out patches."""
    chosen = [records[i] for i in indices]
    kept_sets, held_per_image = [], []
    for rec in chosen:
        grid = split(rec.image, patch_side, image_id=rec.id)
        kept, held = sample_subset(grid, cfg.sampling_ratio, rng)
        kept_sets.append(kept)
        held_per_image.append(held)
        pool.push(held)

    cand_blocks, cand_labels = [], []
    for rec, held in zip(chosen, held_per_image):
        pos_idx = rng.choice(len(held), size=cfg.k_pos, replace=len(held) < cfg.k_pos)
        pos = [held[int(i)] for i in pos_idx]
        neg = pool.sample(cfg.k_neg, exclude=rec.id, rng=rng)
        cand_blocks.append(np.stack([e.patch for e in pos + neg]))
        cand_labels.append([1] * len(pos) + [0] * len(neg))

    texts = [join_description_ids(tokenizer, rec.descriptions, max_text_len - 2)
             for rec in chosen]
    t_enc = max(len(t) for t in texts)
    t_dec = max(len(t) for t in texts) + 2  # BOS ... EOS
    pad = tokenizer.pad_id
    text_ids = [t + [pad] * (t_enc - len(t)) for t in texts]
    dec_seqs = [[tokenizer.bos_id] + t + [tokenizer.eos_id] + [pad] * (t_dec - len(t) - 2)
                for t in texts]
    dec_seqs = torch.tensor(dec_seqs, dtype=torch.long)

    return TrainBatch(
        image_ids=[rec.id for rec in chosen],
        kept_blocks=torch.from_numpy(np.stack([k.patches for k in kept_sets])).double(),
        kept_indices=torch.tensor([k.indices for k in kept_sets], dtype=torch.long),
        cand_blocks=torch.from_numpy(np.stack(cand_blocks)).double(),
        cand_labels=torch.tensor(cand_labels, dtype=torch.long),
        text_ids=torch.tensor(text_ids, dtype=torch.long),
        dec_input=dec_seqs[:, :-1],
        dec_target=dec_seqs[:, 1:],
    )


def compute_losses(model: PretrainModel, batch: TrainBatch, cfg: TrainConfig):
    """Weighted total loss plus per-term breakdown and PRS telemetry.

    Disabled terms contribute exactly zero and are never computed.
    """
    latents = model.encode_patches(batch.kept_blocks, batch.kept_indices)
    breakdown = {}
    aux = {"prs_pos": float("nan"), "prs_neg": float("nan"), "saturation": 0}
    terms = []

    if cfg.enable_rel:
        z_ct = model.image_context_token(latents)
        z_p = model.embed_pool_patch(batch.cand_blocks)
        scores = model.score_pool_patches(z_ct.unsqueeze(1), z_p)
        loss_rel, saturated = relevance_loss(scores, batch.cand_labels)
        pos_mask = batch.cand_labels == 1
        aux["prs_pos"] = scores[pos_mask].mean().item()
        aux["prs_neg"] = scores[~pos_mask].mean().item()
        aux["saturation"] = saturated
        breakdown["loss_rel"] = loss_rel
        terms.append(cfg.lambda_rel * loss_rel)

    if cfg.enable_con:
        encoded = model.encode_text_ids(batch.text_ids, pad_id=model_pad_id(model, cfg))
        w = model.text_context_token(encoded)
        z_img = model.contrastive_image_token(latents)
        loss_con = contrastive_loss(z_img, w, temperature=cfg.temperature)
        breakdown["loss_con"] = loss_con
        terms.append(cfg.lambda_con * loss_con)

    if cfg.enable_desc:
        logits = model.decode_description(latents, batch.dec_input)
        loss_desc, _ = description_loss(logits, batch.dec_target, model_pad_id(model, cfg))
        breakdown["loss_desc"] = loss_desc
        terms.append(cfg.lambda_desc * loss_desc)

    total = sum(terms)
    for name, value in list(breakdown.items()) + [("total", total)]:
        if not torch.isfinite(value):
            raise DivergenceError(f"non-finite loss term '{name}'")
    return total, breakdown, aux


def model_pad_id(model, cfg):
    # PAD is always index 0 of the reserved block; stored on the model's tokenizer
    # by train(); fall back to 0 for standalone use.
    return getattr(model, "_pad_id", 0)


# ---------------------------------------------------------------------------
# Checkpointing


def save_training_checkpoint(path, model, cfg, tokenizer, optimizer, pool, rng, step):
    tensors = {f"param.{n}": p.detach().numpy() for n, p in model.named_parameters()}
    tensors.update(optimizer.state_tensors())
    if pool.entries:
        tensors["pool.patches"] = np.stack([e.patch for e in pool.entries])
    extra = {
        "step": step,
        "optim_t": optimizer.t,
        "vocab": tokenizer.vocab,
        "rng_state": rng.bit_generator.state,
        "pool_ids": [e.image_id for e in pool.entries],
        "pool_indices": [e.index for e in pool.entries],
    }
    config = {"model": model.config.to_dict(), "train": cfg.to_dict()}
    save_checkpoint(path, config, tensors, extra)


def load_model(path):
    """Load (model, tokenizer, train config, extra) from a checkpoint file."""
    config, tensors, extra = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(config["model"])
    train_cfg = TrainConfig.from_dict(config["train"])
    model = PretrainModel(model_cfg, seed=train_cfg.seed)
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[f"param.{n}"]))
    tokenizer = Tokenizer(extra["vocab"])
    model._pad_id = tokenizer.pad_id
    return model, tokenizer, train_cfg, extra


def _restore_training_state(path, model_ref):
    from microfeat.patching import PoolEntry

    config, tensors, extra = load_checkpoint(path)
    pool_cap = config["train"]["pool_capacity"]
    pool = PatchPool(capacity=pool_cap)
    if "pool.patches" in tensors:
        patches = tensors["pool.patches"]
        pool.entries = [
            PoolEntry(i, j, patches[k])
            for k, (i, j) in enumerate(zip(extra["pool_ids"], extra["pool_indices"]))
        ]
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng_state"]
    return tensors, extra, pool, rng


# ---------------------------------------------------------------------------
# Training loop


def train(cfg: TrainConfig, records, out_dir=None, resume_from=None, log_every=0):
    """Run pretraining; returns (model, metrics list, tokenizer).

    Deterministic for a fixed seed with threads=1. Aborts with DivergenceError
    if the total loss exceeds 10x its initialization value for 100 consecutive
    steps.
    """
    torch.set_num_threads(max(1, cfg.threads))
    if resume_from:
        model, tokenizer, cfg_saved, _ = load_model(resume_from)
        cfg = cfg_saved
        tensors, extra, pool, rng = _restore_training_state(resume_from, model)
        optimizer = AdamW(dict(model.named_parameters()), cfg.beta1, cfg.beta2,
                          cfg.eps, cfg.weight_decay)
        optimizer.load_state(tensors, extra["optim_t"])
        start_step = extra["step"]
    else:
        tokenizer = Tokenizer.from_records(records)
        model_cfg = ModelConfig(vocab_size=len(tokenizer), **cfg.model)
        model = PretrainModel(model_cfg, seed=cfg.seed)
        model._pad_id = tokenizer.pad_id
        optimizer = AdamW(dict(model.named_parameters()), cfg.beta1, cfg.beta2,
                          cfg.eps, cfg.weight_decay)
        pool = PatchPool(capacity=cfg.pool_capacity)
        rng = np.random.default_rng(cfg.seed)
        start_step = 0

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    metrics = []
    init_total = None
    high_streak = 0
    patch_side = model.config.patch_side
    max_text_len = model.config.max_text_len

    for step in range(start_step, cfg.steps):
        lr = lr_at(step, cfg)
        idx = rng.integers(0, len(records), size=cfg.batch_size)
        batch = prepare_batch(records, idx, pool, cfg, tokenizer, rng,
                              patch_side, max_text_len)
        optimizer.zero_grad()
        total, breakdown, aux = compute_losses(model, batch, cfg)
        total.backward()
        optimizer.step(lr)

        record = {"step": step, "lr": lr, "total": total.item()}
        for name in ("loss_rel", "loss_con", "loss_desc"):
            record[name] = breakdown[name].item() if name in breakdown else 0.0
        record.update(aux)
        metrics.append(record)
        if log_every and step % log_every == 0:
            print(f"step {step} total {record['total']:.4f} lr {lr:.2e}", flush=True)

        if init_total is None:
            init_total = record["total"]
        if record["total"] > 10.0 * init_total:
            high_streak += 1
            if high_streak >= 100:
                raise DivergenceError(
                    f"total loss {record['total']:.4f} above 10x init "
                    f"({init_total:.4f}) for 100 consecutive steps"
                )
        else:
            high_streak = 0

        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ckpt = os.path.join(out_dir, f"step-{step + 1:06d}.ckpt")
            save_training_checkpoint(ckpt, model, cfg, tokenizer, optimizer, pool, rng, step + 1)

    if out_dir:
        final = os.path.join(out_dir, "final.ckpt")
        save_training_checkpoint(final, model, cfg, tokenizer, optimizer, pool, rng, cfg.steps)
        write_metrics(os.path.join(out_dir, "metrics.jsonl"), metrics)
    return model, metrics, tokenizer


def gradcheck_losses(seed=0, eps=1e-5):
    """Finite-difference check of every training loss on a tiny random instance.

    Returns {loss name: max relative error}; uses d=8, 2 heads, a 2-pair batch
    and 4-token texts in double precision.
    """
    from microfeat.core import grad_check
    from microfeat.corpus import SyntheticCorpusSpec, generate_synthetic

    spec = SyntheticCorpusSpec(num_classes=2, samples_per_class=2,
                               image_size=(16, 16), motif_size=6, patch_side=8,
                               stamps_per_image=4, seed=seed)
    records = generate_synthetic(spec)
    tokenizer = Tokenizer.from_records(records)
    cfg = TrainConfig(steps=1, batch_size=2, seed=seed, sampling_ratio=0.5,
                      k_pos=2, k_neg=2, pool_capacity=64,
                      model={"dim": 8, "heads": 2, "depth_image": 2,
                             "depth_text": 1, "decoder_depth": 1,
                             "patch_side": 8, "image_size": [16, 16]})
    model = PretrainModel(ModelConfig(vocab_size=len(tokenizer), **cfg.model),
                          seed=seed)
    model._pad_id = tokenizer.pad_id
    # check at a generic random parameter point: the near-zero training init
    # leaves many coordinates with gradients too small to resolve by FD
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.25)
    rng = np.random.default_rng(seed)
    pool = PatchPool(capacity=cfg.pool_capacity)
    batch = prepare_batch(records, [0, 2], pool, cfg, tokenizer, rng,
                          model.config.patch_side, model.config.max_text_len)

    errors = {}
    for term, flags in (
        ("loss_rel", dict(enable_rel=True, enable_con=False, enable_desc=False)),
        ("loss_con", dict(enable_rel=False, enable_con=True, enable_desc=False)),
        ("loss_desc", dict(enable_rel=False, enable_con=False, enable_desc=True)),
    ):
        term_cfg = TrainConfig.from_dict({**cfg.to_dict(), **flags})
        def loss_fn(m, _cfg=term_cfg):
            total, _, _ = compute_losses(m, batch, _cfg)
            return total
        errors[term] = grad_check(loss_fn, model, eps=eps, seed=seed)
    return errors


def write_metrics(path, metrics):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
