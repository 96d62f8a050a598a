"""Transfer protocols over a frozen encoder: linear probe and zero-shot matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from microfeat.alignment import join_description_ids
from microfeat.patching import split, sample_subset
from microfeat.training import AdamW


class EvaluationError(ValueError):
    pass


@dataclass
class ProbeResult:
    top1: float
    top5: float
    per_class: dict
    config: dict = field(default_factory=dict)


@torch.no_grad()
def embed_images(model, records):
    """Pooled context token for each record, using ALL patches (no masking)."""
    feats = []
    side = model.config.patch_side
    for rec in records:
        grid = split(rec.image, side, image_id=rec.id)
        blocks = torch.from_numpy(grid.patches).double().unsqueeze(0)
        idx = torch.arange(grid.n_patches).unsqueeze(0)
        latents = model.encode_patches(blocks, idx)
        feats.append(model.contrastive_image_token(latents).squeeze(0))
    return torch.stack(feats)


def _split_indices(n, seed, train_frac=0.8):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cut = int(round(train_frac * n))
    return perm[:cut], perm[cut:]


def _topk_accuracy(logits, labels, ks=(1, 5)):
    n_classes = logits.shape[1]
    out = {}
    for k in ks:
        kk = min(k, n_classes)
        top = torch.topk(logits, kk, dim=1).indices
        out[k] = (top == labels.unsqueeze(1)).any(dim=1).double().mean().item()
    return out


def linear_probe(model, records, level="species", seed=0, steps=200, lr=1e-3) -> ProbeResult:
    """Train only a linear map from pooled tokens to class logits; 80/20 split."""
    names = sorted({rec.labels[level] for rec in records})
    class_idx = {name: i for i, name in enumerate(names)}
    labels = torch.tensor([class_idx[rec.labels[level]] for rec in records])
    feats = embed_images(model, records)

    train_idx, test_idx = _split_indices(len(records), seed)
    train_classes = set(labels[train_idx].tolist())
    missing = [n for n, i in class_idx.items() if i not in train_classes]
    if missing:
        raise EvaluationError(f"classes absent from the training split: {missing}")

    torch.manual_seed(seed)
    head = torch.nn.Linear(model.config.dim, len(names)).double()
    opt = AdamW(dict(head.named_parameters()), weight_decay=0.0)
    # standardize features with train-split statistics so the probe is
    # insensitive to the (arbitrary) scale of a frozen encoder's outputs
    mu = feats[train_idx].mean(dim=0)
    sd = feats[train_idx].std(dim=0).clamp_min(1e-8)
    feats = (feats - mu) / sd
    x_train, y_train = feats[train_idx], labels[train_idx]
    for _ in range(steps):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(head(x_train), y_train)
        loss.backward()
        opt.step(lr)

    with torch.no_grad():
        logits = head(feats[test_idx])
    y_test = labels[test_idx]
    acc = _topk_accuracy(logits, y_test)
    pred = logits.argmax(dim=1)
    per_class = {}
    for name, i in class_idx.items():
        mask = y_test == i
        if mask.any():
            per_class[name] = (pred[mask] == i).double().mean().item()
    return ProbeResult(
        top1=acc[1], top5=acc[5], per_class=per_class,
        config={"level": level, "seed": seed, "steps": steps, "lr": lr},
    )


def rank_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-statistic identity.

    Equals the probability that a random positive outscores a random negative,
    with ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # midranks for tied scores
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    pos_ranks = ranks[labels == 1].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@torch.no_grad()
def prs_discrimination(model, records, sampling_ratio=0.5, k_neg=8, seed=0):
    """Relevance-score separation of own vs. other-image patches.

    For each record, half the patches form the anchor context; the held-out
    patches are positives and k_neg patches drawn from other records are
    negatives. Returns (roc auc, mean positive - mean negative score).
    """
    if len(records) < 2:
        raise EvaluationError("need at least two records to draw negatives")
    rng = np.random.default_rng(seed)
    side = model.config.patch_side
    scores, labels = [], []
    for rec in records:
        grid = split(rec.image, side, image_id=rec.id)
        kept, held = sample_subset(grid, sampling_ratio, rng)
        latents = model.encode_patches(
            torch.from_numpy(kept.patches).double().unsqueeze(0),
            torch.tensor([kept.indices]))
        z_ct = model.image_context_token(latents)
        others = [r for r in records if r.id != rec.id]
        negs = []
        for _ in range(k_neg):
            other = others[int(rng.integers(len(others)))]
            other_grid = split(other.image, side, image_id=other.id)
            negs.append(other_grid.patches[int(rng.integers(other_grid.n_patches))])
        cand = np.concatenate([np.stack([e.patch for e in held]), np.stack(negs)])
        z_p = model.embed_pool_patch(torch.from_numpy(cand).double())
        s = model.score_pool_patches(z_ct, z_p).squeeze(0).numpy()
        scores.extend(s.tolist())
        labels.extend([1] * len(held) + [0] * k_neg)
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    gap = float(scores[labels == 1].mean() - scores[labels == 0].mean())
    return rank_auc(scores, labels), gap


@torch.no_grad()
def embed_descriptions(model, tokenizer, class_texts):
    """Context-token embedding of each class description; class_texts is
    an ordered {class name: descriptions list or raw text}."""
    feats = []
    for name, desc in class_texts.items():
        if isinstance(desc, str):
            ids = tokenizer.encode(desc)
        else:
            ids = join_description_ids(tokenizer, desc, model.config.max_text_len - 1)
        encoded = model.encode_text_ids(torch.tensor([ids]), pad_id=tokenizer.pad_id)
        feats.append(model.text_context_token(encoded).squeeze(0))
    return torch.stack(feats)


def class_descriptions_from_corpus(records, level="species") -> dict:
    """One description list per class at the given level, ordered by class name."""
    out = {}
    for rec in records:
        out.setdefault(rec.labels[level], rec.descriptions)
    return {name: out[name] for name in sorted(out)}


def zero_shot(model, tokenizer, records, class_texts, level="species") -> ProbeResult:
    """Assign each image to the class with the most similar description.

    Similarity is the normalized dot product used by the contrastive loss.
    Ties break to the lowest class index (argmax returns the first maximum).
    """
    names = list(class_texts)
    for rec in records:
        if rec.labels[level] not in class_texts:
            raise EvaluationError(f"missing description for class '{rec.labels[level]}'")
    class_idx = {name: i for i, name in enumerate(names)}
    labels = torch.tensor([class_idx[rec.labels[level]] for rec in records])

    img = torch.nn.functional.normalize(embed_images(model, records), dim=-1)
    txt = torch.nn.functional.normalize(embed_descriptions(model, tokenizer, class_texts), dim=-1)
    sims = img @ txt.T
    acc = _topk_accuracy(sims, labels)
    # ties break to the lowest class index: numpy argmax returns the first maximum
    pred = torch.from_numpy(np.argmax(sims.numpy(), axis=1))
    acc[1] = (pred == labels).double().mean().item()
    per_class = {}
    for name, i in class_idx.items():
        mask = labels == i
        if mask.any():
            per_class[name] = (pred[mask] == i).double().mean().item()
    return ProbeResult(top1=acc[1], top5=acc[5], per_class=per_class,
                       config={"level": level, "classes": names})
