"""Taxonomy-record data model, record file IO, and synthetic corpus generation.

Records carry an image, a six-level taxonomic label chain, and per-level
description texts ordered from the highest level to the lowest. The synthetic
generator produces corpora whose class identity is carried ONLY by a small
motif stamped onto a background shared across classes, so micro-scale
features are the sole discriminative signal.
"""

from __future__ import annotations

import base64
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

LEVELS = ("subphylum", "class", "order", "family", "genus", "species")

RESERVED_TOKENS = ("PAD", "BOS", "EOS", "CTX", "SEP")

MOTIF_COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 1.0, 0.1),
    "blue": (0.1, 0.1, 1.0),
    "yellow": (1.0, 1.0, 0.1),
    "magenta": (1.0, 0.1, 1.0),
    "cyan": (0.1, 1.0, 1.0),
    "orange": (1.0, 0.55, 0.1),
    "white": (1.0, 1.0, 1.0),
}

MOTIF_SHAPES = ("cross", "ring", "square", "diagonal", "stripes", "dots", "corner", "chevron")


class CorpusError(ValueError):
    """Raised for malformed record files, invariant violations, or bad specs."""


@dataclass
class TaxonomyRecord:
    """One specimen: image, six-level labels, per-level descriptions."""

    id: str
    image: np.ndarray  # H x W x 3 float, values in [0, 1]
    labels: dict  # level name -> taxon name, all six LEVELS present
    descriptions: list  # ordered (level, text) pairs, high to low
    aux: dict = field(default_factory=dict)  # free-form auxiliary levels, not validated

    def validate(self):
        for level in LEVELS:
            if not self.labels.get(level):
                raise CorpusError(f"record {self.id}: missing or empty level '{level}'")
        order = [LEVELS.index(lv) for lv, _ in self.descriptions if lv in LEVELS]
        if order != sorted(order):
            raise CorpusError(f"record {self.id}: descriptions not ordered high-to-low")
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise CorpusError(f"record {self.id}: image must be H x W x 3")
        return self


@dataclass
class SyntheticCorpusSpec:
    """Configuration for deterministic synthetic corpus generation."""

    num_classes: int
    samples_per_class: int
    image_size: tuple = (32, 32)
    motif_size: int = 6
    patch_side: int = 8
    stamps_per_image: int = 12
    vocab: list | None = None  # defaults to default_vocab(num_classes)
    seed: int = 0

    def validate(self):
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise CorpusError("num_classes and samples_per_class must be positive")
        if self.motif_size > self.patch_side:
            raise CorpusError("motif_size must not exceed patch_side (motifs are micro-scale)")
        h, w = self.image_size
        if h % self.patch_side or w % self.patch_side:
            raise CorpusError("image size must be divisible by patch_side")
        if self.num_classes > len(MOTIF_COLORS) * len(MOTIF_SHAPES):
            raise CorpusError("too many classes for the available motif attributes")
        if self.vocab is not None:
            needed = set(RESERVED_TOKENS) | set(_corpus_words(self.num_classes))
            missing = needed - set(self.vocab)
            if missing:
                raise CorpusError(f"vocab too small to name all classes; missing {sorted(missing)}")
        return self


# ---------------------------------------------------------------------------
# Record file IO (line-delimited JSON, UTF-8)


def _encode_image(img):
    arr = np.ascontiguousarray(np.asarray(img, dtype="<f4"))
    return {
        "shape": list(arr.shape),
        "dtype": "float32",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_image(obj):
    if "path" in obj:
        arr = np.load(obj["path"])
        return np.asarray(arr, dtype=np.float64)
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype="<f4").reshape(obj["shape"])
    return arr.astype(np.float64)


def record_to_json(rec: TaxonomyRecord) -> str:
    obj = {
        "id": rec.id,
        "image": _encode_image(rec.image),
        "labels": {lv: rec.labels[lv] for lv in LEVELS},
        "descriptions": [[lv, txt] for lv, txt in rec.descriptions],
    }
    if rec.aux:
        obj["aux"] = rec.aux
    return json.dumps(obj, sort_keys=True)


def record_from_json(line: str) -> TaxonomyRecord:
    obj = json.loads(line)
    rec = TaxonomyRecord(
        id=obj["id"],
        image=_decode_image(obj["image"]),
        labels=dict(obj["labels"]),
        descriptions=[(lv, txt) for lv, txt in obj["descriptions"]],
        aux=obj.get("aux", {}),
    )
    return rec.validate()


def check_hierarchy(records):
    """Verify that no child taxon has two distinct parents across the corpus.

    Equivalent to requiring that the level-labeled corpus forms a forest.
    """
    for parent_level, child_level in zip(LEVELS[:-1], LEVELS[1:]):
        parent_of = {}
        for rec in records:
            child = rec.labels[child_level]
            parent = rec.labels[parent_level]
            seen = parent_of.setdefault(child, parent)
            if seen != parent:
                raise CorpusError(
                    f"hierarchy inconsistency: {child_level} '{child}' maps to both "
                    f"{parent_level} '{seen}' and '{parent}'"
                )


def load_records(path) -> list:
    """Load and validate a line-delimited record file; stable ordering by id."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json(line))
            except CorpusError:
                raise
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorpusError(f"{path}: parse failure at line {lineno}: {exc}") from exc
    check_hierarchy(records)
    records.sort(key=lambda r: r.id)
    return records


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def corpus_stats(records) -> dict:
    """Per-level name counts. Counts at each level sum to len(records)."""
    if not records:
        raise CorpusError("corpus_stats requires a non-empty record list")
    stats = {}
    for level in LEVELS:
        stats[level] = dict(Counter(rec.labels[level] for rec in records))
    return stats


# ---------------------------------------------------------------------------
# Synthetic corpus


def class_attributes(class_idx: int) -> tuple:
    """(color name, shape name) defining the motif of a synthetic class."""
    colors = list(MOTIF_COLORS)
    color = colors[class_idx % len(colors)]
    shape = MOTIF_SHAPES[(class_idx // len(colors)) % len(MOTIF_SHAPES)]
    return color, shape


def _shape_mask(shape: str, m: int) -> np.ndarray:
    yy, xx = np.mgrid[0:m, 0:m]
    c = (m - 1) / 2.0
    if shape == "cross":
        return (np.abs(yy - c) <= 0.6) | (np.abs(xx - c) <= 0.6)
    if shape == "ring":
        r = np.hypot(yy - c, xx - c)
        return (r <= c) & (r >= c - 1.5)
    if shape == "square":
        return (yy == 0) | (yy == m - 1) | (xx == 0) | (xx == m - 1)
    if shape == "diagonal":
        return np.abs(yy - xx) <= 0.5
    if shape == "stripes":
        return yy % 2 == 0
    if shape == "dots":
        return (yy % 2 == 0) & (xx % 2 == 0)
    if shape == "corner":
        return (yy <= m // 2) & (xx <= m // 2)
    if shape == "chevron":
        return np.abs(xx - c) + 0.0 >= np.abs(yy - c)
    raise CorpusError(f"unknown motif shape '{shape}'")


def class_motif(class_idx: int, motif_size: int) -> np.ndarray:
    """The motif_size x motif_size x 3 pixel block stamped for a class."""
    color_name, shape_name = class_attributes(class_idx)
    mask = _shape_mask(shape_name, motif_size).astype(np.float64)
    color = np.array(MOTIF_COLORS[color_name], dtype=np.float64)
    block = mask[:, :, None] * color[None, None, :] + (1.0 - mask[:, :, None]) * 0.04
    return block


def render_background(spec: SyntheticCorpusSpec, sample_idx: int) -> np.ndarray:
    """Structured background for sample index, identical across classes."""
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, sample_idx])
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((h, w, 3))
    for ch in range(3):
        base = rng.uniform(0.45, 0.55)  # faint per-sample tint, the background's identity
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        img[:, :, ch] = base + 0.02 * np.sin(2 * math.pi * (fy * yy / h + fx * xx / w) + phase)
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.05, 0.95)


def stamp_positions(spec: SyntheticCorpusSpec, sample_idx: int) -> list:
    """Top-left corners of the motif stamps, identical across classes."""
    h, w = spec.image_size
    m = spec.motif_size
    rng = np.random.default_rng([spec.seed, sample_idx, 1])
    return [
        (int(rng.integers(0, h - m + 1)), int(rng.integers(0, w - m + 1)))
        for _ in range(spec.stamps_per_image)
    ]


def _taxon_names(class_idx: int) -> dict:
    return {
        "subphylum": f"subphylum-{class_idx // 32}",
        "class": f"class-{class_idx // 16}",
        "order": f"order-{class_idx // 8}",
        "family": f"family-{class_idx // 4}",
        "genus": f"genus-{class_idx // 2}",
        "species": f"species-{class_idx}",
    }


def class_descriptions(class_idx: int) -> list:
    """Per-level description texts from the fixed closed grammar."""
    names = _taxon_names(class_idx)
    color, shape = class_attributes(class_idx)
    return [
        ("subphylum", f"{names['subphylum']} is a synthetic arthropod group"),
        ("class", f"{names['class']} contains segmented synthetic taxa"),
        ("order", f"{names['order']} shows patterned body texture"),
        ("family", f"{names['family']} bears repeated micro markings"),
        ("genus", f"{names['genus']} carries a distinct stamp"),
        ("species", f"{names['species']} has {color} {shape} motif at micro scale"),
    ]


def _corpus_words(num_classes: int) -> list:
    words = set()
    for c in range(num_classes):
        for _, text in class_descriptions(c):
            words.update(text.split())
    return sorted(words)


def default_vocab(num_classes: int) -> list:
    """Closed vocabulary covering the synthetic grammar plus reserved tokens."""
    return list(RESERVED_TOKENS) + _corpus_words(num_classes)


def generate_synthetic(spec: SyntheticCorpusSpec) -> list:
    """Deterministic synthetic corpus; class identity lives only in the motifs."""
    spec.validate()
    records = []
    for c in range(spec.num_classes):
        motif = class_motif(c, spec.motif_size)
        descs = class_descriptions(c)
        labels = _taxon_names(c)
        for j in range(spec.samples_per_class):
            img = render_background(spec, j).copy()
            for (y, x) in stamp_positions(spec, j):
                img[y : y + spec.motif_size, x : x + spec.motif_size, :] = motif
            rec = TaxonomyRecord(
                id=f"rec-{c:03d}-{j:04d}",
                image=img.astype(np.float32).astype(np.float64),
                labels=dict(labels),
                descriptions=list(descs),
            )
            records.append(rec.validate())
    check_hierarchy(records)
    return records
