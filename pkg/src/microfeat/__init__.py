"""Desk-scale self-supervised pretraining on micro-feature imagery.

Pretrains a small vision transformer with three objectives: a binary
patch-relevance score that spots which held-out patches belong to a
partially observed image, a symmetric image-text contrastive loss, and an
autoregressive description decoding loss. Ships with a deterministic
synthetic corpus generator, a training harness, and linear-probe /
zero-shot evaluation protocols.
"""

__version__ = "0.1.0"

from microfeat.corpus import TaxonomyRecord, SyntheticCorpusSpec, generate_synthetic, load_records
from microfeat.model import ModelConfig, PretrainModel

__all__ = [
    "TaxonomyRecord",
    "SyntheticCorpusSpec",
    "generate_synthetic",
    "load_records",
    "ModelConfig",
    "PretrainModel",
]
