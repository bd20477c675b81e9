from .types import FeatureMap, Logits, SupportBundle
from .core import SegmentationModel, aggregate_multi_support, attention_prior, binarize_logits
from .losses import compute_loss
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "FeatureMap",
    "Logits",
    "SupportBundle",
    "SegmentationModel",
    "aggregate_multi_support",
    "attention_prior",
    "binarize_logits",
    "compute_loss",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
