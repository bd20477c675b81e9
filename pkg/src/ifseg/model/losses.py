"""Composite training loss.

Every term is the mean pixel-level binary cross-entropy of a two-channel
logit map against a binary target (softmax over the two channels, i.e.
two-way cross-entropy). The total is

    mean over k support terms + mean over n intermediate query terms
    + the final query term.

Intermediate targets are produced by nearest-neighbor downsampling of the
query ground truth so they stay binary.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import downsample_mask
from .types import Logits


def _bce_term(logits: Logits, target: torch.Tensor) -> torch.Tensor:
    uniq = torch.unique(target)
    if not bool(((uniq == 0) | (uniq == 1)).all()):
        raise ValueError("loss targets must be binary")
    if target.shape != torch.Size(logits.spatial):
        target = downsample_mask(target, logits.spatial)
    return F.cross_entropy(
        logits.data.unsqueeze(0),
        target.to(torch.int64).unsqueeze(0),
    )


def compute_loss(
    support_logits: list[Logits],
    s_masks: list[torch.Tensor],
    intermediate_logits: list[Logits],
    final_logits: Logits,
    q_mask: torch.Tensor,
) -> torch.Tensor:
    if not support_logits or not intermediate_logits:
        raise ValueError("need at least one support term and one intermediate term")
    if len(support_logits) != len(s_masks):
        raise ValueError("one mask per support logits map required")
    k = len(support_logits)
    n = len(intermediate_logits)
    support_term = sum(_bce_term(l, m) for l, m in zip(support_logits, s_masks)) / k
    inter_term = sum(_bce_term(l, q_mask) for l in intermediate_logits) / n
    final_term = _bce_term(final_logits, q_mask)
    return support_term + inter_term + final_term
