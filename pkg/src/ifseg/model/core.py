"""The full segmentation network and its training-free pieces."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..config import ModelConfig
from .backbone import FeatureExtractor
from .query_path import QueryPath
from .support_path import SupportPath
from .types import FeatureMap, Logits, SupportBundle


def binarize_logits(logits: Logits) -> torch.Tensor:
    """Channel argmax with ties broken toward background."""
    return logits.data[1] > logits.data[0]


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor mask resize using integer index maps (binarity kept)."""
    h, w = mask.shape
    th, tw = size
    rows = torch.div(torch.arange(th) * h, th, rounding_mode="floor")
    cols = torch.div(torch.arange(tw) * w, tw, rounding_mode="floor")
    return mask[rows][:, cols]


def compute_support_vector(feat: FeatureMap, support_pred: torch.Tensor) -> torch.Tensor:
    """Masked average pooling of the feature map over predicted foreground.

    Divides by the foreground cell count, not the map area, so the vector is
    independent of object size; an empty foreground yields the zero vector.
    """
    if support_pred.shape != torch.Size(feat.spatial):
        raise ValueError(
            f"support_pred {tuple(support_pred.shape)} must match feature grid {feat.spatial}"
        )
    fg = support_pred.to(feat.data.dtype)
    count = fg.sum()
    if count.item() == 0:
        return torch.zeros(feat.channels, dtype=feat.data.dtype)
    return (feat.data * fg).sum(dim=(1, 2)) / count


def attention_prior(
    support_feat: FeatureMap, query_feat: FeatureMap, support_logits: Logits
) -> torch.Tensor:
    """Training-free prior: per query cell, the max cosine similarity to any
    support foreground cell, min-max normalized over the query map.

    Empty support foreground or a constant raw map degenerate to all zeros.
    """
    if support_feat.channels != query_feat.channels:
        raise ValueError("support/query feature channel mismatch")
    pred = binarize_logits(support_logits)
    pred = downsample_mask(pred, support_feat.spatial)
    qh, qw = query_feat.spatial
    fg = pred.reshape(-1)
    if not bool(fg.any()):
        return torch.zeros(qh, qw, dtype=query_feat.data.dtype)
    c = support_feat.channels
    s = support_feat.data.reshape(c, -1).t()[fg]  # (m, C)
    q = query_feat.data.reshape(c, -1).t()  # (hq*wq, C)
    s = s / s.norm(dim=1, keepdim=True).clamp_min(1e-12)
    q = q / q.norm(dim=1, keepdim=True).clamp_min(1e-12)
    raw = (q @ s.t()).max(dim=1).values
    lo, hi = raw.min(), raw.max()
    if (hi - lo).item() == 0:
        return torch.zeros(qh, qw, dtype=query_feat.data.dtype)
    return ((raw - lo) / (hi - lo)).reshape(qh, qw)


def aggregate_multi_support(bundles: list[SupportBundle]) -> SupportBundle:
    """Element-wise mean of k support bundles.

    Accumulates in float64 so the result is independent of list order down
    to output precision.
    """
    if not bundles:
        raise ValueError("cannot aggregate an empty bundle list")
    ref = bundles[0]
    for b in bundles[1:]:
        if (
            b.support_vector.shape != ref.support_vector.shape
            or b.attention_mask.shape != ref.attention_mask.shape
        ):
            raise ValueError("bundle shapes mismatch")
    dtype = ref.support_vector.dtype
    k = len(bundles)

    def mean(parts):
        acc = torch.zeros_like(parts[0], dtype=torch.float64)
        for p in parts:
            acc = acc + p.to(torch.float64)
        return (acc / k).to(dtype)

    return SupportBundle(
        support_vector=mean([b.support_vector for b in bundles]),
        click_vector=mean([b.click_vector for b in bundles]),
        attention_mask=mean([b.attention_mask for b in bundles]),
    )


class SegmentationModel(nn.Module):
    """Backbone, support path and query path wired together.

    The backbone trunk is frozen; trainable parameters live in the feature
    reduction, the support path (including the click-vector reduction) and
    the query path.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.support_path = SupportPath(cfg.feature_channels, cfg.pooling_depth)
        self.query_path = QueryPath(cfg.feature_channels, cfg.query_scale_fractions)

    # -- stage wrappers -------------------------------------------------

    def extract_features(self, image: np.ndarray) -> FeatureMap:
        return self.extractor.extract(image)

    def support_forward(self, feat, pos_clicks, neg_clicks, prev_mask):
        return self.support_path(feat, pos_clicks, neg_clicks, prev_mask)

    def compute_click_vector(self, bottleneck: FeatureMap) -> torch.Tensor:
        return self.support_path.click_vector(bottleneck)

    def query_forward(self, query_feat, bundle, prev_query_mask):
        return self.query_path(query_feat, bundle, prev_query_mask)

    # -- episode orchestration ------------------------------------------

    def support_pass(self, feat, pos_clicks, neg_clicks, prev_mask):
        """Support path plus the two pooled vectors for one support image."""
        logits, bottleneck = self.support_forward(feat, pos_clicks, neg_clicks, prev_mask)
        pred = downsample_mask(binarize_logits(logits), feat.spatial)
        support_vector = compute_support_vector(feat, pred)
        click_vector = self.compute_click_vector(bottleneck)
        return logits, support_vector, click_vector

    def episode_forward(
        self,
        support_feats: list[FeatureMap],
        support_aux: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
        query_feats: list[FeatureMap],
        query_prev: list[torch.Tensor],
    ) -> tuple[list[Logits], list[Logits], list[list[Logits]]]:
        """One forward over k supports and any number of queries.

        support_aux holds (pos_clicks, neg_clicks, prev_mask) per support.
        Returns support logits, final query logits and per-query
        intermediate logits.
        """
        if len(support_feats) != len(support_aux):
            raise ValueError("one aux triple per support feature required")
        passes = [
            self.support_pass(f, *aux) for f, aux in zip(support_feats, support_aux)
        ]
        support_logits = [p[0] for p in passes]
        finals, intermediates = [], []
        for qf, prev in zip(query_feats, query_prev):
            bundles = [
                SupportBundle(
                    support_vector=sv,
                    click_vector=cv,
                    attention_mask=attention_prior(sf, qf, sl),
                )
                for sf, (sl, sv, cv) in zip(support_feats, passes)
            ]
            bundle = aggregate_multi_support(bundles)
            final, inter = self.query_forward(qf, bundle, prev)
            finals.append(final)
            intermediates.append(inter)
        return support_logits, finals, intermediates

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
