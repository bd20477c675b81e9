"""Shared inference pipeline: original-resolution state in, masks out.

All click coordinates, previous masks and returned predictions live at each
image's original resolution. Inputs are pad-resized to the model's input
patch, clicks are encoded as disks in patch space, one forward runs over
the whole support/query set, and predictions are restored to original
resolution. The evaluator and the live annotation service both run through
this path, so a replayed click sequence yields byte-identical masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .clicks import Click, encode_clicks
from .data import PadResize
from .model import SegmentationModel, binarize_logits
from .model.types import FeatureMap


@dataclass
class SupportItem:
    image: np.ndarray
    clicks: list[Click] = field(default_factory=list)
    prev_mask: np.ndarray | None = None


@dataclass
class QueryItem:
    image: np.ndarray
    prev_mask: np.ndarray | None = None


class MaskPredictor:
    """Checkpoint-bound inference wrapper shared by evaluator and service."""

    def __init__(self, model: SegmentationModel):
        self.model = model
        self.model.eval()
        self.cfg = model.cfg
        # Keyed by id(); entries keep a strong reference to the array so the
        # address cannot be recycled while the entry lives.
        self._feature_cache: dict[int, tuple[np.ndarray, PadResize, FeatureMap]] = {}

    def _prepare(self, image: np.ndarray) -> tuple[PadResize, FeatureMap]:
        hit = self._feature_cache.get(id(image))
        if hit is not None:
            return hit[1], hit[2]
        pr = PadResize.fit(image.shape[0], image.shape[1], self.cfg.input_patch)
        padded = pr.apply_image(image)
        with torch.no_grad():
            feat = self.model.extract_features(padded)
        if len(self._feature_cache) > 64:
            self._feature_cache.clear()
        self._feature_cache[id(image)] = (image, pr, feat)
        return pr, feat

    def _mask_tensor(self, mask: np.ndarray | None, pr: PadResize) -> torch.Tensor:
        if mask is None:
            return torch.zeros(pr.target, pr.target)
        return torch.from_numpy(
            np.ascontiguousarray(pr.apply_mask(np.asarray(mask, dtype=np.float32)))
        )

    def predict(
        self, supports: list[SupportItem], queries: list[QueryItem]
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """One forward over the episode; returns original-resolution masks."""
        if not supports:
            raise ValueError("at least one support image is required")
        support_feats, support_aux, support_prs = [], [], []
        for item in supports:
            pr, feat = self._prepare(item.image)
            masks = encode_clicks(
                [self._map_click(c, pr) for c in item.clicks],
                pr.target, pr.target, self.cfg.click_disk_radius,
            )
            aux = (
                torch.from_numpy(masks.positive.astype(np.float32)),
                torch.from_numpy(masks.negative.astype(np.float32)),
                self._mask_tensor(item.prev_mask, pr),
            )
            support_feats.append(feat)
            support_aux.append(aux)
            support_prs.append(pr)
        query_feats, query_prev, query_prs = [], [], []
        for item in queries:
            pr, feat = self._prepare(item.image)
            query_feats.append(feat)
            query_prev.append(self._mask_tensor(item.prev_mask, pr))
            query_prs.append(pr)

        with torch.no_grad():
            support_logits, final_logits, _ = self.model.episode_forward(
                support_feats, support_aux, query_feats, query_prev
            )
        support_masks = [
            pr.restore_mask(binarize_logits(l).numpy())
            for l, pr in zip(support_logits, support_prs)
        ]
        query_masks = [
            pr.restore_mask(binarize_logits(l).numpy())
            for l, pr in zip(final_logits, query_prs)
        ]
        return support_masks, query_masks

    @staticmethod
    def _map_click(click: Click, pr: PadResize) -> Click:
        r, c = pr.map_point(click.row, click.col)
        return Click(row=r, col=c, polarity=click.polarity, order=click.order)
