"""Query path: parallel multi-scale enrichment of query features.

At each scale the query feature map is resized, the support and click
vectors are expanded to the scale's spatial extent, and the attention mask
and previous query prediction are resized to match. Everything is
concatenated and processed by 1x1 and 3x3 conv + ReLU blocks. A top-down
pass merges coarser scales into finer ones, per-scale heads emit the
intermediate logits, and the fused features produce the final logits at
input resolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .support_path import ConvBlock, resize_to
from .types import FeatureMap, Logits, SupportBundle


class Beta(nn.Module):
    """1x1 conv + ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


def _scale_size(spatial: tuple[int, int], fraction: float) -> tuple[int, int]:
    h, w = spatial
    return (max(1, round(h * fraction)), max(1, round(w * fraction)))


class QueryPath(nn.Module):
    def __init__(self, channels: int, scale_fractions: tuple[float, ...]):
        super().__init__()
        c = channels
        n = len(scale_fractions)
        self.fractions = tuple(scale_fractions)
        # feature + support vector + click vector + attention + prev mask
        in_ch = 3 * c + 2
        self.merge = nn.ModuleList([Beta(in_ch, c) for _ in range(n)])
        self.process = nn.ModuleList([ConvBlock(c, c) for _ in range(n)])
        self.top_down = nn.ModuleList([Beta(2 * c, c) for _ in range(n - 1)])
        self.scale_heads = nn.ModuleList([nn.Conv2d(c, 2, kernel_size=1) for _ in range(n)])
        self.fuse = Beta(n * c, c)
        self.post = ConvBlock(c, c)
        self.head = nn.Conv2d(c, 2, kernel_size=1)

    def forward(
        self,
        query_feat: FeatureMap,
        bundle: SupportBundle,
        prev_query_mask: torch.Tensor,
    ) -> tuple[Logits, list[Logits]]:
        c = query_feat.channels
        if bundle.support_vector.shape[0] != c:
            raise ValueError(
                f"bundle width {bundle.support_vector.shape[0]} != feature channels {c}"
            )
        out_size = (prev_query_mask.shape[0], prev_query_mask.shape[1])
        dtype = query_feat.data.dtype
        prev = prev_query_mask.to(dtype).unsqueeze(0)
        attn = bundle.attention_mask.to(dtype).unsqueeze(0)

        per_scale = []
        for i, frac in enumerate(self.fractions):
            size = _scale_size(query_feat.spatial, frac)
            feat_i = resize_to(query_feat.data, size)
            sup_i = bundle.support_vector.view(c, 1, 1).expand(c, *size)
            clk_i = bundle.click_vector.view(c, 1, 1).expand(c, *size)
            attn_i = resize_to(attn, size)
            prev_i = resize_to(prev, size)
            x = torch.cat([feat_i, sup_i, clk_i, attn_i, prev_i], dim=0).unsqueeze(0)
            per_scale.append(self.process[i](self.merge[i](x)))

        # Coarse-to-fine merge; fractions are ordered largest first.
        fused = [None] * len(per_scale)
        fused[-1] = per_scale[-1]
        for i in range(len(per_scale) - 2, -1, -1):
            up = resize_to(fused[i + 1].squeeze(0), per_scale[i].shape[-2:]).unsqueeze(0)
            fused[i] = self.top_down[i](torch.cat([per_scale[i], up], dim=1))

        intermediate = [
            Logits(data=self.scale_heads[i](fused[i]).squeeze(0))
            for i in range(len(fused))
        ]
        base = fused[0].shape[-2:]
        stacked = torch.cat(
            [resize_to(f.squeeze(0), base).unsqueeze(0) for f in fused], dim=1
        )
        out = self.post(self.fuse(stacked))
        final = resize_to(self.head(out).squeeze(0), out_size)
        return Logits(data=final), intermediate
